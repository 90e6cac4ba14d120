# test_config.py
import importlib
import sys
import types

import pytest

import config


def test_settings_load_without_dotenv(monkeypatch):
    monkeypatch.setitem(sys.modules, "dotenv", None)
    monkeypatch.setenv("OPACK_SAMPLES", "77")
    fresh = importlib.reload(config)
    assert fresh.settings.samples == 77
    assert fresh.settings.schema_version == 1
    monkeypatch.undo()
    importlib.reload(config)


def test_dotenv_failures_are_not_swallowed(monkeypatch):
    def broken():
        raise RuntimeError("bad .env line")

    monkeypatch.setitem(sys.modules, "dotenv", types.SimpleNamespace(load_dotenv=broken))
    with pytest.raises(RuntimeError, match="bad .env"):
        importlib.reload(config)
    monkeypatch.undo()
    importlib.reload(config)
