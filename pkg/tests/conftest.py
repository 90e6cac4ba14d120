# conftest.py
import itertools
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT))

from abstraction import finite_system  # noqa: E402

MODELS = ROOT / "data" / "models"


@pytest.fixture
def models_dir() -> Path:
    return MODELS


def model_path(name: str) -> Path:
    return MODELS / f"{name}.toml"


def random_system(rng: np.random.Generator, name: str = "random", max_states: int = 5, max_inputs: int = 2):
    """Случайная неблокирующая система с выходами в [0, 3] на полушаговой сетке."""
    n = int(rng.integers(1, max_states + 1))
    m = int(rng.integers(1, max_inputs + 1))
    outputs = [[float(v)] for v in rng.integers(0, 7, size=n) * 0.5]
    edges = {}
    for x, u in itertools.product(range(n), range(m)):
        k = int(rng.integers(1, n + 1))
        edges[(x, u)] = sorted(int(t) for t in rng.choice(n, size=k, replace=False))
    initial = [x for x in range(n) if rng.random() < 0.6] or [0]
    secret = [x for x in range(n) if rng.random() < 0.4]
    return finite_system(outputs, edges, initial, secret, n_inputs=m, name=name)


def random_corpus(seed: int, count: int, **kwargs):
    rng = np.random.default_rng(seed)
    return [random_system(rng, name=f"random{k}", **kwargs) for k in range(count)]
