# test_relations.py
import dataclasses
import time

import numpy as np
import pytest

import kinf
from abstraction import build_abstraction, finite_system, neighbor_values
from conftest import model_path, random_corpus
from design import Quantization, choose_quantization, design_parameters
from model import load_network, network_from_dict
from relations import (
    check_relation,
    composed_function,
    levelset_relation,
    max_relation,
    validate_composed_function,
    validate_sopsf,
)

NOTIONS = ("init", "current", "inf")


def _abs_diff(x, xh):
    return float(np.max(np.abs(np.asarray(x) - np.asarray(xh))))


def _first_stage_doc():
    return {
        "network": {"name": "stage"},
        "subsystem": {"1": {
            "state_set": "(0, 0.6)", "secret_set": "(0, 0.2]", "input_set": "{0.145}",
            "dynamics": ["0.1*x1 + u1"],
            "output": {"1": ["x1"]},
            "certificate": {
                "kappa": "0.9*s", "rho_int": "0.05*s", "rho_ext": "s",
                "alpha_lower": "s", "alpha_upper": "s", "gamma_hat": "s", "lipschitz": "s",
            },
        }},
    }


@pytest.fixture(scope="module")
def cascade3():
    net = load_network(model_path("cascade3"), samples=50)
    design = design_parameters(net, 0.25)
    quant = choose_quantization(net, design, "init")
    return net, design, quant


def test_reflexive_relation():
    for t in random_corpus(seed=3, count=30):
        for notion in NOTIONS:
            for eps in (0.0, 1.0):
                rel = max_relation(t, t, eps, notion)
                assert rel.ok, (t.name, notion, eps, rel.violations)
                assert all((x, x) in rel for x in range(t.n_states))


def test_refined_grid_is_related_to_coarse_grid():
    sub = network_from_dict(_first_stage_doc(), samples=50).sub(1)
    fine = build_abstraction(sub, Quantization(0.1))
    coarse = build_abstraction(sub, Quantization(0.2))
    assert fine.n_states == 5 and coarse.n_states == 2
    rel = max_relation(fine, coarse, 0.25, "init")
    assert rel.ok
    assert check_relation(fine, coarse, rel.pairs, 0.25, "init") == []


def test_secret_structure_mismatch_fails_condition_one():
    edges = {(0, 0): [1], (1, 0): [0]}
    secret_only = finite_system([[0.0], [1.0]], edges, initial=[0, 1], secret=[0, 1])
    secret_free = finite_system([[0.0], [1.0]], edges, initial=[0, 1], secret=[])
    rel = max_relation(secret_only, secret_free, 1.0, "init")
    assert not rel.ok
    assert rel.failed_clauses == ("1a", "1b")
    assert rel.size == 4


def test_current_notion_matches_secret_successors():
    # одинаковые графы, но у правой системы секрет в другом состоянии
    edges = {(0, 0): [1, 2], (1, 0): [1], (2, 0): [2]}
    t = finite_system([[0.0], [1.0], [1.0]], edges, initial=[0], secret=[1])
    that = finite_system([[0.0], [1.0], [1.0]], edges, initial=[0], secret=[2])
    rel = max_relation(t, that, 0.0, "current")
    assert rel.ok
    assert (1, 2) in rel and (2, 1) in rel
    strict = max_relation(t, that, 0.0, "init")
    assert strict.ok


def test_levelset_relation():
    sub = network_from_dict(_first_stage_doc(), samples=50).sub(1)
    fine = build_abstraction(sub, Quantization(0.1))
    coarse = build_abstraction(sub, Quantization(0.2))
    rel = levelset_relation(fine, coarse, _abs_diff, 0.25)
    expected = np.abs(fine.points[:, None, 0] - coarse.points[None, :, 0]) <= 0.25 + 1e-9
    assert np.array_equal(rel.pairs, expected)
    assert rel.epsilon == pytest.approx(0.25)
    assert not rel.validated
    diag = levelset_relation(coarse, coarse, _abs_diff, 0.0)
    assert np.array_equal(diag.pairs, np.eye(2, dtype=bool))
    halved = levelset_relation(coarse, coarse, _abs_diff, 1.0, alpha=kinf.LinearGain(0.5))
    assert halved.epsilon == pytest.approx(2.0)


def test_composed_function(cascade3):
    net, design, _ = cascade3
    V = composed_function(net, design)
    assert V([0.2, 0.4, 0.3], [0.2, 0.2, 0.4]) == pytest.approx(0.2)
    assert V([0.1, 0.1, 0.1], [0.1, 0.1, 0.1]) == 0.0


def _with_points(t, outputs, name):
    return dataclasses.replace(t, name=name, outputs=outputs, points=outputs.copy())


def test_levelset_is_contained_in_max_relation():
    corpus = random_corpus(seed=21, count=400)
    rng = np.random.default_rng(22)
    varpi = 0.25
    started = time.perf_counter()
    validated = 0
    for t in corpus:
        lhs = _with_points(t, t.outputs.copy(), t.name)
        noisy = t.outputs + rng.uniform(-0.1, 0.1, size=t.outputs.shape)
        rhs = _with_points(t, noisy, t.name + "-noisy")
        for notion in NOTIONS:
            level = levelset_relation(lhs, rhs, _abs_diff, varpi, notion=notion)
            if check_relation(lhs, rhs, level.pairs, level.epsilon, notion, initial=False):
                continue
            validated += 1
            best = max_relation(lhs, rhs, level.epsilon, notion)
            assert not np.any(level.pairs & ~best.pairs)
        if validated >= 50:
            break
    assert validated >= 50
    assert time.perf_counter() - started < 60


def test_max_relation_is_greatest_and_order_free():
    rng = np.random.default_rng(31)
    for t in random_corpus(seed=30, count=40):
        that = random_corpus(seed=int(rng.integers(1 << 30)), count=1)[0]
        for notion in NOTIONS:
            for eps in (0.5, 1.0):
                batch = max_relation(t, that, eps, notion, strategy="batch")
                work = max_relation(t, that, eps, notion, strategy="worklist")
                assert np.array_equal(batch.pairs, work.pairs)
                assert check_relation(t, that, batch.pairs, eps, notion, initial=False) == []
                close = np.abs(t.outputs[:, None, 0] - that.outputs[None, :, 0]) <= eps + 1e-9
                deleted = list(zip(*np.nonzero(close & ~batch.pairs)))
                for k in rng.permutation(len(deleted))[:20]:
                    grown = batch.pairs.copy()
                    grown[deleted[k]] = True
                    assert check_relation(t, that, grown, eps, notion, initial=False)


def test_relation_rejects_internal_inputs(cascade3):
    net, _, quant = cascade3
    a2 = build_abstraction(net.sub(2), quant[2], neighbor_values(net, quant)[2])
    with pytest.raises(ValueError, match="internal inputs"):
        max_relation(a2, a2, 0.1)
    with pytest.raises(ValueError, match="unknown refinement strategy"):
        t = finite_system([[0.0]], {(0, 0): [0]}, initial=[0], secret=[])
        max_relation(t, t, 0.0, strategy="random")


def _stage_abstraction(net, quant, eta):
    sub = net.sub(3)
    return sub, build_abstraction(sub, Quantization(eta), neighbor_values(net, quant)[3], strict=False)


def test_sopsf_passes_on_admissible_grid(cascade3):
    net, _, quant = cascade3
    started = time.perf_counter()
    sub, a = _stage_abstraction(net, quant, 0.2)
    report = validate_sopsf(sub, a, None, 0.25, 0.25, "init", samples=1000, seed=1)
    assert report.passed, report.counterexamples
    assert report.checked["1a"] > 1000
    assert report.checked["3a"] > 0 and report.checked["3b"] > 0
    assert report.worst["2"] <= 1e-9
    assert time.perf_counter() - started < 30


def test_sopsf_reports_coarse_grid(cascade3):
    net, _, quant = cascade3
    sub, a = _stage_abstraction(net, quant, 0.5)
    report = validate_sopsf(sub, a, None, 0.25, 0.25, "init", samples=300, seed=1)
    assert not report.passed
    assert report.failures("3") > 0
    assert any(c.startswith(("sampled counterexample", "grid counterexample")) for c in report.counterexamples)


def test_sopsf_zero_precision_fails_condition_one(cascade3):
    net, _, quant = cascade3
    sub, a = _stage_abstraction(net, quant, 0.2)
    report = validate_sopsf(sub, a, None, 0.0, 0.25, "init", samples=50, seed=1)
    assert report.failures("1") > 0
    assert report.sampled_failures > 0


def test_sopsf_other_notions(cascade3):
    net, _, quant = cascade3
    sub, a = _stage_abstraction(net, quant, 0.2)
    for notion in ("current", "inf"):
        report = validate_sopsf(sub, a, None, 0.25, 0.25, notion, samples=200, seed=2)
        assert report.passed, (notion, report.counterexamples)
        assert "3c" in report.checked


def test_composed_function_on_cascade():
    net = load_network(model_path("cascade2"), samples=50)
    design = design_parameters(net, 0.25)
    choose_quantization(net, design, "init")
    report = validate_composed_function(net, design, samples=300, seed=4)
    assert report.passed, report.counterexamples
    assert report.checked["internal-mismatch"] == 600

    design.subsystems[2].vartheta = 0.0
    broken = validate_composed_function(net, design, samples=100, seed=4)
    assert broken.failures("internal-mismatch") > 0


def test_composed_function_on_network6():
    net = load_network(model_path("network6"), samples=50)
    design = design_parameters(net, 0.01)
    choose_quantization(net, design, "init")
    report = validate_composed_function(net, design, samples=200, seed=5)
    assert report.passed, report.counterexamples
    assert sum(report.checked.values()) > 0
