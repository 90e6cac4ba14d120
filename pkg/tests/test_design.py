# test_design.py
import itertools
import time

import networkx as nx
import numpy as np
import pytest

import kinf
from conftest import model_path
from design import (
    InfeasibleDesign,
    InterconnectionGraph,
    SmallGainViolation,
    check_composability,
    check_small_gain,
    choose_quantization,
    design_parameters,
    epsilon_of,
    find_sigma,
    gain_matrix,
    max_eta,
    min_theta,
    tarjan_scc,
)
from model import IssCertificate, load_network


def _cert(kappa=0.9, rho_int=0.05, rho_ext=1.0, alpha_lower=1.0):
    def lin(c):
        return kinf.Zero() if c == 0 else kinf.LinearGain(c)
    one = kinf.identity()
    return IssCertificate(lin(kappa), lin(rho_int), lin(rho_ext), lin(alpha_lower), one, one, one)


@pytest.fixture(scope="module")
def network6():
    return load_network(model_path("network6"), samples=50)


def _linear_gains(C: dict):
    return {k: kinf.LinearGain(v) if v > 0 else kinf.Zero() for k, v in C.items()}


def test_tarjan_network6_graph():
    edges = {(2, 1), (3, 2), (2, 3), (5, 4), (3, 5), (4, 5), (6, 5)}
    scc = tarjan_scc(InterconnectionGraph((1, 2, 3, 4, 5, 6), frozenset(edges)))
    assert set(scc.components) == {(1,), (4, 5), (2, 3), (6,)}
    bottom = {scc.components[k] for k in scc.bottom}
    assert bottom == {(2, 3), (6,)}


def test_tarjan_chain_and_empty():
    chain = InterconnectionGraph((1, 2, 3, 4), frozenset({(2, 1), (3, 2), (4, 3)}))
    assert tarjan_scc(chain).components == ((1,), (2,), (3,), (4,))
    assert len(tarjan_scc(InterconnectionGraph((1, 2, 3), frozenset())).components) == 3
    with pytest.raises(InfeasibleDesign, match="self-loop"):
        tarjan_scc(InterconnectionGraph((1,), frozenset({(1, 1)})))


def test_tarjan_matches_networkx():
    rng = np.random.default_rng(11)
    for _ in range(50):
        n = int(rng.integers(1, 9))
        vs = tuple(range(1, n + 1))
        edges = frozenset(
            (i, j) for i, j in itertools.permutations(vs, 2) if rng.random() < 0.3
        )
        ours = set(tarjan_scc(InterconnectionGraph(vs, edges)).components)
        g = nx.DiGraph()
        g.add_nodes_from(vs)
        g.add_edges_from((j, i) for (i, j) in edges)
        theirs = {tuple(sorted(c)) for c in nx.strongly_connected_components(g)}
        assert ours == theirs


def test_small_gain_examples(network6):
    assert check_small_gain((1,), {})
    gains = gain_matrix(network6, (2, 3))
    assert kinf.linear_coefficient(gains[(2, 3)]) == pytest.approx(2.0 / 3.0)
    assert check_small_gain((2, 3), gains)

    bad = check_small_gain((1, 2), _linear_gains({(1, 2): 2.0, (2, 1): 0.6}))
    assert not bad
    assert bad.product == pytest.approx(1.2)
    assert set(bad.cycle) == {1, 2}


def test_small_gain_needs_sigma_for_nonlinear():
    gains = {(1, 2): kinf.Power(0.5, 2.0), (2, 1): kinf.LinearGain(0.5)}
    with pytest.raises(kinf.KinfError, match="supply sigma"):
        check_small_gain((1, 2), gains)


def _brute_force_ok(vs, C):
    """Перебор простых циклов, начинающихся в наименьшей вершине."""
    feeds = {v: [b for b in vs if C.get((b, v), 0.0) > 0] for v in vs}

    def walk(start, v, prod, seen):
        for b in feeds[v]:
            if b == start and prod * C[(b, v)] >= 1.0:
                return True
            if b > start and b not in seen and walk(start, b, prod * C[(b, v)], seen | {b}):
                return True
        return False

    return not any(walk(v, v, 1.0, {v}) for v in vs)


def test_small_gain_oracle():
    rng = np.random.default_rng(2024)
    started = time.perf_counter()
    for _ in range(100):
        n = int(rng.integers(2, 9))
        vs = tuple(range(1, n + 1))
        C = {
            (i, j): float(rng.uniform(0.2, 1.8))
            for i, j in itertools.permutations(vs, 2)
            if rng.random() < min(0.35, 3.0 / n)
        }
        verdict = check_small_gain(vs, _linear_gains(C))
        assert bool(verdict) == _brute_force_ok(vs, C)
    assert time.perf_counter() - started < 10


def test_find_sigma():
    assert find_sigma((4,), {}) == {4: kinf.identity()}
    sig = find_sigma((1, 2), _linear_gains({(1, 2): 0.5, (2, 1): 0.5}))
    assert sig[1] == kinf.identity() and sig[2] == kinf.identity()

    C = {(1, 2): 1.5, (2, 1): 0.5}
    sig = find_sigma((1, 2), _linear_gains(C))
    s = {v: sig[v].c for v in sig}
    assert max(s.values()) == pytest.approx(1.0)
    assert 1.5 * s[2] < s[1] and 0.5 * s[1] < s[2]

    with pytest.raises(InfeasibleDesign):
        find_sigma((1, 2), _linear_gains({(1, 2): 2.0, (2, 1): 0.6}))


def test_design_network6(network6):
    started = time.perf_counter()
    d = design_parameters(network6, 0.01)
    for i in (1, 2, 3, 6):
        assert d.subsystems[i].varpi == pytest.approx(0.01, abs=1e-12)
        assert d.subsystems[i].vartheta == pytest.approx(0.01, abs=1e-12)
    assert d.subsystems[4].varpi == pytest.approx(0.01, abs=1e-12)
    assert d.subsystems[5].varpi == pytest.approx(0.01, abs=1e-12)
    assert d.subsystems[4].vartheta == pytest.approx(d.subsystems[5].varpi, abs=1e-12)
    assert d.subsystems[5].vartheta == pytest.approx(d.subsystems[4].varpi, abs=1e-12)
    assert set(d.phi) == network6.edges
    assert all(v == 0 for v in d.phi.values())
    assert check_composability(d, network6) == []

    expected = {1: 0.006, 2: 0.002, 3: 0.002, 4: 0.004, 5: 0.004, 6: 0.004}
    for i, eta in expected.items():
        sd = d.subsystems[i]
        assert max_eta(network6.sub(i).certificate, sd.varpi, sd.vartheta) == pytest.approx(eta, abs=1e-12)
        assert sd.eta_bound == pytest.approx(eta, abs=1e-12)
    assert time.perf_counter() - started < 1


def test_design_cascade():
    for n in (2, 3, 4):
        net = load_network(model_path(f"cascade{n}"), samples=50)
        d = design_parameters(net, 0.25)
        assert d.stages == [[k] for k in reversed(range(n))]
        for sd in d.subsystems.values():
            assert (sd.varpi, sd.vartheta) == (pytest.approx(0.25), pytest.approx(0.25))
        assert check_composability(d, net) == []
        assert epsilon_of(kinf.identity(), d.varpi) == pytest.approx(0.25)


def test_cascade_quantization():
    net = load_network(model_path("cascade3"), samples=50)
    d = design_parameters(net, 0.25)
    q = choose_quantization(net, d, "init")
    assert {i: qi.eta for i, qi in q.items()} == {1: 0.2, 2: 0.2, 3: 0.2}
    assert all(qi.mu == 0 and qi.theta == 0 for qi in q.values())
    # сама граница без учёта размеров секретного множества
    assert max_eta(net.sub(3).certificate, 0.25, 0.25) == pytest.approx(0.2125)
    assert d.subsystems[3].eta_bound == pytest.approx(0.2125)
    assert d.subsystems[1].eta_bound == pytest.approx(0.2)
    q_cur = choose_quantization(net, d, "current")
    assert all(qi.theta == pytest.approx(0.25) for qi in q_cur.values())


def test_isolated_subsystem_without_coupling():
    from model import network_from_dict
    doc = {
        "network": {"name": "single"},
        "subsystem": {"1": {
            "state_set": "[0, 1]", "secret_set": "[0, 0.5]",
            "dynamics": ["0.5*x1"],
            "output": {"1": ["x1"]},
            "certificate": {
                "kappa": "0.5*s", "rho_int": "0", "rho_ext": "0",
                "alpha_lower": "s", "alpha_upper": "s", "gamma_hat": "s", "lipschitz": "s",
            },
        }},
    }
    net = network_from_dict(doc, samples=50)
    d = design_parameters(net, 1.0)
    assert d.subsystems[1].varpi == pytest.approx(1.0)
    assert d.subsystems[1].vartheta > 0


def test_bounds():
    assert max_eta(_cert(0.6, 0.0), 0.01, 0.01) == pytest.approx(0.006)
    assert max_eta(_cert(0.6, 0.4), 0.01, 0.01) == pytest.approx(0.002)
    with pytest.raises(InfeasibleDesign, match="infeasible precision split"):
        max_eta(_cert(0.6, 0.6), 0.01, 0.01)
    assert min_theta(_cert(), 0.25) == pytest.approx(0.25)
    assert min_theta(_cert(alpha_lower=2.0), 0.5) == pytest.approx(0.25)
    assert epsilon_of(kinf.identity(), 0.01) == pytest.approx(0.01)
    assert epsilon_of(kinf.LinearGain(0.5), 1.0) == pytest.approx(2.0)


def test_composability_detects_zero_vartheta():
    net = load_network(model_path("cascade2"), samples=50)
    d = design_parameters(net, 0.25)
    d.subsystems[2].vartheta = 0.0
    bad = check_composability(d, net)
    assert len(bad) == 1 and "edge 1 -> 2" in bad[0]


def test_infeasible_cycle():
    net = load_network(model_path("infeasible_cycle"), samples=50)
    with pytest.raises(SmallGainViolation) as info:
        design_parameters(net, 0.1)
    assert set(info.value.cycle) == {1, 2}
    assert info.value.product == pytest.approx(1.44)
