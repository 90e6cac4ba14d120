# test_abstraction.py
import itertools
import time

import networkx as nx
import numpy as np
import pytest

from abstraction import (
    AbstractionError,
    FiniteSystem,
    build_abstraction,
    build_network_abstractions,
    compose,
    export_dot,
    finite_system,
    neighbor_values,
    to_dot,
)
from conftest import model_path
from design import Quantization, choose_quantization, design_parameters
from geometry import nearest_grid_points, quantize
from model import load_network, network_from_dict, network_step

LETTER = {0.2: "a", 0.4: "A"}

# переходы композиций каскада из 2 и 3 звеньев (выход сети — последнее звено)
FIG_TWO = {
    "aa": {"aa"}, "aA": {"aa"}, "Aa": {"aa"}, "AA": {"aa", "aA"},
}
FIG_THREE = {
    "aaa": {"aaa"},
    "aaA": {"aaa"},
    "aAa": {"aaa"},
    "aAA": {"aaa", "aaA"},
    "Aaa": {"aaa"},
    "AaA": {"aaa"},
    "AAa": {"aaa", "aAa"},
    "AAA": {"aaa", "aaA", "aAa", "aAA"},
}


def _cascade(n: int):
    net = load_network(model_path(f"cascade{n}"), samples=50)
    design = design_parameters(net, 0.25)
    quant = choose_quantization(net, design, "init")
    return net, design, quant


def _word(system: FiniteSystem, s: int) -> str:
    return "".join(LETTER[round(float(v), 6)] for v in system.points[s])


def _labelled_graph(system: FiniteSystem) -> nx.DiGraph:
    g = nx.DiGraph()
    for s in range(system.n_states):
        g.add_node(
            s,
            secret=s in system.secret,
            initial=s in system.initial,
            output=tuple(round(float(v), 9) for v in system.outputs[s]),
        )
    for s in range(system.n_states):
        g.add_edges_from((s, t) for t in system.post(s))
    return g


def _expected_graph(table, secret):
    g = nx.DiGraph()
    for w in table:
        g.add_node(w, secret=w in secret, initial=True, output=({"a": 0.2, "A": 0.4}[w[-1]],))
    for w, succ in table.items():
        g.add_edges_from((w, t) for t in succ)
    return g


def _node_match(a, b):
    return a["secret"] == b["secret"] and a["initial"] == b["initial"] and a["output"] == pytest.approx(b["output"])


def test_subsystem_grids_have_two_states():
    started = time.perf_counter()
    net, design, quant = _cascade(3)
    abstractions = build_network_abstractions(net, quant)
    for a in abstractions:
        assert a.points.reshape(-1).tolist() == pytest.approx([0.2, 0.4])
        assert a.is_nonblocking()
    a1, a2, a3 = abstractions
    assert a1.successors(0, 0) == (0,)
    assert a1.successors(1, 0) == (0,)
    assert a1.secret == {0}
    assert a2.secret == {1}
    assert a3.secret == {0, 1}
    # из 0.4 при ŵ = 0.4: f = 0.205, оба узла в пределах η
    w_idx = int(np.flatnonzero(np.isclose(a2.internal_values[1][:, 0], 0.4))[0])
    assert a2.successors(1, 0, w_idx) == (0, 1)
    assert time.perf_counter() - started < 1


def test_theta_inflation_of_secret():
    net, _, _ = _cascade(2)
    a = build_abstraction(net.sub(1), Quantization(0.2, 0.25, 0.0))
    assert a.secret == {0, 1}


@pytest.mark.parametrize("n,table,secret", [
    (2, FIG_TWO, {"aA"}),
    (3, FIG_THREE, {"aAa", "aAA"}),
])
def test_cascade_composition_matches_tables(n, table, secret):
    started = time.perf_counter()
    net, design, quant = _cascade(n)
    composed = compose(build_network_abstractions(net, quant), design.phi, net)
    assert composed.n_states == 2 ** n
    assert composed.internal_values == {}
    words = {s: _word(composed, s) for s in range(composed.n_states)}
    assert {words[s] for s in composed.secret} == secret
    assert {words[s] for s in composed.initial} == set(table)
    assert {words[s]: {words[t] for t in composed.post(s)} for s in words} == table
    assert nx.is_isomorphic(_labelled_graph(composed), _expected_graph(table, secret), node_match=_node_match)
    assert time.perf_counter() - started < 1


@pytest.mark.parametrize("n", [2, 3])
def test_composition_equals_precomposed_network(n):
    net, design, quant = _cascade(n)
    composed = compose(build_network_abstractions(net, quant), design.phi, net)
    grids = [quantize(s.X, quant[s.index].eta) for s in net.subsystems]
    u = np.concatenate([s.U.points()[0] for s in net.subsystems])
    for s in range(composed.n_states):
        x_next = network_step(net, composed.points[s], u)
        local = [nearest_grid_points([v], g, quant[i + 1].eta) for i, (v, g) in enumerate(zip(x_next, grids))]
        expected = {int(np.ravel_multi_index(t, [len(g) for g in grids])) for t in itertools.product(*local)}
        assert set(composed.post(s)) == expected


def test_transitions_are_sound_and_complete():
    net, design, quant = _cascade(3)
    values = neighbor_values(net, quant)
    for sub in net.subsystems:
        a = build_abstraction(sub, quant[sub.index], values[sub.index])
        eta = quant[sub.index].eta
        for (x, u, w), targets in a.transitions.items():
            f = sub.evaluate(a.points[x], a.inputs[u], a.internal_vector(w))
            d = np.max(np.abs(a.points - f), axis=1)
            assert set(targets) == set(np.flatnonzero(d <= eta + 1e-12).tolist())


def test_secret_cover():
    net, _, quant = _cascade(2)
    rng = np.random.default_rng(5)
    for sub in net.subsystems:
        a = build_abstraction(sub, quant[sub.index], neighbor_values(net, quant)[sub.index])
        secret_pts = a.points[sorted(a.secret)]
        for x in sub.XS.sample(rng, 200):
            assert np.min(np.max(np.abs(secret_pts - x), axis=1)) <= quant[sub.index].eta + 1e-12


def _single_doc(dynamics="0.5*x1", state_set="[0, 1]", secret_set="[0, 0.5]"):
    return {
        "network": {"name": "single"},
        "subsystem": {"1": {
            "state_set": state_set, "secret_set": secret_set,
            "dynamics": [dynamics],
            "output": {"1": ["x1"]},
            "certificate": {
                "kappa": "0.5*s", "rho_int": "0", "rho_ext": "0",
                "alpha_lower": "s", "alpha_upper": "s", "gamma_hat": "s", "lipschitz": "s",
            },
        }},
    }


def test_blocking_cell_is_an_error():
    net = network_from_dict(_single_doc("x1 + 0.6"), validate=False)
    with pytest.raises(AbstractionError, match="blocking cell"):
        build_abstraction(net.sub(1), Quantization(0.25))


def test_secret_set_between_grid_points_is_rejected():
    net = network_from_dict(_single_doc(state_set="(0, 0.6)", secret_set="(0, 0.2)"), validate=False)
    with pytest.raises(AbstractionError, match="falls in the secret set"):
        build_abstraction(net.sub(1), Quantization(0.2))
    finer = build_abstraction(net.sub(1), Quantization(0.1))
    assert [round(float(finer.points[s][0]), 9) for s in sorted(finer.secret)] == [0.1]


def test_quantization_bounds_are_checked():
    net, _, _ = _cascade(2)
    with pytest.raises(AbstractionError, match="exceeds the span"):
        build_abstraction(net.sub(1), Quantization(0.3))
    with pytest.raises(AbstractionError, match="needs the output values"):
        build_abstraction(net.sub(2), Quantization(0.2))
    # W = (0, 0.6) без узлов решётки шага 0.6
    with pytest.raises(AbstractionError, match="internal set of 1: grid too coarse"):
        build_abstraction(net.sub(2), Quantization(0.2, phi={1: 0.6}))


def test_single_subsystem_composition():
    net = network_from_dict(_single_doc(), validate=False)
    a = build_abstraction(net.sub(1), Quantization(0.25))
    c = compose([a], {}, net)
    assert c.n_states == a.n_states == 5
    assert c.labels == a.labels
    assert c.secret == a.secret
    assert all(set(c.post(s)) == set(a.post(s)) for s in range(a.n_states))


def test_ill_posed_interconnection():
    net, design, quant = _cascade(2)
    a1 = build_abstraction(net.sub(1), quant[1])
    a2 = build_abstraction(net.sub(2), quant[2], {1: np.array([[0.3]])})
    with pytest.raises(AbstractionError, match="ill-posed interconnection"):
        compose([a1, a2], design.phi, net)


def test_state_limit():
    net, design, quant = _cascade(2)
    with pytest.raises(AbstractionError, match="above the limit"):
        compose(build_network_abstractions(net, quant), design.phi, net, max_states=3)


def test_restrict_reachable():
    t = finite_system([[0], [1], [2]], {(0, 0): [1], (1, 0): [0], (2, 0): [2]}, initial=[0], secret=[2])
    r = t.restrict_reachable()
    assert r.n_states == 2
    assert r.secret == frozenset()
    assert r.post(0) == (1,)


def test_serialization_keeps_structure(tmp_path):
    net, design, quant = _cascade(2)
    composed = compose(build_network_abstractions(net, quant), design.phi, net)
    path = tmp_path / "composed.json"
    composed.save(path)
    back = FiniteSystem.load(path)
    assert back.transitions == composed.transitions
    assert back.secret == composed.secret and back.initial == composed.initial
    assert np.allclose(back.outputs, composed.outputs)
    assert back.labels == composed.labels


def _dot_counts(text: str):
    nodes = [line for line in text.splitlines() if line.strip().startswith("s") and "[label=" in line]
    filled = [line for line in nodes if "style=filled" in line]
    return len(nodes), len(filled)


@pytest.mark.parametrize("n,filled", [(2, 1), (3, 2)])
def test_dot_export(tmp_path, n, filled):
    net, design, quant = _cascade(n)
    composed = compose(build_network_abstractions(net, quant), design.phi, net)
    path = export_dot(composed, tmp_path / "out" / f"cascade{n}.dot")
    text = path.read_text(encoding="utf-8")
    assert text.startswith(f'digraph "cascade{n}" {{')
    assert _dot_counts(text) == (2 ** n, filled)
    assert text.count("[shape=point style=invis]") == 2 ** n
    assert "Mrecord" in text


def test_dot_without_secrets():
    t = finite_system([[0], [1]], {(0, 0): [1], (1, 0): [0]}, initial=[0], secret=[])
    text = "".join(to_dot(t))
    assert _dot_counts(text) == (2, 0)
    assert "init0 -> s0;" in text
