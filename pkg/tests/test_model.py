# test_model.py
import numpy as np
import pytest

import kinf
from conftest import model_path
from model import (
    ModelError,
    check_certificate,
    load_network,
    model_hash,
    network_from_dict,
    network_step,
    parse_gain,
    step,
)


def _cascade_doc(dynamics="0.1*x1 + u1 + 0.05*w1"):
    cert = {
        "kappa": "0.9*s", "rho_int": "0.05*s", "rho_ext": "s",
        "alpha_lower": "s", "alpha_upper": "s", "gamma_hat": "s", "lipschitz": "s",
    }
    return {
        "network": {"name": "pair", "precision": 0.25, "edges": [[1, 2]]},
        "subsystem": {
            "1": {
                "state_set": "(0, 0.6)", "secret_set": "(0, 0.2]", "input_set": "{0.145}",
                "dynamics": ["0.1*x1 + u1"], "output": {"2": ["x1"]}, "certificate": cert,
            },
            "2": {
                "state_set": "(0, 0.6)", "secret_set": "[0.4, 0.6)", "input_set": "{0.145}",
                "dynamics": [dynamics], "internal_set": {"1": "(0, 0.6)"},
                "output": {"2": ["x1"]}, "certificate": cert,
            },
        },
    }


def test_parse_gain_variants():
    assert parse_gain("0.9*s") == kinf.LinearGain(0.9)
    assert parse_gain("s") == kinf.identity()
    assert isinstance(parse_gain("0"), kinf.Zero)
    assert parse_gain("2*pow(s, 2)") == kinf.Power(2.0, 2.0)
    table = parse_gain("s + s*s")
    assert isinstance(table, kinf.NumericMonotone)
    assert kinf.evaluate(table, 0.5) == pytest.approx(0.75, abs=1e-4)
    with pytest.raises(ModelError):
        parse_gain("-s")
    with pytest.raises(ModelError):
        parse_gain("s + 1")


def test_load_cascade():
    net = load_network(model_path("cascade3"), samples=50)
    assert net.name == "cascade3"
    assert net.vertices == (1, 2, 3)
    assert net.edges == frozenset({(2, 1), (3, 2)})
    assert net.pre(2) == (1,)
    assert net.post(2) == (3,)
    assert net.precision == pytest.approx(0.25)
    sub = net.sub(2)
    assert sub.U.is_finite
    assert sub.predecessors == (1,)
    assert sub.quantization == {"eta": 0.2}


def test_step_examples():
    net = network_from_dict(_cascade_doc(), samples=50)
    sub2 = net.sub(2)
    assert step(sub2, [0.4], [0.145], [0.4]) == pytest.approx([0.205])
    assert step(net.sub(1), [0.2], [0.145], []) == pytest.approx([0.165])
    assert network_step(net, [0.2, 0.4], [0.145, 0.145]) == pytest.approx([0.165, 0.195])


def test_step_rejects_out_of_domain():
    net = network_from_dict(_cascade_doc(), samples=50)
    with pytest.raises(ModelError, match="outside state set"):
        step(net.sub(1), [0.7], [0.145], [])
    with pytest.raises(ModelError, match="outside input set"):
        step(net.sub(1), [0.2], [0.2], [])
    with pytest.raises(ModelError, match="internal input"):
        step(net.sub(2), [0.2], [0.145], [0.9])


def test_identity_dynamics():
    doc = _cascade_doc("x1")
    doc["subsystem"]["1"]["dynamics"] = ["x1"]
    net = network_from_dict(doc, validate=False)
    assert network_step(net, [0.3, 0.5], [0.145, 0.145]) == pytest.approx([0.3, 0.5])


def test_network6_origin_is_fixed_point():
    net = load_network(model_path("network6"), samples=50)
    assert len(net.subsystems) == 6
    x = np.zeros(6)
    u = np.zeros(3)
    assert network_step(net, x, u) == pytest.approx(np.zeros(6))


def test_certificate_sampling():
    net = load_network(model_path("network6"), samples=200)
    for s in net.subsystems:
        assert check_certificate(s, samples=200, seed=3) == []
    doc = _cascade_doc("0.9*x1 + u1 + 0.05*w1")
    with pytest.raises(ModelError, match="certificate of subsystem 2"):
        network_from_dict(doc, samples=200)


def test_structural_errors():
    doc = _cascade_doc()
    doc["network"]["edges"] = [[1, 1]]
    with pytest.raises(ModelError, match="self-loop"):
        network_from_dict(doc, validate=False)

    doc = _cascade_doc()
    del doc["subsystem"]["2"]["internal_set"]
    doc["subsystem"]["2"]["dynamics"] = ["0.1*x1 + u1"]
    with pytest.raises(ModelError, match="internal_set"):
        network_from_dict(doc, validate=False)

    doc = _cascade_doc()
    doc["subsystem"]["1"]["secret_set"] = "(0, 0.8]"
    with pytest.raises(ModelError, match="not inside the state set"):
        network_from_dict(doc, validate=False)

    doc = _cascade_doc()
    doc["subsystem"]["1"]["dynamics"] = ["0.1*x1 + q1"]
    with pytest.raises(ModelError, match="dynamics"):
        network_from_dict(doc, validate=False)

    doc = _cascade_doc()
    for s in doc["subsystem"].values():
        s["secret_set"] = "(0, 0.6)"
    with pytest.raises(ModelError, match="trivially violated"):
        network_from_dict(doc, validate=False)


def test_model_hash_is_stable():
    p = model_path("cascade2")
    assert model_hash(p) == model_hash(p)
    assert len(model_hash(p)) == 64
