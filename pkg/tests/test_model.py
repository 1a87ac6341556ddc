import json

import numpy as np
import pytest

from nnbarrier.geometry import Box
from nnbarrier.model import (
    Activation,
    ControlStructure,
    GaussianNoise,
    Layer,
    NeuralNetwork,
    ProblemError,
    ProblemSpec,
    evaluate,
    load_problem,
    problem_from_dict,
    problem_to_dict,
    save_problem,
    step_sample,
)
from nnbarrier.poly import ArityError


def minimal_doc():
    return {
        "schema_version": 1,
        "network": {"layers": [{"weights": [1.0], "bias": [0.0], "activation": "identity"}]},
        "noise": {"variances": [0.01]},
        "sets": {
            "state": {"lower": [-2.0], "upper": [2.0]},
            "safe": {"lower": [-1.0], "upper": [1.0]},
            "initial": {"lower": [-0.1], "upper": [0.1]},
        },
        "certify": {"horizon": 5, "threshold": 0.9, "degree": 4, "eta_step": 0.05, "partition_widths": [0.5]},
    }


def test_load_minimal_1d(tmp_path):
    path = tmp_path / "p.json"
    path.write_text(json.dumps(minimal_doc()))
    spec = load_problem(path)
    assert spec.dim == 1
    assert spec.horizon == 5
    assert spec.control is None


def test_initial_outside_safe_rejected():
    doc = minimal_doc()
    doc["sets"]["initial"] = {"lower": [-2.0], "upper": [2.0]}
    with pytest.raises(ProblemError) as e:
        problem_from_dict(doc)
    assert e.value.field == "sets.initial"


@pytest.mark.parametrize(
    "mutate, field",
    [
        (lambda d: d.pop("noise"), "noise"),
        (lambda d: d["certify"].update(horizon=0), "certify.horizon"),
        (lambda d: d["certify"].update(partition_widths=[0.0]), "certify.partition_widths"),
        (lambda d: d["network"]["layers"][0].update(activation="tanh"), "network.layers[0].activation"),
        (lambda d: d.update(schema_version=2), "schema_version"),
    ],
)
def test_field_level_errors(mutate, field):
    doc = minimal_doc()
    mutate(doc)
    with pytest.raises(ProblemError) as e:
        problem_from_dict(doc)
    assert e.value.field == field


def test_malformed_file(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ProblemError):
        load_problem(path)


def test_pendulum_style_shape():
    theta = np.pi / 15
    spec = ProblemSpec(
        network=NeuralNetwork.identity(2),
        noise=GaussianNoise([1e-4, 1e-4]),
        safe_set=Box([-theta, -1.0], [theta, 1.0]),
        initial_set=Box([-np.pi / 36, -1.0], [np.pi / 36, 1.0]),
        state_space=Box([-2 * theta, -2.0], [2 * theta, 2.0]),
        horizon=10,
        threshold=0.9,
        partition_widths=[0.01745329, 0.1],
    )
    assert spec.dim == 2
    assert np.allclose(spec.safe_set.upper, [theta, 1.0])


def test_round_trip(tmp_path, drift):
    path = tmp_path / "d.json"
    save_problem(drift, path)
    back = load_problem(path)
    assert problem_to_dict(back) == problem_to_dict(drift)


def test_evaluate_examples():
    assert np.allclose(evaluate(NeuralNetwork.identity(2), [0.3, -0.7]), [0.3, -0.7])
    relu = NeuralNetwork((Layer(np.array([[2.0]]), np.array([1.0]), Activation.RELU),))
    assert evaluate(relu, [-1.0])[0] == 0.0
    half = NeuralNetwork.relu_affine([[0.5]], [0.0])
    assert evaluate(half, [0.8])[0] == pytest.approx(0.4)
    X = np.random.default_rng(0).uniform(-3, 3, size=(1000, 1))
    assert np.allclose(half.forward(X), 0.5 * X, atol=1e-15)


def test_evaluate_dimension_mismatch():
    with pytest.raises(ArityError):
        evaluate(NeuralNetwork.identity(2), [1.0])


def test_layer_invariants():
    with pytest.raises(ProblemError):
        Layer(np.eye(2), np.zeros(3), Activation.RELU)
    with pytest.raises(ProblemError):
        NeuralNetwork((Layer(np.eye(2), np.zeros(2)), Layer(np.eye(3), np.zeros(3))))


def test_noise_and_control_invariants():
    with pytest.raises(ProblemError):
        GaussianNoise([-0.1])
    with pytest.raises(ProblemError):
        ControlStructure([[1.0]], [1.0], [0.0])
    with pytest.raises(ProblemError):
        ControlStructure([[1.0]], [-np.inf], [0.0])


def test_piecewise_linear_on_shared_pattern():
    rng = np.random.default_rng(3)
    net = NeuralNetwork.random_relu(rng, [2, 8, 2])
    checked = 0
    for _ in range(200):
        x, y = rng.uniform(-1, 1, (2, 2))
        px, py = net.activation_pattern(x), net.activation_pattern(y)
        if all(np.array_equal(a, b) for a, b in zip(px, py)):
            lam = rng.uniform()
            mid = evaluate(net, lam * x + (1 - lam) * y)
            assert np.allclose(mid, lam * evaluate(net, x) + (1 - lam) * evaluate(net, y), atol=1e-12)
            checked += 1
    assert checked > 0


def _spec(variance, control=None):
    return ProblemSpec(
        network=NeuralNetwork.identity(1),
        noise=GaussianNoise([variance]),
        safe_set=Box([-2.0], [2.0]),
        initial_set=Box([0.0], [0.0]),
        state_space=Box([-3.0], [3.0]),
        horizon=1,
        threshold=0.5,
        partition_widths=[1.0],
        control=control,
    )


def test_step_sample_examples():
    assert step_sample(_spec(0.0), [1.0])[0] == 1.0
    ctl = ControlStructure([[1.0]], [-1.0], [1.0])
    assert step_sample(_spec(0.0, ctl), [1.0], [-0.5])[0] == 0.5
    a = step_sample(_spec(0.01), [1.0], rng=np.random.default_rng(7))
    b = step_sample(_spec(0.01), [1.0], rng=np.random.default_rng(7))
    assert a[0] == b[0]
    assert a[0] != 1.0


def test_step_sample_requires_control_structure():
    with pytest.raises(ProblemError):
        step_sample(_spec(0.0), [1.0], [0.5])
