import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riemannian_ambientflow import autodiff as ad
from riemannian_ambientflow.flow import CheckpointError, FlowModel, tanh_power_derivative_sup


def fd_jacobian(f, x, h=1e-6):
    d = len(x)
    J = np.empty((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        J[:, j] = (f(x + e) - f(x - e)) / (2 * h)
    return J


@pytest.mark.parametrize("dim", [1, 2, 3, 5, 6])
def test_round_trip(dim):
    flow = FlowModel.random(dim, 3, seed=dim)
    x = np.random.default_rng(0).normal(size=(50, dim)) * 2
    assert np.abs(flow.inverse(flow.forward(x)) - x).max() < 1e-10
    assert np.abs(flow.forward(flow.inverse(x)) - x).max() < 1e-10


def test_hand_evaluated_coupling():
    # alpha_1 = 1 only: second coordinate gains tanh of the first
    flow = FlowModel.identity(2, 1, degree=1)
    flow.layers[0].alpha = np.array([[1.0]])
    np.testing.assert_allclose(flow.forward(np.array([0.5, 0.0])), [0.5, np.tanh(0.5)], atol=1e-15)


def test_identity_flow_is_identity():
    flow = FlowModel.identity(4, 2)
    x = np.arange(4.0)
    assert np.array_equal(flow.forward(x), x)
    assert flow.log_abs_det() == 0.0


def test_log_density_of_identity_is_standard_normal():
    flow = FlowModel.identity(2, 1)
    assert flow.log_density(np.zeros(2)) == pytest.approx(-math.log(2 * math.pi))


@pytest.mark.parametrize("seed", range(4))
def test_log_det_is_constant_and_matches_jacobian(seed):
    flow = FlowModel.random(4, 3, seed=seed)
    rng = np.random.default_rng(seed)
    for x in rng.normal(size=(5, 4)) * 2:
        J = fd_jacobian(flow.forward, x)
        assert np.linalg.slogdet(J)[1] == pytest.approx(flow.log_abs_det(), rel=1e-6)


def test_forward_mode_jacobian_matches_differences():
    flow = FlowModel.random(5, 2, seed=3)
    x = np.linspace(-1, 1, 5)
    np.testing.assert_allclose(flow.jacobian_at(x), fd_jacobian(flow.forward, x), atol=1e-7)
    y = flow.forward(x)
    np.testing.assert_allclose(flow.inverse_jacobian_at(y) @ flow.jacobian_at(x), np.eye(5), atol=1e-12)


def test_linear_flow_reproduces_matrix():
    B = np.array([[2.0, 1.0], [0.5, 3.0]])
    flow = FlowModel.linear(B)
    x = np.array([0.3, -0.7])
    np.testing.assert_allclose(flow.forward(x), B @ x, atol=1e-14)
    assert flow.log_abs_det() == pytest.approx(math.log(abs(np.linalg.det(B))))


def test_parameter_gradient_of_log_density():
    flow = FlowModel.random(3, 2, seed=5)
    x = np.random.default_rng(1).normal(size=(7, 3))
    params = [np.array(p) for p in flow.parameters()]

    def nll(*ps):
        return -ad.as_tensor(flow.with_parameters(ps).log_density(x)).mean()

    grads = ad.gradient(nll, *params)
    rng = np.random.default_rng(2)
    for i in range(len(params)):
        v = rng.normal(size=params[i].shape)
        plus = list(params)
        minus = list(params)
        plus[i] = params[i] + 1e-6 * v
        minus[i] = params[i] - 1e-6 * v
        num = (nll(*plus).item() - nll(*minus).item()) / 2e-6
        ana = float(np.sum(grads[i] * v))
        assert ana == pytest.approx(num, rel=1e-6, abs=1e-9)


def test_checkpoint_round_trip(tmp_path):
    flow = FlowModel.random(3, 2, seed=9)
    flow.save(tmp_path / "f.json")
    back = FlowModel.load(tmp_path / "f.json")
    x = np.ones(3)
    assert np.array_equal(back.forward(x), flow.forward(x))
    doc = json.loads((tmp_path / "f.json").read_text())
    assert set(doc) == {"version", "dim", "L", "degree", "layers"}


def test_checkpoint_version_is_reported():
    doc = FlowModel.identity(2).to_dict()
    doc["version"] = 7
    with pytest.raises(CheckpointError, match="7 found, 1 expected"):
        FlowModel.from_dict(doc)


def test_sampling_is_seeded():
    flow = FlowModel.random(3, 2, seed=1)
    assert np.array_equal(flow.sample(4, 11), flow.sample(4, 11))
    assert flow.sample(0, 1).shape == (0, 3)


def test_tanh_bound_closed_form():
    assert tanh_power_derivative_sup(1) == 1.0
    assert tanh_power_derivative_sup(2) == pytest.approx(4 / (3 * math.sqrt(3)), abs=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 8))
def test_tanh_bound_is_a_supremum(r):
    t = np.linspace(0, 1, 200001)
    assert tanh_power_derivative_sup(r) == pytest.approx(np.max(r * t ** (r - 1) * (1 - t * t)), abs=1e-8)
    assert tanh_power_derivative_sup(r) <= 2.0


def test_bad_shapes_rejected():
    flow = FlowModel.identity(3)
    with pytest.raises(ValueError):
        flow.forward(np.ones(4))
