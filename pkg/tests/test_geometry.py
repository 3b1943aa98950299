import numpy as np
import pytest

from riemannian_ambientflow.flow import FlowModel
from riemannian_ambientflow.geometry import PullbackGeometry


@pytest.fixture
def geo():
    return PullbackGeometry(FlowModel.random(3, 3, seed=4))


def test_identity_distance_is_euclidean():
    g = PullbackGeometry(FlowModel.identity(2))
    assert g.distance(np.zeros(2), np.array([3.0, 4.0])) == pytest.approx(5.0)


def test_identity_midpoint_and_maps():
    g = PullbackGeometry(FlowModel.identity(2))
    x, y = np.array([1.0, 2.0]), np.array([3.0, -2.0])
    np.testing.assert_allclose(g.geodesic(x, y, 0.5), (x + y) / 2)
    np.testing.assert_allclose(g.exp_map(x, y), x + y)
    np.testing.assert_allclose(g.log_map(x, y), y - x)
    np.testing.assert_allclose(g.barycenter(np.vstack([x, y])), (x + y) / 2)


def test_geodesic_endpoints(geo):
    x, y = np.array([0.3, -1.0, 2.0]), np.array([-1.0, 0.5, 0.1])
    np.testing.assert_allclose(geo.geodesic(x, y, 0.0), x, atol=1e-12)
    np.testing.assert_allclose(geo.geodesic(x, y, 1.0), y, atol=1e-12)
    with pytest.raises(ValueError):
        geo.geodesic(x, y, 1.5)


def test_zero_tangent_and_self_log(geo):
    x = np.array([0.2, 0.1, -0.4])
    np.testing.assert_allclose(geo.exp_map(x, np.zeros(3)), x, atol=1e-13)
    np.testing.assert_allclose(geo.log_map(x, x), np.zeros(3), atol=1e-13)
    assert geo.distance(x, x) == 0.0


def test_exp_accepts_batches_of_tangents(geo):
    x = np.zeros(3)
    vs = np.random.default_rng(0).normal(size=(4, 3))
    out = geo.exp_map(x, vs)
    assert out.shape == (4, 3)
    np.testing.assert_allclose(out[2], geo.exp_map(x, vs[2]))


def test_barycenter_closed_form(geo):
    pts = np.random.default_rng(1).normal(size=(20, 3))
    expected = geo.flow.inverse(geo.flow.forward(pts).mean(axis=0))
    np.testing.assert_allclose(geo.barycenter(pts), expected)
    np.testing.assert_allclose(geo.barycenter(pts[:1]), pts[0])
    with pytest.raises(ValueError):
        geo.barycenter(np.empty((0, 3)))


def test_barycenter_matches_gradient_descent(geo):
    pts = np.random.default_rng(2).normal(size=(30, 3))
    x = pts.mean(axis=0)
    # minimize sum of squared distances: gradient is 2 J^T sum(phi(x) - phi(x_i))
    for _ in range(3000):
        J = geo.flow.jacobian_at(x)
        grad = 2 * J.T @ (geo.flow.forward(x) - geo.flow.forward(pts)).sum(axis=0) / len(pts)
        x = x - 0.05 * grad
    np.testing.assert_allclose(x, geo.barycenter(pts), atol=1e-4)
