import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from riemannian_ambientflow import autodiff as ad

from conftest import gradient_check

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def test_scalar_chain_rule():
    (g,) = ad.gradient(lambda x: ad.tanh(x * x).sum(), np.array([0.7]))
    assert g[0] == pytest.approx(2 * 0.7 * (1 - np.tanh(0.49) ** 2), rel=1e-12)


def test_non_scalar_loss_rejected():
    out, tape = ad.record(lambda x: x * 2.0, np.ones(3))
    with pytest.raises(ValueError, match="scalar"):
        tape.gradient(out, tape.parameters)


def test_unreached_parameter_gets_zero():
    g = ad.gradient(lambda a, b: (a * a).sum(), np.ones(2), np.ones(3))
    assert np.array_equal(g[1], np.zeros(3))


def test_shape_mismatch_names_shapes():
    with pytest.raises(ValueError, match=r"\(2,\).*\(3,\)"):
        ad.add(ad.Tensor(np.ones(2)), ad.Tensor(np.ones(3)))


def test_broadcast_gradients_are_summed():
    g = ad.gradient(lambda a, b: (a * b).sum(), np.ones((4, 3)), np.arange(3.0))
    assert np.array_equal(g[1], np.full(3, 4.0))
    assert np.array_equal(g[0], np.tile(np.arange(3.0), (4, 1)))


@pytest.mark.parametrize(
    "fn",
    [
        lambda x: ad.exp(x).sum(),
        lambda x: ad.log(x * x + 1.0).sum(),
        lambda x: ad.sqrt(x * x + 0.5).sum(),
        lambda x: ad.softplus(x).sum(),
        lambda x: ad.logsumexp(x.reshape(2, 3), axis=1).sum(),
        lambda x: (x.reshape(2, 3) @ x.reshape(3, 2)).sum(),
        lambda x: ad.concat([x[:2], x[3:] * 2.0], axis=0).sum(),
        lambda x: (x / (x * x + 2.0)).mean(),
        lambda x: (x ** 3).sum(),
    ],
)
def test_primitive_gradients_match_differences(fn):
    rng = np.random.default_rng(0)
    assert gradient_check(fn, [rng.normal(size=6)], rng) < 1e-6


def test_triangular_solve_gradient():
    rng = np.random.default_rng(1)
    T = np.triu(rng.normal(size=(4, 4))) + 3 * np.eye(4)
    b = rng.normal(size=(4, 2))
    fn = lambda t, b: (ad.solve_triangular(t, b, lower=False) ** 2).sum()  # noqa: E731
    assert gradient_check(fn, [T, b], rng) < 1e-6


def test_jvp_matches_reverse_mode():
    rng = np.random.default_rng(2)
    W = rng.normal(size=(3, 3))
    fn = lambda x: ad.tanh(x @ W.T).sum()  # noqa: E731
    x, v = rng.normal(size=3), rng.normal(size=3)
    (g,) = ad.gradient(fn, x)
    assert ad.jvp(fn, x, v).item() == pytest.approx(g @ v, rel=1e-12)


def test_logsumexp_is_stable_for_large_spreads():
    x = ad.Tensor(np.array([[0.0, -600.0, 700.0]]))
    assert ad.logsumexp(x, axis=1).item() == pytest.approx(700.0)


def test_floor_nonfinite_counts_and_blocks_gradient():
    x = ad.Tensor(np.array([0.0, 1.0]))
    with ad.Tape() as tape:
        tape.watch(x)
        y = ad.log(x)
        z, count = ad.floor_nonfinite(y, -745.0)
        loss = z.sum()
    assert count == 1
    assert z.data[0] == -745.0
    g = tape.gradient(loss, [x])[0]
    assert np.isfinite(g).all()


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (5,), elements=finite))
def test_sum_of_squares_gradient_property(x):
    (g,) = ad.gradient(lambda t: (t * t).sum(), x)
    np.testing.assert_allclose(g, 2 * x, rtol=1e-12, atol=1e-12)


def test_tensors_are_immutable():
    t = ad.Tensor(np.ones(2))
    with pytest.raises(ValueError):
        t.data[0] = 5.0
