"""Acceptance criteria, one test per criterion.

Each test records a pass/fail line that is printed in the terminal summary.
Run the long MNIST criterion with ``pytest tests/test_acceptance.py --tier full``
and ``RAF_MNIST_DIR`` pointing at the IDX files.
"""

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from riemannian_ambientflow import autodiff as ad
from riemannian_ambientflow import presets
from riemannian_ambientflow.corruption import CorruptionModel, MatrixOperator
from riemannian_ambientflow.flow import FlowModel, tanh_power_derivative_sup
from riemannian_ambientflow.geometry import PullbackGeometry
from riemannian_ambientflow.inversion import (
    certificate,
    empirical_bilipschitz,
    empirical_jacobian_lipschitz,
    invert,
    smoothness_constants,
)
from riemannian_ambientflow.metrics import recoverability_bound, w1
from riemannian_ambientflow.posterior import PosteriorModel
from riemannian_ambientflow.rae import build_rae_analytic, build_rae_from_samples, select_dim
from riemannian_ambientflow.training import TrainConfig, loss_terms, lowrank_penalty, reference_nll, vlb_loss

from conftest import central_difference


def _check(record, number, checks: dict, extra=""):
    passed = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    detail = extra + ("" if passed else f" failed: {', '.join(failed)}")
    record(number, passed, detail.strip())
    assert passed, detail


# -- 1 ----------------------------------------------------------------------------

def _loss_gradient_error(fn, params, rng, h=1e-6):
    grads = ad.gradient(fn, *[ad.Tensor(p) for p in params])
    worst = 0.0
    for i, p in enumerate(params):
        v = rng.standard_normal(p.shape)
        num = central_difference(fn, params, i, v, h)
        ana = float(np.sum(grads[i] * v))
        worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-8))
    return worst


def test_criterion_01_gradients(record_criterion):
    t0 = time.time()
    rng = np.random.default_rng(0)
    configs = [(d, L, M) for d in (1, 2, 3, 4) for L in (1, 2) for M in (1, 2, 3)]
    errors = {}
    saturated = {}
    for i, (d, L, M) in enumerate(configs):
        m = max(1, d - (i % 2))
        prior = FlowModel.random(d, L, seed=i, alpha_scale=0.5)
        post = PosteriorModel.create(m, d, 4, 3, seed=i)
        post.params["head_w"] = rng.normal(size=(2 * d, 4)) * 0.3
        corr = CorruptionModel(MatrixOperator(rng.normal(size=(m, d))), 0.5)
        y = rng.normal(size=(3, m))
        clean = rng.normal(size=(4, d))
        cfg = TrainConfig(vlb_samples=M, lam=0.3, mu=0.7)
        n = len(prior.parameters())
        params = [np.array(ad.value(p)) for p in prior.parameters() + post.parameters()]
        # flag configurations whose coupling inputs reach the flat part of tanh
        z = prior.forward(post.sample(y, M, seed=i).reshape(-1, d))
        saturated[(d, L, M)] = bool(np.abs(z).max() > 3)

        def total(*ps, prior=prior, post=post, corr=corr, y=y, clean=clean, cfg=cfg, n=n, seed=i):
            return loss_terms(prior.with_parameters(ps[:n]), post.with_parameters(ps[n:]), corr, y, clean, cfg, seed)[0]

        def vlb_only(*ps, prior=prior, post=post, corr=corr, y=y, M=M, n=n, seed=i):
            return vlb_loss(prior.with_parameters(ps[:n]), post.with_parameters(ps[n:]), corr, y, M, seed)

        def low_only(*ps, prior=prior):
            return lowrank_penalty(prior.with_parameters(ps))

        def ref_only(*ps, prior=prior, clean=clean):
            return reference_nll(prior.with_parameters(ps), clean)

        errors[(d, L, M)] = max(
            _loss_gradient_error(total, params, rng),
            _loss_gradient_error(vlb_only, params, rng),
            _loss_gradient_error(low_only, params[:n], rng),
            _loss_gradient_error(ref_only, params[:n], rng),
        )
    ok = {k: e <= (1e-3 if saturated[k] else 1e-4) for k, e in errors.items()}
    worst = max(errors.values())
    _check(
        record_criterion,
        1,
        {"configs>=20": len(configs) >= 20, "all within tolerance": all(ok.values()), "runtime<60s": time.time() - t0 < 60},
        f"{len(configs)} configs, worst rel err {worst:.2e}",
    )


# -- 2 ----------------------------------------------------------------------------

def test_criterion_02_flow(record_criterion):
    rng = np.random.default_rng(1)
    worst_trip, worst_logdet = 0.0, 0.0
    for seed, d in enumerate((2, 3, 5, 6)):
        flow = FlowModel.random(d, 4, seed=seed)
        x = rng.normal(size=(200, d)) * 2
        worst_trip = max(worst_trip, np.abs(flow.inverse(flow.forward(x)) - x).max())
        for pt in rng.normal(size=(10, d)):
            h = 1e-5
            J = np.column_stack([(flow.forward(pt + h * e) - flow.forward(pt - h * e)) / (2 * h) for e in np.eye(d)])
            rel = abs(np.linalg.slogdet(J)[1] - flow.log_abs_det()) / max(abs(flow.log_abs_det()), 1e-12)
            worst_logdet = max(worst_logdet, rel)
    _check(
        record_criterion,
        2,
        {"round trip<=1e-8": worst_trip <= 1e-8, "log-det rel<=1e-4": worst_logdet <= 1e-4},
        f"round trip {worst_trip:.1e}, log-det rel {worst_logdet:.1e}",
    )


# -- 3 ----------------------------------------------------------------------------

def test_criterion_03_geometry(record_criterion):
    flow = FlowModel.random(3, 3, seed=11)
    g = PullbackGeometry(flow)
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=3), rng.normal(size=3)
    t = np.linspace(0, 1, 21)
    path = g.geodesic(x, y, t)
    line = (1 - t)[:, None] * flow.forward(x) + t[:, None] * flow.forward(y)
    linearity = np.abs(flow.forward(path) - line).max()

    inv_err = 0.0
    for _ in range(50):
        a, b = rng.normal(size=3), rng.normal(size=3)
        inv_err = max(inv_err, np.abs(g.exp_map(a, g.log_map(a, b)) - b).max())
        v = rng.normal(size=3)
        inv_err = max(inv_err, np.abs(g.log_map(a, g.exp_map(a, v)) - v).max())

    pts = rng.normal(size=(25, 3))
    bary = g.barycenter(pts)
    best = g.sum_sq_distance(bary, pts)
    beaten = sum(g.sum_sq_distance(bary + rng.normal(size=3) * s, pts) < best
                 for s in np.geomspace(1e-4, 1, 200))

    a, b, c = (rng.normal(size=(1000, 3)) * 2 for _ in range(3))
    dab, dba = g.distance(a, b), g.distance(b, a)
    dac, dcb = g.distance(a, c), g.distance(c, b)
    axioms = (
        np.all(dab >= 0)
        and np.allclose(dab, dba, atol=1e-12)
        and np.all(dab <= dac + dcb + 1e-12)
        and np.all(g.distance(a, a) == 0)
    )
    _check(
        record_criterion,
        3,
        {"linearity<=1e-7": linearity <= 1e-7, "exp/log<=1e-6": inv_err <= 1e-6,
         "barycenter unbeaten": beaten == 0, "metric axioms": bool(axioms)},
        f"linearity {linearity:.1e}, exp/log {inv_err:.1e}, perturbations beating barycenter {beaten}/200",
    )


# -- 4 ----------------------------------------------------------------------------

def test_criterion_04_rae(record_criterion):
    hand = select_dim([4, 3, 2, 1], 0.3) == 2 and select_dim([4, 3, 2, 1], 1.0) == 1
    try:
        select_dim([4, 3, 2, 1], 0.1)
        rejects = False
    except ValueError:
        rejects = True

    flow = FlowModel.random(5, 3, seed=3)
    rae = build_rae_analytic(PullbackGeometry(flow), latent_dim=2)
    x = flow.sample(500, 0)
    once = rae.project(x)
    idem = np.abs(rae.project(once) - once).max()

    rng = np.random.default_rng(3)
    plane = np.linalg.qr(rng.normal(size=(5, 2)))[0]
    planar = rng.normal(size=(40, 2)) @ plane.T + rng.normal(size=5)
    pca = build_rae_from_samples(PullbackGeometry(FlowModel.identity(5)), planar, latent_dim=2)
    pca_err = np.abs(pca.project(planar) - planar).max()

    tail_ok = True
    margins = []
    for seed in range(5):
        B = np.random.default_rng(seed).normal(size=(4, 4)) + 3 * np.eye(4)
        lin = FlowModel.linear(B)
        eps = 0.25
        r = build_rae_analytic(PullbackGeometry(lin), epsilon=eps)
        s = lin.sample(20000, seed)
        sq = np.sum((r.project(s) - s) ** 2, axis=1)
        bound = eps * np.linalg.norm(np.linalg.inv(B), "fro") ** 2
        se = sq.std(ddof=1) / math.sqrt(len(sq))
        tail_ok &= sq.mean() <= bound + 3 * se
        margins.append(bound - sq.mean())
    _check(
        record_criterion,
        4,
        {"select_dim table": hand, "epsilon<=eps0 rejected": rejects, "idempotence<=1e-7": idem <= 1e-7,
         "PCA exact<=1e-8": pca_err <= 1e-8, "tail energy bound": bool(tail_ok)},
        f"idempotence {idem:.1e}, PCA {pca_err:.1e}, min tail-bound margin {min(margins):.3f}",
    )


# -- 5 ----------------------------------------------------------------------------

def conjugate_model(s=1.3, a=0.8, sigma=0.5):
    """Prior N(0, s^2), y = a x + sigma n, posterior set to the exact one."""
    prior = FlowModel.linear(np.array([[1.0 / s]]))
    v_post = 1.0 / (1.0 / s**2 + a**2 / sigma**2)
    gain = v_post * a / sigma**2
    post = PosteriorModel.create(1, 1, 1, 1, seed=0)
    post.params.update(
        embed_w=np.array([[1.0]]), embed_b=np.zeros(1), hidden_w=np.zeros((1, 1)), hidden_b=np.zeros(1),
        out_w=np.zeros((1, 1)), out_b=np.zeros(1), head_w=np.array([[gain], [0.0]]),
        head_b=np.array([0.0, math.log(v_post)]),
    )
    corr = CorruptionModel(MatrixOperator(np.array([[a]])), sigma)
    return prior, post, corr, a**2 * s**2 + sigma**2


def test_criterion_05_vlb(record_criterion):
    prior, post, corr, var_y = conjugate_model()
    rng = np.random.default_rng(5)
    y = rng.normal(0, math.sqrt(var_y), size=(100000, 1))
    # per-measurement bounds (batch of one) are exact for the exact posterior
    per = np.array([vlb_loss(prior, post, corr, y[i : i + 1], 1, seed=i) for i in range(200)])
    closed = -0.5 * math.log(2 * math.pi * var_y) - 0.5 * y[:200, 0] ** 2 / var_y
    tight = np.abs(per - closed).max()
    batch = vlb_loss(prior, post, corr, y, 1, seed=0)
    closed_all = -0.5 * math.log(2 * math.pi * var_y) - 0.5 * y[:, 0] ** 2 / var_y
    se = closed_all.std(ddof=1) / math.sqrt(len(y))
    expected = -0.5 * math.log(2 * math.pi * var_y) - 0.5
    mc_ok = abs(batch - expected) <= 3 * se

    # monotonicity on a mismatched posterior
    post.params["head_b"] = np.array([0.3, 0.5])
    y_fixed = rng.normal(0, math.sqrt(var_y), size=(20, 1))
    vals = {M: np.array([vlb_loss(prior, post, corr, y_fixed, M, seed=s) for s in range(200)]) for M in (1, 5, 10)}
    monotone = True
    for lo, hi in ((1, 5), (5, 10)):
        se_diff = math.sqrt(vals[lo].var(ddof=1) / 200 + vals[hi].var(ddof=1) / 200)
        monotone &= vals[hi].mean() >= vals[lo].mean() - 2 * se_diff
    means = ", ".join(f"M={M}: {v.mean():.4f}" for M, v in vals.items())
    _check(
        record_criterion,
        5,
        {"exact posterior tight": tight < 1e-10, "MC within 3 se": bool(mc_ok), "monotone in M": bool(monotone)},
        f"tightness {tight:.1e}, batch {batch:.5f} vs {expected:.5f} (se {se:.1e}); {means}",
    )


# -- 6 and 7 ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def sinusoid_run():
    from riemannian_ambientflow.experiments import run_sinusoid

    return run_sinusoid(presets.preset("sinusoid"))


def test_criterion_06_sinusoid(record_criterion, sinusoid_run):
    r = sinusoid_run
    _check(
        record_criterion,
        6,
        {"loss drop>=50%": r["relative_drop"] >= 0.5, "curve distance<=0.2": r["curve_distance"] <= 0.2,
         "ablation worse": r["ablation_curve_distance"] > r["curve_distance"], "runtime<15min": r["seconds"] < 900},
        f"loss {r['loss_step10']:.3f} -> {r['loss_final']:.3f} ({100 * r['relative_drop']:.0f}% drop), "
        f"curve distance {r['curve_distance']:.4f} vs ablation {r['ablation_curve_distance']:.4f}, "
        f"{r['seconds']:.0f}s",
    )


def test_criterion_07_recoverability(record_criterion, sinusoid_run):
    rep = sinusoid_run["recoverability"]
    keys = ("omega_hat", "delta_hat", "operator_norm", "bound", "sliced_w1")
    arithmetic = recoverability_bound(0.1, 1.0, 0.0) == 0.4
    complete = all(k in rep and rep[k] is not None for k in keys)
    # the bound comparison is advisory: reported, never a failure
    detail = (f"omega {rep['omega_hat']:.4f}, delta {rep['delta_hat']:.2e}, ||A|| {rep['operator_norm']:.3f}, "
              f"bound {rep['bound']:.4f}, sliced W1 {rep['sliced_w1']:.4f}, advisory {'pass' if rep['passed'] else 'fail'}")
    _check(record_criterion, 7, {"bound arithmetic": arithmetic, "report complete": complete}, detail)


# -- 8 ----------------------------------------------------------------------------

def test_criterion_08_smoothness(record_criterion):
    violations = 0
    jac_violations = 0
    for seed in range(5):
        rae = build_rae_analytic(PullbackGeometry(FlowModel.random(4, 3, seed=100 + seed)), latent_dim=2)
        sm = smoothness_constants(rae)
        lo, hi = empirical_bilipschitz(rae, 10000, seed=seed)
        violations += int(lo < sm.m1_lower) + int(hi > sm.m2_upper)
        jac_violations += int(empirical_jacobian_lipschitz(rae, 1000, seed=seed) > sm.M_upper)
    ident = smoothness_constants(build_rae_analytic(PullbackGeometry(FlowModel.identity(4, 3)), latent_dim=2))
    tanh_ok = tanh_power_derivative_sup(1) == 1.0 and abs(
        tanh_power_derivative_sup(2) - 4 / (3 * math.sqrt(3))
    ) <= 1e-12
    _check(
        record_criterion,
        8,
        {"sandwich": violations == 0, "jacobian bound": jac_violations == 0, "identity M=0": ident.M_upper == 0.0,
         "tanh bounds": tanh_ok},
        f"{violations} sandwich violations, {jac_violations} Jacobian-bound violations over 5 models",
    )


# -- 9 ----------------------------------------------------------------------------

def test_criterion_09_convergence(record_criterion):
    flow = FlowModel.random(6, 2, seed=0, alpha_scale=0.01, offdiag_scale=0.01, logmag_scale=0.01)
    rae = build_rae_analytic(PullbackGeometry(flow), latent_dim=2)
    corr = CorruptionModel(MatrixOperator(np.eye(6)), 0.05)
    probe = certificate(rae, corr, alpha=1e-6, delta_hat=0.0, certified_delta=True)
    cert = certificate(rae, corr, alpha=probe.alpha_max / 2, delta_hat=0.0, certified_delta=True)
    violations = 0
    late = 0
    for run in range(20):
        rng = np.random.default_rng(run)
        p_star = rng.normal(size=2)
        noiseless = run % 2 == 0
        noise = np.zeros(6) if noiseless else corr.noise_sigma * rng.normal(size=6)
        y = rae.decode(p_star) + noise
        p0 = np.zeros(2)
        budget = cert.predicted_iterations(float(np.sum((p0 - p_star) ** 2)), 1e-6) + 10
        res = invert(rae, corr, y, cert.alpha, budget, p_init=p0, p_true=p_star, tol=1e-6 if noiseless else None)
        err2 = np.array(res.history["latent_error"]) ** 2
        slack = cert.beta * float(noise @ noise)
        violations += int(np.sum(err2[1:] > cert.rho * err2[:-1] + slack + 1e-15))
        if noiseless and res.history["latent_error"][-1] > 1e-6:
            late += 1
    _check(
        record_criterion,
        9,
        {"certificate satisfied": cert.satisfied, "no inequality violations": violations == 0, "on time": late == 0},
        f"rho {cert.rho:.4f}, beta {cert.beta:.3f}, alpha {cert.alpha:.4f}, {violations} violations, "
        f"{late} late noiseless runs",
    )


# -- 10 ---------------------------------------------------------------------------

def test_criterion_10_mnist(record_criterion, tier, request):
    from riemannian_ambientflow.experiments import MNIST_ENV, MNIST_TRAIN_IMAGES, run_mnist

    wanted = request.config.getoption("--preset")
    root = os.environ.get(MNIST_ENV)
    if tier != "full" or wanted not in (None, "mnist14"):
        record_criterion(10, None, "long tier not requested (use --tier full)")
        pytest.skip("MNIST reproduction runs only with --tier full")
    if not root or not (Path(root) / MNIST_TRAIN_IMAGES).exists():
        record_criterion(10, None, f"MNIST IDX files not found (set {MNIST_ENV})")
        pytest.skip("MNIST data not available")
    res = run_mnist(presets.preset("mnist14"))
    _check(
        record_criterion,
        10,
        {"RAE MSE<=1.5e-2": res["rae_mse"] <= 1.5e-2, "RAE beats TV": res["rae_mse"] < res["tv_mse"]},
        f"RAE MSE {res['rae_mse']:.3e}, TV MSE {res['tv_mse']:.3e}",
    )


# -- 11 ---------------------------------------------------------------------------

def test_criterion_11_w1(record_criterion):
    below = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        p = rng.normal(size=(200, 2))
        q = rng.normal(size=(200, 2)) * [1.5, 0.7] + [0.4, -0.2]
        below += w1(p, q, "sliced", seed).value <= w1(p, q, "exact-assignment").value
    rng = np.random.default_rng(99)
    axioms = True
    for _ in range(30):
        a, b, c = (rng.normal(size=(8, 3)) for _ in range(3))
        ab = w1(a, b, "exact-assignment").value
        axioms &= abs(ab - w1(b, a, "exact-assignment").value) <= 1e-12
        axioms &= ab <= w1(a, c, "exact-assignment").value + w1(c, b, "exact-assignment").value + 1e-12
        axioms &= w1(a, a, "exact-assignment").value == 0.0
    _check(
        record_criterion,
        11,
        {"sliced<=exact on 20": below == 20, "metric axioms": bool(axioms)},
        f"sliced <= exact on {below}/20 instances",
    )
