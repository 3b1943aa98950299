"""Inverse problems with an RAE decoder as the signal model.

Contains the smoothness constants of the decoder for the coupling-flow
architecture, the gradient-descent convergence certificate built from them,
empirical restricted-isometry checkers, the gradient-descent solver itself and
a total-variation baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .corruption import CorruptionModel, power_iteration_norm
from .flow import tanh_power_derivative_sup
from .rae import RAE


@dataclass
class DecoderSmoothness:
    m1_lower: float
    m2_upper: float
    M_upper: float
    sigma_tilde_min: float
    sigma_tilde_max: float
    per_layer: list = field(default_factory=list)  # decoding order

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def coupling_slope_bound(alpha: np.ndarray) -> float:
    """``2 max_l sum_r |alpha[r, l]|``, a bound on the slope of every shift."""
    a = np.abs(np.asarray(alpha))
    return 2.0 * float(a.sum(axis=0).max()) if a.size else 0.0


def smoothness_constants(rae: RAE) -> DecoderSmoothness:
    """Closed-form bi-Lipschitz and Jacobian-Lipschitz bounds of the decoder.

    The decoder runs the flow layers in reverse, so entry ``i`` of
    ``per_layer`` describes flow layer ``L - i`` (0-based).  Each entry holds the
    extreme singular values of the inverse linear factor, the shift slope bound
    ``B`` and the shift curvature bound ``C``.  Both shift bounds use 2 as the
    constant; the true suprema of the first and second derivatives of
    ``tanh(u)^r`` are at most 1 and 2.
    """
    flow = rae.flow
    sv = np.linalg.svd(rae.pushed_basis, compute_uv=False)
    s_min, s_max = float(sv.min()), float(sv.max())
    layers = []
    for idx in reversed(range(flow.n_layers)):
        s = np.linalg.svd(flow.linear_matrix(idx), compute_uv=False)
        bound = coupling_slope_bound(flow.layers[idx].alpha) if flow.split[1] else 0.0
        layers.append(
            {
                "flow_layer": idx,
                "sigma_lower": float(1.0 / s.max()),
                "sigma_upper": float(1.0 / s.min()),
                "B": bound,
                "C_tilde": bound,
            }
        )
    m1, m2 = s_min, s_max
    for lay in layers:
        m1 *= lay["sigma_lower"] / (1.0 + lay["B"])
        m2 *= lay["sigma_upper"] * (1.0 + lay["B"])
    # Jacobian-Lipschitz: telescoping over layers.  The pushed basis norm enters
    # once through the Jacobian tail and once through the point difference.
    growth = [lay["sigma_upper"] * (1.0 + lay["B"]) for lay in layers]
    total = 0.0
    for l, lay in enumerate(layers):
        after = float(np.prod(growth[l + 1 :]))
        before = float(np.prod(growth[:l]))
        total += after * lay["sigma_upper"] * lay["C_tilde"] * before**2
    M = s_max**2 * total
    return DecoderSmoothness(m1, m2, M, s_min, s_max, layers)


def tanh_bound_table(degree: int) -> list[float]:
    return [tanh_power_derivative_sup(r) for r in range(1, degree + 1)]


def _latent_pairs(rae: RAE, count: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Pairs mixing spread-out latents and nearby ones, so that both global
    ratios and local derivatives are probed."""
    k = rae.latent_dim
    scale = 3.0 * np.sqrt(np.clip(np.asarray(rae.spectrum)[:k], 1e-12, None))
    p = rng.standard_normal((count, k)) * scale
    q = rng.standard_normal((count, k)) * scale
    near = rng.random(count) < 0.5
    q[near] = p[near] + 1e-3 * rng.standard_normal((int(near.sum()), k)) * scale
    same = np.linalg.norm(p - q, axis=1) == 0.0
    q[same] += 1e-3 * scale
    return p, q


def empirical_bilipschitz(rae: RAE, trial_count: int = 10000, seed=0) -> tuple[float, float]:
    """Smallest and largest ``||D(p) - D(q)|| / ||p - q||`` over sampled pairs."""
    if trial_count < 1:
        raise ValueError("trial_count must be positive")
    rng = np.random.default_rng(seed)
    p, q = _latent_pairs(rae, trial_count, rng)
    ratio = np.linalg.norm(rae.decode(p) - rae.decode(q), axis=1) / np.linalg.norm(p - q, axis=1)
    return float(ratio.min()), float(ratio.max())


def empirical_jacobian_lipschitz(rae: RAE, pair_count: int = 1000, seed=0) -> float:
    rng = np.random.default_rng(seed)
    p, q = _latent_pairs(rae, pair_count, rng)
    best = 0.0
    for a, b in zip(p, q):
        diff = rae.decoder_jacobian(a) - rae.decoder_jacobian(b)
        best = max(best, float(np.linalg.norm(diff, 2) / np.linalg.norm(a - b)))
    return best


def _range_points(source, count: int, rng) -> np.ndarray:
    if isinstance(source, RAE):
        k = source.latent_dim
        scale = 3.0 * np.sqrt(np.clip(np.asarray(source.spectrum)[:k], 1e-12, None))
        return source.decode(rng.standard_normal((count, k)) * scale)
    pts = np.atleast_2d(np.asarray(source, dtype=np.float64))
    return pts[rng.integers(0, len(pts), count)]


def _differences(source, count: int, rng, tol: float = 1e-12) -> np.ndarray:
    """``count`` nonzero differences of range points (coincident pairs are resampled)."""
    parts = []
    have = 0
    for _ in range(100):
        a, b = _range_points(source, count, rng), _range_points(source, count, rng)
        diff = a - b
        diff = diff[np.linalg.norm(diff, axis=1) > tol]
        parts.append(diff)
        have += len(diff)
        if have >= count:
            break
    out = np.vstack(parts)
    if len(out) < count:
        raise ValueError("could not sample enough distinct points from the range")
    return out[:count]


def check_rric(rae: RAE, corruption: CorruptionModel, quadruple_count: int = 10000, seed=0) -> float:
    """Empirical range-restricted isometry constant (a lower bound on the true one)."""
    if quadruple_count < 1:
        raise ValueError("quadruple_count must be positive")
    rng = np.random.default_rng(seed)
    u = _differences(rae, quadruple_count, rng)
    v = _differences(rae, quadruple_count, rng)
    op = corruption.operator
    form = np.sum((op.adjoint(op.apply(u)) - u) * v, axis=1)
    return float(np.max(np.abs(form) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))))


def check_rip(source, corruption: CorruptionModel, pair_count: int = 10000, seed=0, return_ratios: bool = False):
    """Min and max of ``||A(x1 - x2)||^2 / ||x1 - x2||^2`` over sampled range pairs.

    ``source`` is an :class:`RAE` (points drawn from its decoder range) or an
    array of points.
    """
    if pair_count < 1:
        raise ValueError("pair_count must be positive")
    rng = np.random.default_rng(seed)
    u = _differences(source, pair_count, rng)
    ratios = np.sum(corruption.operator.apply(u) ** 2, axis=1) / np.sum(u * u, axis=1)
    out = (float(ratios.min()), float(ratios.max()))
    return (out, ratios) if return_ratios else out


# -- certificate ------------------------------------------------------------------

@dataclass
class ConvergenceCertificate:
    m1: float
    m2: float
    M: float
    delta_hat: float
    normal_norm: float
    alpha: float
    m_delta: float
    alpha_max: float
    rho: float | None
    beta: float | None
    conditions: tuple[bool, bool, bool]
    empirical: bool = True

    @property
    def satisfied(self) -> bool:
        return all(self.conditions)

    def predicted_iterations(self, initial_sq_error: float, target: float) -> int | None:
        """Iterations after which the noiseless bound guarantees ``||p - p*|| <= target``."""
        if not self.satisfied or initial_sq_error <= target**2:
            return 0 if self.satisfied else None
        return int(math.ceil(math.log(target**2 / initial_sq_error) / math.log(self.rho)))

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["satisfied"] = self.satisfied
        d["note"] = (
            "delta is a sampled lower bound; the certificate is necessary but not sufficient"
            if self.empirical
            else "delta supplied as certified"
        )
        return d


def certificate_from_constants(m1: float, m2: float, M: float, delta: float, normal_norm: float,
                               alpha: float, empirical: bool = True) -> ConvergenceCertificate:
    """Evaluate the step-size conditions and, when they hold, the contraction
    factor ``rho`` and noise factor ``beta``."""
    m_delta = m1**2 - m2 * M / 2.0 - delta * m2**2
    c1 = m2 * M < 2.0 * m1**2
    c2 = delta < (m1**2 - m2 * M / 2.0) / m2**2
    denom = 2.0 * m2**4 * normal_norm**2
    alpha_max = m_delta / denom if denom > 0 else math.inf
    c3 = 0.0 < alpha < alpha_max
    rho = beta = None
    if c1 and c2 and c3:
        rho = 1.0 - alpha * m_delta + 2.0 * alpha**2 * m2**4 * normal_norm**2
        beta = 2.0 * alpha**2 * m2**2 + alpha * m2**2 / m_delta
    return ConvergenceCertificate(m1, m2, M, delta, normal_norm, alpha, m_delta, alpha_max, rho, beta,
                                  (bool(c1), bool(c2), bool(c3)), empirical)


def certificate(rae: RAE, corruption: CorruptionModel, alpha: float, delta_hat: float | None = None,
                smoothness: DecoderSmoothness | None = None, certified_delta: bool = False,
                quadruple_count: int = 10000, seed=0) -> ConvergenceCertificate:
    sm = smoothness if smoothness is not None else smoothness_constants(rae)
    if delta_hat is None:
        delta_hat = check_rric(rae, corruption, quadruple_count, seed)
    op = corruption.operator
    normal = power_iteration_norm(op.apply, op.adjoint, corruption.signal_dim) ** 2
    return certificate_from_constants(sm.m1_lower, sm.m2_upper, sm.M_upper, delta_hat, normal, alpha,
                                      empirical=not certified_delta)


# -- solvers ------------------------------------------------------------------------

@dataclass
class InversionResult:
    latent: np.ndarray
    signal: np.ndarray
    history: dict
    best_index: int | None = None
    aborted: bool = False


def invert(rae: RAE, corruption: CorruptionModel, y, alpha: float, max_iters: int, p_init=None,
           p_true=None, x_true=None, select: str = "final", tol: float | None = None) -> InversionResult:
    """Fixed-step gradient descent on ``0.5 ||A D(p) - y||^2``.

    History lists the loss of every iterate, and ``||p_t - p*||`` or the MSE
    when ``p_true`` / ``x_true`` are given.  ``select='best-mse'`` (requires
    ``x_true``) returns the iterate with the lowest MSE instead of the last.
    Iteration stops early when ``||p_t - p*|| <= tol``.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if select not in ("final", "best-mse"):
        raise ValueError("select must be 'final' or 'best-mse'")
    if select == "best-mse" and x_true is None:
        raise ValueError("best-mse selection requires the ground truth signal")
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (corruption.measurement_dim,):
        raise ValueError(f"measurement must have shape ({corruption.measurement_dim},), got {y.shape}")
    op = corruption.operator
    flow = rae.flow
    p = np.zeros(rae.latent_dim) if p_init is None else np.array(p_init, dtype=np.float64)
    hist = {"loss": [], "latent_error": [], "mse": []}
    best = (math.inf, None, None, None)
    aborted = False
    for t in range(max_iters + 1):
        z = rae._cache["z"] + rae.pushed_basis @ p
        x, jac = flow.inverse_with_tangent(z, rae.pushed_basis)
        r = op.apply(x) - y
        loss = 0.5 * float(r @ r)
        if not math.isfinite(loss):
            aborted = True
            break
        hist["loss"].append(loss)
        if p_true is not None:
            hist["latent_error"].append(float(np.linalg.norm(p - p_true)))
        if x_true is not None:
            err = float(np.mean((x - x_true) ** 2))
            hist["mse"].append(err)
            if err < best[0]:
                best = (err, t, p.copy(), x.copy())
        if t == max_iters or (tol is not None and p_true is not None and hist["latent_error"][-1] <= tol):
            break
        p = p - alpha * (jac.T @ op.adjoint(r))
    if select == "best-mse" and best[1] is not None:
        return InversionResult(best[2], best[3], hist, best[1], aborted)
    x = flow.inverse(rae._cache["z"] + rae.pushed_basis @ p)
    return InversionResult(p, x, hist, None, aborted)


def _grad2d(u):
    gx = np.zeros_like(u)
    gy = np.zeros_like(u)
    gx[:-1] = u[1:] - u[:-1]
    gy[:, :-1] = u[:, 1:] - u[:, :-1]
    return gx, gy


def _div2d(px, py):
    # negative adjoint of the forward-difference gradient
    d = np.zeros_like(px)
    d[0] = px[0]
    d[1:-1] = px[1:-1] - px[:-2]
    d[-1] = -px[-2]
    d[:, 0] += py[:, 0]
    d[:, 1:-1] += py[:, 1:-1] - py[:, :-2]
    d[:, -1] += -py[:, -2]
    return d


def tv_prox(v: np.ndarray, weight: float, inner_iters: int = 50, step: float = 0.125) -> np.ndarray:
    """``argmin_x 0.5 ||x - v||^2 + weight * TV(x)`` for an image ``v`` by dual
    projection iterations (isotropic TV, mirrored boundary)."""
    if weight <= 0:
        return np.array(v, dtype=np.float64)
    px = np.zeros_like(v, dtype=np.float64)
    py = np.zeros_like(px)
    for _ in range(inner_iters):
        gx, gy = _grad2d(_div2d(px, py) - v / weight)
        norm = np.sqrt(gx * gx + gy * gy)
        px = (px + step * gx) / (1.0 + step * norm)
        py = (py + step * gy) / (1.0 + step * norm)
    return v - weight * _div2d(px, py)


def total_variation(img: np.ndarray) -> float:
    gx, gy = _grad2d(np.asarray(img, dtype=np.float64))
    return float(np.sum(np.sqrt(gx * gx + gy * gy)))


def tv_reconstruct(corruption: CorruptionModel, y, shape: tuple[int, int], lambda_tv: float = 8.0,
                   alpha: float | None = None, max_iters: int = 200, inner_iters: int = 50, x_init=None,
                   x_true=None, select: str = "final"):
    """Proximal gradient descent for ``0.5 ||A x - y||^2 + lambda TV(x)``.

    The default step is ``0.2 / ||A||^2``.  Returns ``(x_hat, history)``.
    """
    h, w = shape
    if h * w != corruption.signal_dim:
        raise ValueError(f"image shape {shape} does not match signal size {corruption.signal_dim}")
    if select == "best-mse" and x_true is None:
        raise ValueError("best-mse selection requires the ground truth signal")
    op = corruption.operator
    if alpha is None:
        alpha = 0.2 / corruption.operator_norm() ** 2
    y = np.asarray(y, dtype=np.float64)
    x = np.zeros(h * w) if x_init is None else np.array(x_init, dtype=np.float64)
    hist = {"loss": [], "mse": []}
    best = (math.inf, x)
    for _ in range(max_iters):
        v = x - alpha * op.adjoint(op.apply(x) - y)
        x = tv_prox(v.reshape(h, w), alpha * lambda_tv, inner_iters).reshape(-1)
        r = op.apply(x) - y
        hist["loss"].append(0.5 * float(r @ r) + lambda_tv * total_variation(x.reshape(h, w)))
        if x_true is not None:
            err = float(np.mean((x - x_true) ** 2))
            hist["mse"].append(err)
            if err < best[0]:
                best = (err, x.copy())
    if select == "best-mse":
        return best[1], hist
    return x, hist
