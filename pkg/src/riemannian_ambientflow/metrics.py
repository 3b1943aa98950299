"""Wasserstein-1 estimators, reconstruction error and the recoverability bound."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

W1_METHODS = ("exact-1d", "sliced", "exact-assignment")
MAX_ASSIGNMENT = 2000


@dataclass
class W1Estimate:
    value: float
    method: str
    sample_counts: tuple[int, int]
    projection_count: int | None = None
    std_error: float | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _w1_1d(a: np.ndarray, b: np.ndarray) -> float:
    """Exact 1-d W1 between two empirical measures via their quantile functions."""
    a, b = np.sort(a), np.sort(b)
    if len(a) == len(b):
        return float(np.mean(np.abs(a - b)))
    # unequal sizes: integrate |F^{-1}_a - F^{-1}_b| over the merged breakpoints
    qs = np.union1d(np.arange(1, len(a)) / len(a), np.arange(1, len(b)) / len(b))
    qs = np.concatenate([[0.0], qs, [1.0]])
    mid = 0.5 * (qs[:-1] + qs[1:])
    ia = np.minimum((mid * len(a)).astype(int), len(a) - 1)
    ib = np.minimum((mid * len(b)).astype(int), len(b) - 1)
    return float(np.sum(np.diff(qs) * np.abs(a[ia] - b[ib])))


def w1(samples_p, samples_q, method: str = "sliced", seed=0, projections: int = 128) -> W1Estimate:
    p = np.asarray(samples_p, dtype=np.float64)
    q = np.asarray(samples_q, dtype=np.float64)
    if p.ndim == 1:
        p = p[:, None]
    if q.ndim == 1:
        q = q[:, None]
    if len(p) == 0 or len(q) == 0:
        raise ValueError("both sample sets must be nonempty")
    if p.shape[1] != q.shape[1]:
        raise ValueError(f"sample dimensions differ: {p.shape[1]} vs {q.shape[1]}")
    counts = (len(p), len(q))
    if method == "exact-1d":
        if p.shape[1] != 1:
            raise ValueError("exact-1d needs one-dimensional samples")
        return W1Estimate(_w1_1d(p[:, 0], q[:, 0]), method, counts)
    if method == "sliced":
        rng = np.random.default_rng(seed)
        dirs = rng.standard_normal((projections, p.shape[1]))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        vals = np.array([_w1_1d(p @ u, q @ u) for u in dirs])
        se = float(vals.std(ddof=1) / math.sqrt(projections)) if projections > 1 else 0.0
        return W1Estimate(float(vals.mean()), method, counts, projections, se)
    if method == "exact-assignment":
        if len(p) != len(q):
            raise ValueError("exact-assignment needs equal sample counts")
        if len(p) > MAX_ASSIGNMENT:
            raise ValueError(f"exact-assignment is limited to {MAX_ASSIGNMENT} samples")
        cost = cdist(p, q)
        rows, cols = linear_sum_assignment(cost)
        return W1Estimate(float(cost[rows, cols].mean()), method, counts)
    raise ValueError(f"unknown W1 method {method!r}; choose from {W1_METHODS}")


def mse(x_hat, x) -> float:
    """``||x_hat - x||^2 / d``."""
    x_hat, x = np.asarray(x_hat, dtype=np.float64), np.asarray(x, dtype=np.float64)
    if x_hat.shape != x.shape:
        raise ValueError(f"shape mismatch {x_hat.shape} vs {x.shape}")
    return float(np.sum((x_hat - x) ** 2) / x.size)


def recoverability_bound(omega: float, operator_norm: float, delta: float) -> float:
    """``2 omega (1 + ||A|| / sqrt(1 - delta))``."""
    if not 0.0 <= delta < 1.0:
        raise ValueError("delta must lie in [0, 1)")
    if omega < 0 or operator_norm < 0:
        raise ValueError("omega and the operator norm must be nonnegative")
    return 2.0 * omega * (1.0 + operator_norm / math.sqrt(1.0 - delta))


@dataclass
class RecoverabilityReport:
    omega_hat: float
    delta_hat: float
    operator_norm: float
    bound: float
    sliced_w1: float
    passed: bool
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def verify_recoverability(prior, rae, ground_truth, corruption, count: int = 1000, pair_count: int = 2000,
                          seed=0) -> RecoverabilityReport:
    """Empirical side of the recoverability bound for a trained prior.

    ``omega_hat`` is the projection error of the RAE under prior samples (the
    flow-consistency term vanishes because the same flow defines both maps),
    ``delta_hat`` the empirical RIP deviation of the operator on prior samples.
    The comparison is advisory: the bound's assumptions cannot be checked.
    """
    from .inversion import check_rip
    from .rae import expected_projection_error

    samples = prior.sample(count, seed)
    omega = expected_projection_error(rae, samples).expected_error
    lo, hi = check_rip(samples, corruption, pair_count, seed)
    delta = max(1.0 - lo, hi - 1.0, 0.0)
    notes = ["advisory: bound assumptions are not verified"]
    op_norm = corruption.operator_norm()
    if delta >= 1.0:
        notes.append("empirical RIP constant reached 1; bound undefined")
        bound = math.inf
    else:
        bound = recoverability_bound(omega, op_norm, delta)
    gt = np.asarray(ground_truth, dtype=np.float64)
    dist = w1(samples, gt, "sliced", seed).value
    return RecoverabilityReport(omega, delta, op_norm, bound, dist, bool(dist <= bound), notes)
