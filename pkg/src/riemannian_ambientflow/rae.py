"""Riemannian autoencoders built on a pullback geometry.

The encoder takes the pullback logarithm at a base point and projects it onto
an orthonormal tangent basis; the decoder exponentiates a latent combination of
the basis vectors back onto the data space.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .flow import FlowModel
from .geometry import PullbackGeometry

RAE_VERSION = 1


def _fix_signs(vectors: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Flip each column so that its first non-negligible entry is positive."""
    out = np.array(vectors)
    for j in range(out.shape[1]):
        col = out[:, j]
        nz = np.flatnonzero(np.abs(col) > tol * max(np.abs(col).max(), 1.0))
        if nz.size and col[nz[0]] < 0:
            out[:, j] = -col
    return out


def sorted_eigh(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Descending eigenpairs of a symmetric matrix with deterministic signs."""
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    return vals[order], _fix_signs(vecs[:, order])


def select_dim(spectrum, epsilon: float) -> int:
    """Smallest ``d'`` in ``1..d-1`` whose discarded eigenvalue mass is at most
    ``epsilon`` times the trace."""
    lam = np.asarray(spectrum, dtype=np.float64)
    d = lam.size
    if d < 2:
        raise ValueError("need at least two eigenvalues to select a latent dimension")
    total = lam.sum()
    if not total > 0:
        raise ValueError("spectrum must have positive trace")
    eps0 = lam[-1] / total
    if not (eps0 < epsilon <= 1.0):
        raise ValueError(f"epsilon must lie in ({eps0:.6g}, 1], got {epsilon}")
    # tail[k] = sum of eigenvalues after the first k+1
    tail = total - np.cumsum(lam)
    for k in range(1, d):
        if tail[k - 1] <= epsilon * total:
            return k
    raise ValueError("no latent dimension satisfies the tolerance")  # unreachable for valid epsilon


def tangent_covariance(geometry: PullbackGeometry, samples=None, base_point=None) -> np.ndarray:
    """Second moment of the logarithms at the base point.

    Without samples the model covariance of a standard normal latent is used:
    ``A A^T`` with ``A`` the differential of the inverse flow at the origin.
    """
    flow = geometry.flow
    if samples is None:
        jinv = flow.inverse_jacobian_at(np.zeros(flow.dim))
        return jinv @ jinv.T
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if x.shape[0] < 2:
        raise ValueError("sample covariance needs at least two points")
    if base_point is None:
        base_point = geometry.barycenter(x)
    logs = np.atleast_2d(geometry.log_map(base_point, x))
    return logs.T @ logs / x.shape[0]


@dataclass
class RAE:
    base_point: np.ndarray
    basis: np.ndarray
    geometry: PullbackGeometry
    spectrum: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.base_point = np.asarray(self.base_point, dtype=np.float64)
        self.basis = np.asarray(self.basis, dtype=np.float64).reshape(self.dim, -1)
        z, jac = self.flow.forward_with_tangent(self.base_point, np.eye(self.dim))
        self._cache["z"] = z
        self._cache["jac"] = jac
        # encoder matrix U^T J^{-1} and pushed-forward basis J U
        self._cache["enc"] = np.linalg.solve(jac.T, self.basis).T
        self._cache["dec"] = jac @ self.basis

    @property
    def flow(self) -> FlowModel:
        return self.geometry.flow

    @property
    def dim(self) -> int:
        return self.geometry.dim

    @property
    def latent_dim(self) -> int:
        return self.basis.shape[1]

    @property
    def base_jacobian(self) -> np.ndarray:
        return self._cache["jac"]

    @property
    def pushed_basis(self) -> np.ndarray:
        """``D_{x_bar} phi @ U``, the linear part of the decoder in latent space."""
        return self._cache["dec"]

    def encode(self, x) -> np.ndarray:
        diff = self.flow.forward(np.asarray(x, dtype=np.float64)) - self._cache["z"]
        return diff @ self._cache["enc"].T

    def decode(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        if p.shape[-1] != self.latent_dim:
            raise ValueError(f"latent vectors must have {self.latent_dim} entries, got {p.shape}")
        return self.flow.inverse(self._cache["z"] + p @ self._cache["dec"].T)

    def project(self, x) -> np.ndarray:
        return self.decode(self.encode(x))

    def decoder_jacobian(self, p) -> np.ndarray:
        """``D_p decode``, a d x d_eps matrix."""
        z = self._cache["z"] + np.asarray(p, dtype=np.float64) @ self._cache["dec"].T
        return self.flow.inverse_with_tangent(z, self._cache["dec"])[1]

    # -- persistence ------------------------------------------------------------
    def to_dict(self, flow_reference: str | None = None) -> dict:
        return {
            "version": RAE_VERSION,
            "base_point": self.base_point.tolist(),
            "basis": self.basis.flatten(order="F").tolist(),
            "spectrum": np.asarray(self.spectrum).tolist(),
            "latent_dim": self.latent_dim,
            "dim": self.dim,
            "flow_checkpoint_reference": flow_reference,
        }

    def save(self, path, flow_reference: str | None = None) -> None:
        Path(path).write_text(json.dumps(self.to_dict(flow_reference)))

    @classmethod
    def from_dict(cls, doc: dict, flow: FlowModel) -> "RAE":
        if doc.get("version") != RAE_VERSION:
            raise ValueError(f"RAE checkpoint version {doc.get('version')!r} found, {RAE_VERSION} expected")
        d, k = int(doc["dim"]), int(doc["latent_dim"])
        if d != flow.dim:
            raise ValueError(f"RAE dimension {d} does not match flow dimension {flow.dim}")
        basis = np.asarray(doc["basis"], dtype=np.float64).reshape((d, k), order="F")
        return cls(np.asarray(doc["base_point"]), basis, PullbackGeometry(flow), np.asarray(doc["spectrum"]))

    @classmethod
    def load(cls, path, flow: FlowModel) -> "RAE":
        return cls.from_dict(json.loads(Path(path).read_text()), flow)


def _resolve_dim(spectrum, latent_dim, epsilon) -> int:
    if (latent_dim is None) == (epsilon is None):
        raise ValueError("give exactly one of latent_dim and epsilon")
    if latent_dim is not None:
        if not 1 <= latent_dim <= len(spectrum):
            raise ValueError(f"latent_dim must lie in [1, {len(spectrum)}]")
        return int(latent_dim)
    return select_dim(spectrum, epsilon)


def build_rae_analytic(geometry: PullbackGeometry, epsilon=None, latent_dim=None) -> RAE:
    """RAE of the model density: base point ``phi^{-1}(0)``, covariance
    eigenvectors as the basis."""
    flow = geometry.flow
    base = flow.inverse(np.zeros(flow.dim))
    vals, vecs = sorted_eigh(tangent_covariance(geometry))
    k = _resolve_dim(vals, latent_dim, epsilon)
    return RAE(base, vecs[:, :k], geometry, vals)


def build_rae_from_samples(geometry: PullbackGeometry, samples, latent_dim=None, epsilon=None,
                           rank_tol: float = 1e-12) -> RAE:
    """Barycenter plus principal components of the logarithms at it."""
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    base = geometry.barycenter(x)
    cov = tangent_covariance(geometry, x, base)
    vals, vecs = sorted_eigh(cov)
    vals = np.clip(vals, 0.0, None)
    k = _resolve_dim(vals, latent_dim, epsilon)
    if x.shape[0] < k + 1:
        raise ValueError(f"need at least {k + 1} samples for a {k}-dimensional basis, got {x.shape[0]}")
    if vals[k - 1] <= rank_tol * max(vals[0], 1e-300):
        raise ValueError(f"tangent samples span fewer than {k} directions")
    return RAE(base, vecs[:, :k], geometry, vals)


# ---------------------------------------------------------------------------
# projection error


@dataclass
class ProjectionErrorReport:
    expected_error: float
    sample_count: int
    std_error: float
    bound_terms: tuple[float, float] | None = None
    sliced_w1: float | None = None
    sliced_w1_std_error: float | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


def expected_projection_error(rae: RAE, source, count: int = 1000, seed=0, with_w1: bool = False,
                              bound_epsilon: float | None = None) -> ProjectionErrorReport:
    """Monte Carlo estimate of ``E ||decode(encode(x)) - x||``.

    ``source`` is either a :class:`FlowModel` (sampled ``count`` times) or an
    array of samples used as given.
    """
    if isinstance(source, FlowModel):
        if count < 100:
            raise ValueError("Monte Carlo mode needs at least 100 samples")
        x = source.sample(count, seed)
    else:
        x = np.atleast_2d(np.asarray(source, dtype=np.float64))
    proj = rae.project(x)
    err = np.linalg.norm(proj - x, axis=1)
    n = len(err)
    std = float(err.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    report = ProjectionErrorReport(float(err.mean()), n, std)
    if with_w1:
        from .metrics import w1

        est = w1(proj, x, method="sliced", seed=seed)
        report.sliced_w1, report.sliced_w1_std_error = est.value, est.std_error
    if bound_epsilon is not None:
        report.bound_terms = projection_bound_terms(rae, bound_epsilon, seed=seed)
    return report


def _second_derivative_norm(flow: FlowModel, z: np.ndarray, push: np.ndarray, step: float = 1e-5,
                            restarts: int = 4, iters: int = 200, seed=0) -> float:
    """Estimate ``sup_{|a|=1} ||D^2 phi^{-1}(z)[push a, push a]||``.

    The second differential is assembled by central differences of the inverse
    Jacobian; for a symmetric bilinear map this supremum is its norm.
    """
    d = flow.dim
    slices = []
    for j in range(d):
        dz = step * push[:, j]
        jp = flow.inverse_jacobian_at(z + dz)
        jm = flow.inverse_jacobian_at(z - dz)
        slices.append((jp - jm) @ push / (2.0 * step))
    T = np.stack(slices, axis=2)  # T[:, i, j] = B(e_i, e_j)
    T = 0.5 * (T + T.transpose(0, 2, 1))
    if np.abs(T).max() == 0.0:
        return 0.0
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(restarts):
        a = rng.standard_normal(d)
        a /= np.linalg.norm(a)
        for _ in range(iters):
            baa = np.einsum("kij,i,j->k", T, a, a)
            grad = np.einsum("kij,j,k->i", T, a, baa)
            n = np.linalg.norm(grad)
            if n == 0.0:
                break
            new = grad / n
            if np.linalg.norm(new - a) < 1e-12:
                a = new
                break
            a = new
        best = max(best, float(np.linalg.norm(np.einsum("kij,i,j->k", T, a, a))))
    return best


def projection_bound_terms(rae: RAE, epsilon: float, latent_sample_count: int = 32, seed=0,
                      return_constants: bool = False):
    """Sampled estimate of the first- and second-order projection-error bound terms.

    The suprema over latent space are approximated by maxima over latents drawn
    from ``N(0, diag(spectrum))`` scaled by 3, plus the origin.  The result is a
    heuristic estimate, not a certified bound.
    """
    if latent_sample_count < 1:
        raise ValueError("latent_sample_count must be positive")
    flow = rae.flow
    rng = np.random.default_rng(seed)
    k = rae.latent_dim
    scale = 3.0 * np.sqrt(np.clip(np.asarray(rae.spectrum)[:k], 0.0, None))
    latents = np.vstack([np.zeros(k), rng.standard_normal((latent_sample_count, k)) * scale])
    jac = rae.base_jacobian
    c1 = c2 = 0.0
    for p in latents:
        z = rae._cache["z"] + rae.pushed_basis @ p
        jinv = flow.inverse_jacobian_at(z)
        c1 = max(c1, float(np.linalg.norm(jinv @ jac, 2)))
        c2 = max(c2, _second_derivative_norm(flow, z, jac, seed=seed))
    fro = float(np.linalg.norm(flow.inverse_jacobian_at(np.zeros(flow.dim)), "fro"))
    terms = (c1 * math.sqrt(epsilon) * fro, 0.5 * c2 * epsilon * fro**2)
    if return_constants:
        return terms, (c1, c2)
    return terms
