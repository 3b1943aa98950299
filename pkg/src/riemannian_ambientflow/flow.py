"""Constant-Jacobian-determinant normalizing flow.

The diffeomorphism is ``phi = phi_L o ... o phi_1`` with ``phi_i = f_i o V_i``:

* ``V_i = L_i U_i`` is an invertible linear layer, ``L_i`` unit lower
  triangular and ``U_i`` upper triangular with diagonal ``sign * exp(logmag)``;
* ``f_i(z) = [z_1, z_2 + g_i(z_1)]`` is an additive coupling whose shift is a
  polynomial in ``tanh`` applied coordinatewise,
  ``g_i(u)_l = sum_r alpha[r, l] * tanh(u_l) ** r``.

Couplings are volume preserving, so ``log|det D_x phi|`` equals the sum of the
linear layers' log-magnitudes for every ``x``.

For odd ``d`` the first block has ``ceil(d/2)`` coordinates and the shifted
block ``floor(d/2)``; shift ``l`` depends on the ``l``-th coordinate of the first
block only, which keeps ``D g`` diagonal.

All evaluation routines are written with :mod:`autodiff` operations.  Called
with numpy inputs on a model holding numpy parameters they return numpy arrays;
if the parameters or the inputs are :class:`~autodiff.Tensor` objects the
result is a tensor and, under an active tape, is differentiable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_VERSION = 1
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class FlowLayer:
    """Parameters of one ``f o V`` block.

    Only the strictly lower part of ``lower`` and the strictly upper part of
    ``upper_offdiag`` enter the map.  ``diag_sign`` is fixed at construction.
    """

    lower: np.ndarray | Tensor
    upper_offdiag: np.ndarray | Tensor
    diag_sign: np.ndarray
    diag_logmag: np.ndarray | Tensor
    alpha: np.ndarray | Tensor  # (degree, floor(d/2))


def _is_traced(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


@dataclass
class FlowModel:
    layers: list[FlowLayer]
    dim: int
    degree: int = 3
    _masks: tuple = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("flow dimension must be positive")
        d = self.dim
        for layer in self.layers:
            if ad.value(layer.lower).shape != (d, d):
                raise ValueError("lower factor must be d x d")
            if ad.value(layer.alpha).shape != (self.degree, d // 2):
                raise ValueError(
                    f"alpha must have shape {(self.degree, d // 2)}, got {ad.value(layer.alpha).shape}"
                )
        ones = np.ones((d, d))
        self._masks = (np.tril(ones, -1), np.triu(ones, 1), np.eye(d))

    # -- construction -------------------------------------------------------
    @classmethod
    def identity(cls, dim: int, n_layers: int = 1, degree: int = 3) -> "FlowModel":
        layers = [
            FlowLayer(
                lower=np.zeros((dim, dim)),
                upper_offdiag=np.zeros((dim, dim)),
                diag_sign=np.ones(dim),
                diag_logmag=np.zeros(dim),
                alpha=np.zeros((degree, dim // 2)),
            )
            for _ in range(n_layers)
        ]
        return cls(layers, dim, degree)

    @classmethod
    def initialize(cls, dim: int, n_layers: int, degree: int = 3, seed=None) -> "FlowModel":
        """Training initialization: near-identity LU factors, zero couplings."""
        rng = np.random.default_rng(seed)
        model = cls.identity(dim, n_layers, degree)
        std = math.sqrt(0.01 / dim)
        for layer in model.layers:
            layer.lower = np.tril(rng.normal(0.0, std, (dim, dim)), -1)
            layer.upper_offdiag = np.triu(rng.normal(0.0, std, (dim, dim)), 1)
        return model

    @classmethod
    def random(
        cls,
        dim: int,
        n_layers: int,
        degree: int = 3,
        seed=None,
        alpha_scale: float = 0.3,
        offdiag_scale: float = 0.3,
        logmag_scale: float = 0.2,
    ) -> "FlowModel":
        """A generic non-trivial flow, used for checks and demonstrations."""
        rng = np.random.default_rng(seed)
        layers = []
        for _ in range(n_layers):
            layers.append(
                FlowLayer(
                    lower=np.tril(rng.normal(0, offdiag_scale, (dim, dim)), -1),
                    upper_offdiag=np.triu(rng.normal(0, offdiag_scale, (dim, dim)), 1),
                    diag_sign=rng.choice([-1.0, 1.0], dim),
                    diag_logmag=rng.normal(0, logmag_scale, dim),
                    alpha=rng.normal(0, alpha_scale, (degree, dim // 2)),
                )
            )
        return cls(layers, dim, degree)

    @classmethod
    def linear(cls, matrix: np.ndarray) -> "FlowModel":
        """Single-layer flow ``x -> B x`` for a matrix with an LU factorization
        without pivoting."""
        B = np.asarray(matrix, dtype=np.float64)
        d = B.shape[0]
        lower, upper = _lu_nopivot(B)
        du = np.diag(upper)
        layer = FlowLayer(
            lower=np.tril(lower, -1),
            upper_offdiag=np.triu(upper, 1),
            diag_sign=np.sign(du),
            diag_logmag=np.log(np.abs(du)),
            alpha=np.zeros((1, d // 2)),
        )
        return cls([layer], d, 1)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def split(self) -> tuple[int, int]:
        """Sizes of the conditioning and shifted blocks."""
        return (self.dim + 1) // 2, self.dim // 2

    # -- parameters -----------------------------------------------------------
    def parameters(self) -> list:
        """Trainable arrays in a fixed order (signs are not trainable)."""
        out = []
        for layer in self.layers:
            out += [layer.lower, layer.upper_offdiag, layer.diag_logmag, layer.alpha]
        return out

    def with_parameters(self, params) -> "FlowModel":
        params = list(params)
        if len(params) != 4 * self.n_layers:
            raise ValueError("parameter list length does not match the architecture")
        layers = []
        for i, layer in enumerate(self.layers):
            lo, up, lm, al = params[4 * i : 4 * i + 4]
            layers.append(FlowLayer(lo, up, np.array(layer.diag_sign), lm, al))
        return FlowModel(layers, self.dim, self.degree)

    def detach(self) -> "FlowModel":
        return self.with_parameters([np.array(ad.value(p)) for p in self.parameters()])

    @property
    def traced(self) -> bool:
        return _is_traced(*self.parameters())

    # -- building blocks --------------------------------------------------------
    def linear_factors(self, layer: FlowLayer):
        m_lo, m_up, eye = self._masks
        lower = ad.as_tensor(layer.lower) * m_lo + eye
        upper = ad.as_tensor(layer.upper_offdiag) * m_up + ad.diag(
            ad.exp(layer.diag_logmag) * layer.diag_sign
        )
        return lower, upper

    def linear_matrix(self, i: int) -> np.ndarray:
        lower, upper = self.linear_factors(self.layers[i])
        return lower.data @ upper.data

    def _shift(self, layer, u):
        """``g(u)`` and ``g'(u)`` for a batch ``u`` of shape (N, floor(d/2))."""
        t = ad.tanh(u)
        alpha = ad.as_tensor(layer.alpha)
        power = t
        g = alpha[0] * power
        dg = alpha[0] * 1.0
        for r in range(2, self.degree + 1):
            dg = dg + alpha[r - 1] * (float(r) * power)
            power = power * t
            g = g + alpha[r - 1] * power
        dg = dg * (1.0 - t * t)
        return g, dg

    def _couple(self, layer, z, sign: float):
        h1, h2 = self.split
        if h2 == 0:
            return z
        g, _ = self._shift(layer, z[:, :h2])
        z2 = z[:, h1:] + g if sign > 0 else z[:, h1:] - g
        return ad.concat([z[:, :h1], z2], axis=1)

    # -- maps -------------------------------------------------------------------
    def _as_batch(self, x):
        xv = ad.value(x)
        if xv.shape[-1] != self.dim or xv.ndim not in (1, 2):
            raise ValueError(f"expected points of dimension {self.dim}, got shape {xv.shape}")
        single = xv.ndim == 1
        xt = ad.as_tensor(x)
        return (xt.reshape(1, self.dim) if single else xt), single

    def _finish(self, out: Tensor, single: bool, *inputs):
        if single:
            out = out.reshape(self.dim)
        return out if (self.traced or _is_traced(*inputs)) else np.array(out.data)

    def forward(self, x):
        """``phi(x)`` for a point (d,) or a batch (N, d)."""
        z, single = self._as_batch(x)
        for layer in self.layers:
            lower, upper = self.linear_factors(layer)
            z = (z @ upper.T) @ lower.T
            z = self._couple(layer, z, +1.0)
        return self._finish(z, single, x)

    def inverse(self, y):
        """``phi^{-1}(y)``: subtract the shift, then two triangular solves."""
        x, single = self._as_batch(y)
        for layer in reversed(self.layers):
            x = self._couple(layer, x, -1.0)
            lower, upper = self.linear_factors(layer)
            w = ad.solve_triangular(lower, x.T, lower=True, unit_diagonal=True)
            x = ad.solve_triangular(upper, w, lower=False).T
        return self._finish(x, single, y)

    def log_abs_det(self):
        """``log|det D_x phi|``, the same for every ``x``."""
        total = ad.as_tensor(0.0)
        for layer in self.layers:
            total = total + ad.as_tensor(layer.diag_logmag).sum()
        return total if self.traced else float(total.data)

    def log_density(self, x):
        """Log-density of the pushforward of N(0, I) under ``phi^{-1}``."""
        z, single = self._as_batch(x)
        z = ad.as_tensor(self.forward(z))
        out = -0.5 * (z * z).sum(axis=1) - 0.5 * self.dim * LOG_2PI + self.log_abs_det()
        if single:
            out = out.reshape(())
        if self.traced or _is_traced(x):
            return out
        return float(out.data) if single else np.array(out.data)

    def sample(self, count: int, seed=None) -> np.ndarray:
        if count < 0:
            raise ValueError("count must be nonnegative")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        z = rng.standard_normal((count, self.dim))
        if count == 0:
            return z
        return ad.value(self.inverse(z))

    # -- differentials ------------------------------------------------------------
    def forward_with_tangent(self, x, tangents):
        """``phi(x)`` and ``D_x phi @ tangents`` for a single point.

        ``tangents`` has shape (d, k); each column is pushed forward.
        """
        h1, h2 = self.split
        z = ad.as_tensor(x).reshape(1, self.dim)
        w = ad.as_tensor(tangents)
        for layer in self.layers:
            lower, upper = self.linear_factors(layer)
            z = (z @ upper.T) @ lower.T
            w = lower @ (upper @ w)
            if h2:
                g, dg = self._shift(layer, z[:, :h2])
                z = ad.concat([z[:, :h1], z[:, h1:] + g], axis=1)
                w = ad.concat([w[:h1], w[h1:] + dg.reshape(h2, 1) * w[:h2]], axis=0)
        z = z.reshape(self.dim)
        if self.traced or _is_traced(x, tangents):
            return z, w
        return np.array(z.data), np.array(w.data)

    def inverse_with_tangent(self, y, tangents):
        """``phi^{-1}(y)`` and ``D_y phi^{-1} @ tangents`` for a single point."""
        h1, h2 = self.split
        x = ad.as_tensor(y).reshape(1, self.dim)
        w = ad.as_tensor(tangents)
        for layer in reversed(self.layers):
            if h2:
                g, dg = self._shift(layer, x[:, :h2])
                x = ad.concat([x[:, :h1], x[:, h1:] - g], axis=1)
                w = ad.concat([w[:h1], w[h1:] - dg.reshape(h2, 1) * w[:h2]], axis=0)
            lower, upper = self.linear_factors(layer)
            x = ad.solve_triangular(upper, ad.solve_triangular(lower, x.T, True, True), False).T
            w = ad.solve_triangular(upper, ad.solve_triangular(lower, w, True, True), False)
        x = x.reshape(self.dim)
        if self.traced or _is_traced(y, tangents):
            return x, w
        return np.array(x.data), np.array(w.data)

    def jacobian_at(self, x):
        """``D_x phi`` as a d x d matrix (forward-mode with the identity seed)."""
        return self.forward_with_tangent(x, np.eye(self.dim))[1]

    def inverse_jacobian_at(self, y):
        """``D_y phi^{-1}`` as a d x d matrix."""
        return self.inverse_with_tangent(y, np.eye(self.dim))[1]

    # -- serialization -----------------------------------------------------------
    def to_dict(self) -> dict:
        m_lo, m_up, _ = self._masks
        layers = []
        for layer in self.layers:
            layers.append(
                {
                    "lower": (ad.value(layer.lower) * m_lo).tolist(),
                    "upper_offdiag": (ad.value(layer.upper_offdiag) * m_up).tolist(),
                    "upper_diag_sign": ad.value(layer.diag_sign).tolist(),
                    "upper_diag_logmag": ad.value(layer.diag_logmag).tolist(),
                    "alpha": ad.value(layer.alpha).tolist(),
                }
            )
        return {
            "version": CHECKPOINT_VERSION,
            "dim": self.dim,
            "L": self.n_layers,
            "degree": self.degree,
            "layers": layers,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FlowModel":
        version = doc.get("version")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"flow checkpoint version {version!r} found, {CHECKPOINT_VERSION} expected"
            )
        try:
            dim, degree = int(doc["dim"]), int(doc["degree"])
            layers = []
            for ld in doc["layers"]:
                alpha = np.array(ld["alpha"], dtype=np.float64).reshape(degree, dim // 2)
                layers.append(
                    FlowLayer(
                        lower=np.array(ld["lower"], dtype=np.float64),
                        upper_offdiag=np.array(ld["upper_offdiag"], dtype=np.float64),
                        diag_sign=np.array(ld["upper_diag_sign"], dtype=np.float64),
                        diag_logmag=np.array(ld["upper_diag_logmag"], dtype=np.float64),
                        alpha=alpha,
                    )
                )
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"malformed flow checkpoint: {exc}") from exc
        if len(layers) != int(doc["L"]):
            raise CheckpointError("layer count does not match 'L'")
        return cls(layers, dim, degree)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "FlowModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


class CheckpointError(ValueError):
    """A checkpoint document is unreadable or has an unexpected version."""


def _lu_nopivot(a: np.ndarray):
    n = a.shape[0]
    lower, upper = np.eye(n), np.array(a, dtype=np.float64)
    for k in range(n - 1):
        if upper[k, k] == 0.0:
            raise ValueError("matrix has no LU factorization without pivoting")
        f = upper[k + 1 :, k] / upper[k, k]
        lower[k + 1 :, k] = f
        upper[k + 1 :, :] -= np.outer(f, upper[k])
    return lower, np.triu(upper)


def tanh_power_derivative_sup(r: int) -> float:
    """``sup_{t in [0,1]} r t^(r-1) (1 - t^2)``, the largest slope of ``tanh(u)^r``."""
    if r < 1:
        raise ValueError("r must be a positive integer")
    if r == 1:
        return 1.0
    return 2.0 * r / (r + 1.0) * ((r - 1.0) / (r + 1.0)) ** ((r - 1.0) / 2.0)
