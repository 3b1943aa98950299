"""Gaussian-head conditional density ``q(x | y)`` used as the variational posterior.

A small residual network maps a measurement to a mean and diagonal
log-variances in the latent space of a (usually frozen identity) flow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .flow import FlowModel

LOG_2PI = math.log(2.0 * math.pi)
PARAM_NAMES = ("embed_w", "embed_b", "hidden_w", "hidden_b", "out_w", "out_b", "head_w", "head_b")


@dataclass
class PosteriorModel:
    params: dict
    diffeo: FlowModel
    train_diffeo: bool = False

    @property
    def signal_dim(self) -> int:
        return self.diffeo.dim

    @property
    def measurement_dim(self) -> int:
        return ad.value(self.params["embed_w"]).shape[1]

    @classmethod
    def create(cls, measurement_dim: int, signal_dim: int, embed_dim: int, hidden_width: int, seed=None,
               diffeo: FlowModel | None = None) -> "PosteriorModel":
        """Random embedding and residual weights; zero head, so initially
        ``m(y) = 0`` and ``Sigma(y) = I``."""
        rng = np.random.default_rng(seed)

        def dense(n_out, n_in):
            return rng.normal(0.0, 1.0 / math.sqrt(n_in), (n_out, n_in))

        params = {
            "embed_w": dense(embed_dim, measurement_dim),
            "embed_b": np.zeros(embed_dim),
            "hidden_w": dense(hidden_width, embed_dim),
            "hidden_b": np.zeros(hidden_width),
            "out_w": dense(embed_dim, hidden_width),
            "out_b": np.zeros(embed_dim),
            "head_w": np.zeros((2 * signal_dim, embed_dim)),
            "head_b": np.zeros(2 * signal_dim),
        }
        return cls(params, diffeo if diffeo is not None else FlowModel.identity(signal_dim, 1))

    def parameters(self) -> list:
        out = [self.params[k] for k in PARAM_NAMES]
        if self.train_diffeo:
            out += self.diffeo.parameters()
        return out

    def with_parameters(self, values) -> "PosteriorModel":
        values = list(values)
        params = dict(zip(PARAM_NAMES, values[: len(PARAM_NAMES)]))
        diffeo = self.diffeo
        if self.train_diffeo:
            diffeo = diffeo.with_parameters(values[len(PARAM_NAMES):])
        return PosteriorModel(params, diffeo, self.train_diffeo)

    def parameter_count(self) -> int:
        return int(sum(ad.value(p).size for p in self.parameters()))

    def moments(self, y):
        """Mean and log-variance for a batch of measurements (B, m)."""
        p = self.params
        yt = ad.as_tensor(y)
        if yt.shape[-1] != self.measurement_dim:
            raise ValueError(f"measurements must have {self.measurement_dim} entries, got {yt.shape}")
        h = yt @ ad.as_tensor(p["embed_w"]).T + p["embed_b"]
        r = ad.tanh(h @ ad.as_tensor(p["hidden_w"]).T + p["hidden_b"])
        h = h + r @ ad.as_tensor(p["out_w"]).T + p["out_b"]
        out = h @ ad.as_tensor(p["head_w"]).T + p["head_b"]
        d = self.signal_dim
        return out[..., :d], out[..., d:]

    def sample(self, y, count: int, seed=None, return_log_density: bool = False):
        """Reparametrized draws ``phi^{-1}(m(y) + exp(logvar/2) * xi)``.

        ``y`` has shape (B, m); the result has shape (B, count, d).  With
        ``return_log_density`` the log-density of every draw is returned too,
        computed from the noise in closed form.
        """
        if count < 1:
            raise ValueError("count must be at least 1")
        single = np.ndim(ad.value(y)) == 1
        yb = ad.as_tensor(y).reshape(1, -1) if single else ad.as_tensor(y)
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        mean, logvar = self.moments(yb)
        B, d = mean.shape
        xi = rng.standard_normal((B, count, d))
        z = mean.reshape(B, 1, d) + ad.exp(logvar * 0.5).reshape(B, 1, d) * xi
        x = ad.as_tensor(self.diffeo.inverse(z.reshape(B * count, d))).reshape(B, count, d)
        if single:
            x = x.reshape(count, d)
        traced = any(isinstance(t, ad.Tensor) for t in self.parameters()) or isinstance(y, ad.Tensor)
        if not return_log_density:
            return x if traced else x.data
        logq = (
            -0.5 * np.sum(xi * xi, axis=-1)
            - 0.5 * logvar.sum(axis=-1).reshape(B, 1)
            - 0.5 * d * LOG_2PI
            + self.diffeo.log_abs_det()
        )
        if single:
            logq = logq.reshape(count)
        return (x, logq) if traced else (x.data, logq.data)

    def log_density(self, x, y):
        """``log q(x | y)`` for points (B, d) paired with measurements (B, m),
        or one point with one measurement."""
        single = np.ndim(ad.value(x)) == 1
        xb = ad.as_tensor(x).reshape(1, -1) if single else ad.as_tensor(x)
        yb = ad.as_tensor(y).reshape(1, -1) if single else ad.as_tensor(y)
        mean, logvar = self.moments(yb)
        z = ad.as_tensor(self.diffeo.forward(xb))
        r = z - mean
        d = self.signal_dim
        out = (
            -0.5 * (r * r * ad.exp(-logvar)).sum(axis=-1)
            - 0.5 * logvar.sum(axis=-1)
            - 0.5 * d * LOG_2PI
            + self.diffeo.log_abs_det()
        )
        traced = any(isinstance(t, ad.Tensor) for t in (x, y, *self.parameters()))
        if single:
            out = out.reshape(())
        if traced:
            return out
        return float(out.data) if single else out.data

    def to_dict(self) -> dict:
        return {
            "params": {k: ad.value(v).tolist() for k, v in self.params.items()},
            "diffeo": self.diffeo.to_dict(),
            "train_diffeo": self.train_diffeo,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PosteriorModel":
        params = {k: np.asarray(doc["params"][k], dtype=np.float64) for k in PARAM_NAMES}
        return cls(params, FlowModel.from_dict(doc["diffeo"]), bool(doc.get("train_diffeo", False)))


def build_sinusoid_posterior(seed=0) -> PosteriorModel:
    """R^3 -> R^10 embedding, one residual block of width 8, head to 2 x 3."""
    return PosteriorModel.create(3, 3, 10, 8, seed)


def build_mnist_posterior(seed=0) -> PosteriorModel:
    return PosteriorModel.create(196, 196, 256, 256, seed)
