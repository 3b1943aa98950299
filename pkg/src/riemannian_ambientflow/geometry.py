"""Pullback of the Euclidean structure through a flow.

With ``phi`` a global diffeomorphism of R^d, every mapping has a closed form:
points are sent to latent space by ``phi``, handled with Euclidean rules there,
and brought back with ``phi^{-1}``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flow import FlowModel


@dataclass(frozen=True)
class PullbackGeometry:
    flow: FlowModel

    @property
    def dim(self) -> int:
        return self.flow.dim

    def distance(self, x, y):
        """``||phi(x) - phi(y)||``; broadcasts over leading batch axes."""
        return np.linalg.norm(self.flow.forward(x) - self.flow.forward(y), axis=-1)

    def geodesic(self, x, y, t):
        """Point(s) on the geodesic from ``x`` to ``y`` at time(s) ``t``.

        A scalar ``t`` gives a point; an array of times gives one row per time.
        """
        t = np.asarray(t, dtype=np.float64)
        if np.any((t < 0.0) | (t > 1.0)):
            raise ValueError("geodesic time must lie in [0, 1]")
        zx, zy = self.flow.forward(np.asarray(x)), self.flow.forward(np.asarray(y))
        z = (1.0 - t)[..., None] * zx + t[..., None] * zy
        out = self.flow.inverse(z.reshape(-1, self.dim))
        return out.reshape(z.shape)

    def exp_map(self, x, v):
        """``phi^{-1}(phi(x) + D_x phi [v])``; ``v`` may be (d,) or (k, d)."""
        v = np.asarray(v, dtype=np.float64)
        z, J = self.flow.forward_with_tangent(np.asarray(x, dtype=np.float64), np.eye(self.dim))
        return self.flow.inverse(z + v @ J.T)

    def log_map(self, x, y):
        """``D_{phi(x)} phi^{-1} [phi(y) - phi(x)]`` with the Jacobian at ``x``
        assembled once and solved against every difference."""
        z, J = self.flow.forward_with_tangent(np.asarray(x, dtype=np.float64), np.eye(self.dim))
        diff = self.flow.forward(np.asarray(y, dtype=np.float64)) - z
        try:
            out = np.linalg.solve(J, np.atleast_2d(diff).T).T
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("flow differential is singular at the base point") from exc
        return out.reshape(diff.shape)

    def barycenter(self, points):
        """Minimizer of the summed squared distances: ``phi^{-1}(mean phi(x_i))``."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if pts.shape[0] == 0:
            raise ValueError("barycenter of an empty batch")
        if pts.shape[0] == 1:
            return pts[0].copy()
        return self.flow.inverse(self.flow.forward(pts).mean(axis=0))

    def sum_sq_distance(self, x, points) -> float:
        return float(np.sum(self.distance(np.asarray(x)[None], np.asarray(points)) ** 2))
