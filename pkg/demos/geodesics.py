"""Straight lines versus geodesics under a random flow's pullback metric.

Run with ``python3 demos/geodesics.py``.
"""

import numpy as np

from riemannian_ambientflow import FlowModel, PullbackGeometry

flow = FlowModel.random(2, 3, seed=4)
geo = PullbackGeometry(flow)

a, b = np.array([-1.5, 0.5]), np.array([1.2, -0.8])
print(f"euclidean distance {np.linalg.norm(a - b):.4f}, pullback distance {geo.distance(a, b):.4f}")

# geodesics bend: the midpoint of the curve is generally not the chord midpoint
for t in np.linspace(0, 1, 5):
    print(f"t={t:.2f}  geodesic {np.round(geo.geodesic(a, b, t), 4)}  chord {np.round((1 - t) * a + t * b, 4)}")

# exp undoes log
v = geo.log_map(a, b)
print("exp(log) error", np.abs(geo.exp_map(a, v) - b).max())

pts = flow.sample(200, seed=0)
centre = geo.barycenter(pts)
print("barycenter", np.round(centre, 4), "vs euclidean mean", np.round(pts.mean(axis=0), 4))
