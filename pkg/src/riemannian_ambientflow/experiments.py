"""End-to-end pipelines behind the presets."""

from __future__ import annotations

import logging
import os
import time
from pathlib import Path

import numpy as np

from .corruption import (
    CorruptionModel,
    Dataset,
    GaussianBlur,
    curve_distance,
    load_mnist_idx,
    make_mnist_dataset,
    make_sinusoid_dataset,
    sinusoid_curve,
)
from .flow import FlowModel
from .geometry import PullbackGeometry
from .inversion import invert, tv_reconstruct
from .metrics import verify_recoverability
from .posterior import PosteriorModel
from .rae import RAE, build_rae_from_samples
from .training import TrainConfig, TrainState, train

log = logging.getLogger(__name__)

MNIST_ENV = "RAF_MNIST_DIR"
MNIST_TRAIN_IMAGES = "train-images-idx3-ubyte"
MNIST_TEST_IMAGES = "t10k-images-idx3-ubyte"


def train_config(cfg: dict, seed: int | None = None) -> TrainConfig:
    t = dict(cfg["train"])
    return TrainConfig(seed=cfg["seed"] if seed is None else seed, **t)


def build_dataset(cfg: dict):
    ds = cfg["dataset"]
    kind = ds["kind"]
    if kind == "sinusoid":
        return make_sinusoid_dataset(ds["n_corrupt"], ds["n_clean"], ds["sigma"], cfg["seed"])
    if kind == "mnist14":
        images, _ = load_mnist_idx(mnist_path(ds.get("path"), MNIST_TRAIN_IMAGES))
        return make_mnist_dataset(
            images, ds["n_train"], ds["n_clean"], ds["sigma"], ds.get("kernel_size", 9),
            ds.get("kernel_sigma", 1.5), cfg["seed"], ds.get("dequantize", True),
        )
    if kind == "file":
        path = Path(ds["path"])
        dataset = Dataset.load(path)
        corruption = CorruptionModel.from_dict(dataset.meta["corruption"])
        return dataset, corruption
    raise ValueError(f"unknown dataset kind {kind!r}")


def mnist_path(directory, name: str) -> Path:
    root = directory or os.environ.get(MNIST_ENV)
    if not root:
        raise FileNotFoundError(f"MNIST directory not configured (set dataset.path or {MNIST_ENV})")
    path = Path(root) / name
    if not path.exists():
        raise FileNotFoundError(f"missing MNIST file: {path}")
    return path


def initial_state(cfg: dict, corruption: CorruptionModel, tc: TrainConfig) -> TrainState:
    d = corruption.signal_dim
    flow = FlowModel.initialize(d, cfg["flow"]["n_layers"], cfg["flow"]["degree"], seed=tc.seed)
    post = PosteriorModel.create(
        corruption.measurement_dim, d, cfg["posterior"]["embed_dim"], cfg["posterior"]["hidden_width"], seed=tc.seed + 1
    )
    return TrainState.initial(flow, post, tc)


def run_training(cfg: dict, out_dir=None, seed: int | None = None, overrides: dict | None = None):
    """Build data and models from a config and train.  Returns ``(state, dataset, corruption)``."""
    dataset, corruption = build_dataset(cfg)
    tc = train_config(cfg, seed)
    if overrides:
        tc = TrainConfig(**{**tc.__dict__, **overrides})
    state = initial_state(cfg, corruption, tc)
    ckpt = Path(out_dir) / "checkpoints" if out_dir is not None else None
    state = train(tc, dataset, corruption, state, checkpoint_dir=ckpt)
    return state, dataset, corruption


def sinusoid_curve_distance(prior: FlowModel, dataset: Dataset, latent_dim: int = 1, n_eval: int = 1000,
                            seed: int = 12345) -> tuple[float, RAE]:
    """Mean distance to the true curve of fresh noiseless curve points pushed
    through the RAE built from the clean references."""
    rae = build_rae_from_samples(PullbackGeometry(prior), dataset.clean_reference, latent_dim=latent_dim)
    emb = np.asarray(dataset.meta["embedding"])
    s = np.random.default_rng(seed).uniform(-np.pi, np.pi, n_eval)
    x = sinusoid_curve(s) @ emb.T
    return float(curve_distance(rae.project(x), emb).mean()), rae


def run_sinusoid(cfg: dict, seed: int | None = None, ablation: bool = True, out_dir=None) -> dict:
    """Train with the given config and, optionally, the ``mu = 0`` ablation.

    Returns a summary with the loss drop between steps 10 and the last step, the
    curve distances and the recoverability report.
    """
    t0 = time.time()
    state, dataset, corruption = run_training(cfg, out_dir, seed)
    hist = state.history
    first = hist[min(9, len(hist) - 1)]["total"]
    last = hist[-1]["total"]
    dist, rae = sinusoid_curve_distance(state.prior, dataset, cfg["rae"]["latent_dim"] or 1)
    report = verify_recoverability(state.prior, rae, dataset.ground_truth, corruption, seed=cfg["seed"])
    out = {
        "loss_step10": first,
        "loss_final": last,
        "relative_drop": (first - last) / abs(first),
        "curve_distance": dist,
        "recoverability": report.to_dict(),
        "seconds": time.time() - t0,
        "state": state,
    }
    if ablation:
        ab_state, _, _ = run_training(cfg, None, seed, overrides={"mu": 0.0})
        out["ablation_curve_distance"] = sinusoid_curve_distance(ab_state.prior, dataset, cfg["rae"]["latent_dim"] or 1)[0]
    return out


def run_mnist(cfg: dict, out_dir=None, test_images=None) -> dict:
    """Train, build the RAE from prior and reference samples, and compare RAE
    and TV reconstructions of blurred test digits by their best-iterate MSE."""
    state, dataset, corruption = run_training(cfg, out_dir)
    prior = state.prior
    rc = cfg["rae"]
    samples = np.vstack([prior.sample(rc["prior_samples"], cfg["seed"]), dataset.clean_reference])
    rae = build_rae_from_samples(PullbackGeometry(prior), samples, latent_dim=rc["latent_dim"])
    inv = cfg["inversion"]
    if test_images is None:
        test_images, _ = load_mnist_idx(mnist_path(cfg["dataset"].get("path"), MNIST_TEST_IMAGES))
    rng = np.random.default_rng(cfg["seed"] + 7)
    idx = rng.choice(len(test_images), size=inv["test_count"], replace=False)
    side = int(round(np.sqrt(corruption.signal_dim)))
    rae_mse, tv_mse = [], []
    tv_alpha = inv["tv_step_scale"] / corruption.operator_norm() ** 2
    for i in idx:
        x = test_images[i]
        y = corruption.apply(x, rng)
        res = invert(rae, corruption, y, inv["alpha"], inv["max_iters"], x_true=x, select=inv["select"])
        rae_mse.append(float(np.mean((res.signal - x) ** 2)))
        x_tv, _ = tv_reconstruct(corruption, y, (side, side), inv["tv_lambda"], tv_alpha, inv["tv_iters"],
                                 x_true=x, select=inv["select"])
        tv_mse.append(float(np.mean((x_tv - x) ** 2)))
    return {
        "rae_mse": float(np.mean(rae_mse)),
        "tv_mse": float(np.mean(tv_mse)),
        "per_image": {"rae": rae_mse, "tv": tv_mse},
        "test_indices": idx.tolist(),
        "state": state,
        "rae": rae,
    }
