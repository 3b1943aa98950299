"""Training objective and optimizer loop.

The loss is ``-VLB + lam * ||D_0 phi^{-1}||_F + mu * NLL(clean references)``,
where the VLB is an importance-weighted bound on the log-likelihood of the
corrupted measurements under the flow prior, estimated with samples from the
variational posterior.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .corruption import CorruptionModel, Dataset
from .flow import FlowModel
from .posterior import PosteriorModel

log = logging.getLogger(__name__)

LOG_WEIGHT_FLOOR = -745.0
TRAIN_CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Raised when the loss becomes non-finite; ``state`` holds the last good state."""

    def __init__(self, message, state):
        super().__init__(message)
        self.state = state


@dataclass
class TrainConfig:
    vlb_samples: int = 10
    lam: float = 0.1
    mu: float = 1.0
    learning_rate: float = 1e-3
    iterations: int = 500
    epochs: int | None = None
    batch_size: int | None = None
    seed: int = 0
    checkpoint_every: int = 0
    clip_norm: float = 100.0

    def __post_init__(self):
        if self.vlb_samples < 1:
            raise ValueError("vlb_samples must be at least 1")
        if self.lam < 0 or self.mu < 0:
            raise ValueError("lam and mu must be nonnegative")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")


class Adam:
    def __init__(self, shapes, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            out.append(p - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return out

    def to_dict(self):
        return {"t": self.t, "m": [a.tolist() for a in self.m], "v": [a.tolist() for a in self.v],
                "lr": self.lr, "betas": [self.beta1, self.beta2], "eps": self.eps}

    @classmethod
    def from_dict(cls, doc):
        m = [np.asarray(a, dtype=np.float64) for a in doc["m"]]
        opt = cls([a.shape for a in m], doc["lr"], *doc["betas"], doc["eps"])
        opt.m, opt.v, opt.t = m, [np.asarray(a, dtype=np.float64) for a in doc["v"]], int(doc["t"])
        return opt


# -- loss terms -------------------------------------------------------------------

def vlb_loss(prior: FlowModel, posterior: PosteriorModel, corruption: CorruptionModel, y_batch,
             M: int, seed=None, diagnostics: dict | None = None):
    """Importance-weighted lower bound averaged over the batch.

    Returns a tensor if any model parameter is traced, otherwise a float.
    Non-finite log-weights are floored at -745; the number of floored weights
    is added to ``diagnostics['floored']`` when a dict is supplied.
    """
    if M < 1:
        raise ValueError("M must be at least 1")
    y = np.atleast_2d(np.asarray(y_batch, dtype=np.float64))
    if y.shape[0] == 0:
        raise ValueError("empty measurement batch")
    B, d = y.shape[0], prior.dim
    x, logq = posterior.sample(y, M, seed, return_log_density=True)
    x, logq = ad.as_tensor(x), ad.as_tensor(logq)
    logp = ad.as_tensor(prior.log_density(x.reshape(B * M, d))).reshape(B, M)
    residual = y.reshape(B, 1, -1) - corruption.operator.apply_tensor(x)
    lnoise = corruption.noise_log_density(residual)
    weights, floored = ad.floor_nonfinite(logp + lnoise - logq, LOG_WEIGHT_FLOOR)
    if diagnostics is not None:
        diagnostics["floored"] = diagnostics.get("floored", 0) + floored
    bound = (ad.logsumexp(weights, axis=1) - math.log(M)).mean()
    return bound if isinstance(bound, ad.Tensor) and (prior.traced or _traced(posterior)) else float(ad.value(bound))


def _traced(posterior: PosteriorModel) -> bool:
    return any(isinstance(p, ad.Tensor) for p in posterior.parameters())


def lowrank_penalty(prior: FlowModel):
    """Frobenius norm of the differential of the inverse flow at the origin."""
    _, jinv = prior.inverse_with_tangent(np.zeros(prior.dim), np.eye(prior.dim))
    if isinstance(jinv, ad.Tensor):
        return ad.sqrt((jinv * jinv).sum())
    return float(np.linalg.norm(jinv, "fro"))


def reference_nll(prior: FlowModel, clean_batch):
    """Mean negative log-density of clean reference points (0 if there are none)."""
    x = np.asarray(clean_batch, dtype=np.float64)
    if x.size == 0:
        log.warning("empty clean reference set; reference term disabled")
        return 0.0
    return -ad.as_tensor(prior.log_density(np.atleast_2d(x))).mean() if prior.traced else -float(
        np.mean(prior.log_density(np.atleast_2d(x)))
    )


def loss_terms(prior, posterior, corruption, y_batch, clean_batch, config: TrainConfig, seed=None,
               diagnostics=None):
    """``(total, vlb, lowrank, refnll)``; weights are applied only inside ``total``."""
    vlb = vlb_loss(prior, posterior, corruption, y_batch, config.vlb_samples, seed, diagnostics)
    low = lowrank_penalty(prior) if config.lam > 0 else 0.0
    ref = reference_nll(prior, clean_batch) if config.mu > 0 else 0.0
    total = -1.0 * ad.as_tensor(vlb) + config.lam * ad.as_tensor(low) + config.mu * ad.as_tensor(ref)
    return total, vlb, low, ref


# -- state and loop -------------------------------------------------------------------

@dataclass
class TrainState:
    prior: FlowModel
    posterior: PosteriorModel
    optimizer: Adam
    step: int = 0
    history: list = field(default_factory=list)
    rng_state: dict | None = None
    floored_weights: int = 0

    @classmethod
    def initial(cls, prior: FlowModel, posterior: PosteriorModel, config: TrainConfig) -> "TrainState":
        shapes = [ad.value(p).shape for p in prior.parameters() + posterior.parameters()]
        return cls(prior, posterior, Adam(shapes, config.learning_rate))

    def to_dict(self, config: TrainConfig | None = None) -> dict:
        return {
            "version": TRAIN_CHECKPOINT_VERSION,
            "step": self.step,
            "flow": self.prior.to_dict(),
            "posterior": self.posterior.to_dict(),
            "adam": self.optimizer.to_dict(),
            "config": asdict(config) if config is not None else None,
            "rng_state": self.rng_state,
            "floored_weights": self.floored_weights,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainState":
        if doc.get("version") != TRAIN_CHECKPOINT_VERSION:
            raise ValueError(
                f"training checkpoint version {doc.get('version')!r} found, {TRAIN_CHECKPOINT_VERSION} expected"
            )
        return cls(
            FlowModel.from_dict(doc["flow"]),
            PosteriorModel.from_dict(doc["posterior"]),
            Adam.from_dict(doc["adam"]),
            int(doc["step"]),
            rng_state=doc.get("rng_state"),
            floored_weights=int(doc.get("floored_weights", 0)),
        )

    def save(self, path, config: TrainConfig | None = None) -> None:
        Path(path).write_text(json.dumps(self.to_dict(config)))

    @classmethod
    def load(cls, path) -> "TrainState":
        return cls.from_dict(json.loads(Path(path).read_text()))


def write_loss_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "vlb", "lowrank", "refnll", "total"])
        for row in history:
            w.writerow([row["step"], repr(row["vlb"]), repr(row["lowrank"]), repr(row["refnll"]), repr(row["total"])])


def _global_clip(grads, max_norm):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm and norm > max_norm:
        grads = [g * (max_norm / norm) for g in grads]
    return grads, norm


def train_step(state: TrainState, config: TrainConfig, y_batch, clean, corruption, rng) -> dict:
    n_prior = len(state.prior.parameters())
    leaves = [ad.Tensor(ad.value(p)) for p in state.prior.parameters() + state.posterior.parameters()]
    diag: dict = {}
    with ad.Tape() as tape:
        tape.watch(*leaves)
        prior = state.prior.with_parameters(leaves[:n_prior])
        posterior = state.posterior.with_parameters(leaves[n_prior:])
        total, vlb, low, ref = loss_terms(prior, posterior, corruption, y_batch, clean, config, rng, diag)
    row = {
        "step": state.step + 1,
        "vlb": float(ad.value(vlb)),
        "lowrank": float(ad.value(low)),
        "refnll": float(ad.value(ref)),
        "total": float(ad.value(total)),
    }
    if not math.isfinite(row["total"]):
        raise TrainingDiverged(f"non-finite loss at step {row['step']}", state)
    grads, gnorm = _global_clip(tape.gradient(total, leaves), config.clip_norm)
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise TrainingDiverged(f"non-finite gradient at step {row['step']}", state)
    new = state.optimizer.step([p.data for p in leaves], grads)
    state.prior = state.prior.with_parameters(new[:n_prior])
    state.posterior = state.posterior.with_parameters(new[n_prior:])
    state.step += 1
    state.floored_weights += diag.get("floored", 0)
    row["grad_norm"] = gnorm
    state.history.append(row)
    return row


def train(config: TrainConfig, dataset: Dataset, corruption: CorruptionModel, state: TrainState,
          checkpoint_dir=None, callback=None) -> TrainState:
    """Run Adam on the full loss.

    With ``batch_size`` unset every step uses the whole data set and
    ``iterations`` steps are taken; otherwise ``epochs`` passes over shuffled
    mini-batches are made (or ``iterations`` steps if ``epochs`` is unset).
    """
    rng = np.random.default_rng(config.seed)
    if state.rng_state is not None:
        rng.bit_generator.state = state.rng_state
    y_all = np.asarray(dataset.corrupted, dtype=np.float64)
    clean = dataset.clean_reference
    n = len(y_all)
    if n == 0:
        raise ValueError("training needs at least one corrupted sample")
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)

    def batches():
        if config.batch_size is None or config.batch_size >= n:
            full = config.epochs if config.batch_size is not None and config.epochs is not None else config.iterations
            for _ in range(full):
                yield y_all
            return
        steps = 0
        n_epochs = config.epochs if config.epochs is not None else math.inf
        epoch = 0
        while epoch < n_epochs:
            order = rng.permutation(n)
            for i in range(0, n, config.batch_size):
                if config.epochs is None and steps >= config.iterations:
                    return
                steps += 1
                yield y_all[order[i : i + config.batch_size]]
            epoch += 1

    for y in batches():
        try:
            row = train_step(state, config, y, clean, corruption, rng)
        except TrainingDiverged:
            if ckpt is not None:
                state.save(ckpt / "last_good.json", config)
                write_loss_csv(state.history, ckpt / "loss.csv")
            raise
        state.rng_state = rng.bit_generator.state
        if callback is not None:
            callback(state, row)
        if ckpt is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
            state.save(ckpt / f"checkpoint_{state.step:06d}.json", config)
    if ckpt is not None:
        state.save(ckpt / "final.json", config)
        write_loss_csv(state.history, ckpt / "loss.csv")
    return state
