"""Run configurations: schema, validation and the shipped presets."""

from __future__ import annotations

import copy

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


_NUM = (int, float)
_OPT_INT = (int, type(None))
_OPT_NUM = (int, float, type(None))
_OPT_STR = (str, type(None))

SCHEMA = {
    "schema_version": int,
    "experiment": str,
    "seed": int,
    "dataset": {
        "kind": str,
        "n_corrupt": int,
        "n_clean": int,
        "sigma": _NUM,
        "path": _OPT_STR,
        "n_train": int,
        "kernel_size": int,
        "kernel_sigma": _NUM,
        "dequantize": bool,
    },
    "flow": {"n_layers": int, "degree": int},
    "posterior": {"embed_dim": int, "hidden_width": int},
    "train": {
        "vlb_samples": int,
        "lam": _NUM,
        "mu": _NUM,
        "learning_rate": _NUM,
        "iterations": int,
        "epochs": _OPT_INT,
        "batch_size": _OPT_INT,
        "checkpoint_every": int,
        "clip_norm": _NUM,
    },
    "rae": {"latent_dim": _OPT_INT, "epsilon": _OPT_NUM, "prior_samples": int},
    "inversion": {
        "alpha": _NUM,
        "max_iters": int,
        "select": str,
        "test_count": int,
        "tv_lambda": _NUM,
        "tv_step_scale": _NUM,
        "tv_iters": int,
    },
}

DATASET_KINDS = ("sinusoid", "mnist14", "file")

SINUSOID = {
    "schema_version": SCHEMA_VERSION,
    "experiment": "sinusoid",
    "seed": 0,
    "dataset": {"kind": "sinusoid", "n_corrupt": 1000, "n_clean": 50, "sigma": 0.1, "path": None},
    "flow": {"n_layers": 4, "degree": 3},
    "posterior": {"embed_dim": 10, "hidden_width": 8},
    "train": {
        "vlb_samples": 10,
        "lam": 0.1,
        "mu": 1.0,
        "learning_rate": 1e-3,
        "iterations": 500,
        "epochs": None,
        "batch_size": None,
        "checkpoint_every": 0,
        "clip_norm": 100.0,
    },
    "rae": {"latent_dim": 1, "epsilon": None, "prior_samples": 0},
}

MNIST14 = {
    "schema_version": SCHEMA_VERSION,
    "experiment": "mnist14",
    "seed": 0,
    "dataset": {
        "kind": "mnist14",
        "n_train": 55000,
        "n_clean": 100,
        "sigma": 0.05,
        "kernel_size": 9,
        "kernel_sigma": 1.5,
        "dequantize": True,
        "path": None,
    },
    "flow": {"n_layers": 6, "degree": 3},
    "posterior": {"embed_dim": 256, "hidden_width": 256},
    "train": {
        "vlb_samples": 10,
        "lam": 0.0,
        "mu": 100.0,
        "learning_rate": 1e-3,
        "iterations": 0,
        "epochs": 480,
        "batch_size": 250,
        "checkpoint_every": 1000,
        "clip_norm": 100.0,
    },
    "rae": {"latent_dim": 40, "epsilon": None, "prior_samples": 400},
    "inversion": {
        "alpha": 1e-2,
        "max_iters": 2000,
        "select": "best-mse",
        "test_count": 10,
        "tv_lambda": 8.0,
        "tv_step_scale": 0.2,
        "tv_iters": 500,
    },
}

PRESETS = {"sinusoid": SINUSOID, "mnist14": MNIST14}

# the smoke tier shrinks the MNIST run so the pipeline can be exercised quickly
MNIST_SMOKE_OVERRIDES = {
    "dataset": {"n_train": 500, "n_clean": 20},
    "flow": {"n_layers": 2},
    "posterior": {"embed_dim": 32, "hidden_width": 32},
    "train": {"epochs": 1, "batch_size": 250, "checkpoint_every": 0},
    "rae": {"latent_dim": 10, "prior_samples": 40},
    "inversion": {"max_iters": 50, "test_count": 2, "tv_iters": 20},
}


def preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return copy.deepcopy(PRESETS[name])


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(doc, schema=SCHEMA, path: str = "config") -> dict:
    """Check keys and value types against the schema; unknown keys are errors."""
    if not isinstance(doc, dict):
        raise ConfigError(path, "expected an object")
    for key, value in doc.items():
        sub = f"{path}.{key}"
        if key not in schema:
            raise ConfigError(sub, "unknown key")
        spec = schema[key]
        if isinstance(spec, dict):
            validate(value, spec, sub)
            continue
        types = spec if isinstance(spec, tuple) else (spec,)
        # bool is an int subclass; only accept it where bool is declared
        if isinstance(value, bool) and bool not in types:
            raise ConfigError(sub, f"expected {_names(types)}, got bool")
        if not isinstance(value, types):
            raise ConfigError(sub, f"expected {_names(types)}, got {type(value).__name__}")
    if path == "config":
        if doc.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ConfigError("config.schema_version", f"found {doc.get('schema_version')}, expected {SCHEMA_VERSION}")
        kind = doc.get("dataset", {}).get("kind")
        if kind is not None and kind not in DATASET_KINDS:
            raise ConfigError("config.dataset.kind", f"must be one of {DATASET_KINDS}")
        sel = doc.get("inversion", {}).get("select")
        if sel is not None and sel not in ("final", "best-mse"):
            raise ConfigError("config.inversion.select", "must be 'final' or 'best-mse'")
    return doc


def _names(types) -> str:
    return " or ".join("null" if t is type(None) else t.__name__ for t in types)
