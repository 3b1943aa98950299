"""Measurement model ``y = A x + sigma n`` and the data sets used with it.

Operators act on batches of flattened signals (rows).  Each exposes a dense
matrix as well, which is what the training losses differentiate through.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad

LOG_2PI = math.log(2.0 * math.pi)


class LinearOperator:
    """Base class; subclasses provide ``matrix`` and may override the
    matrix-free ``apply``/``adjoint``."""

    matrix: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def apply(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.shape[1]:
            raise ValueError(f"operator expects signals of size {self.shape[1]}, got {x.shape}")
        return x @ self.matrix.T

    def adjoint(self, y):
        y = np.asarray(y, dtype=np.float64)
        if y.shape[-1] != self.shape[0]:
            raise ValueError(f"adjoint expects measurements of size {self.shape[0]}, got {y.shape}")
        return y @ self.matrix

    def apply_tensor(self, x):
        """Differentiable application to a batch tensor."""
        return ad.matmul(x, self.matrix.T)

    def to_dict(self) -> dict:
        return {"kind": "matrix", "matrix": self.matrix.tolist()}


class MatrixOperator(LinearOperator):
    def __init__(self, matrix):
        self.matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))


def gaussian_kernel_1d(size: int = 9, sigma: float = 1.5) -> np.ndarray:
    """Sampled, unit-sum Gaussian taps centred on the middle tap."""
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def _reflect_conv_matrix(n: int, kernel: np.ndarray) -> np.ndarray:
    """Matrix of 1-d correlation with half-sample symmetric (reflect) padding."""
    half = len(kernel) // 2
    out = np.zeros((n, n))
    for i in range(n):
        for j, w in enumerate(kernel):
            k = i + j - half
            # reflect about the half-sample boundaries until inside
            while k < 0 or k >= n:
                k = -k - 1 if k < 0 else 2 * n - k - 1
            out[i, k] += w
    return out


class GaussianBlur(LinearOperator):
    """Separable Gaussian blur of ``height x width`` images, reflect boundary."""

    def __init__(self, height: int, width: int, kernel_size: int = 9, sigma: float = 1.5):
        self.height, self.width = height, width
        self.kernel_size, self.sigma = kernel_size, sigma
        k = gaussian_kernel_1d(kernel_size, sigma)
        self.rows = _reflect_conv_matrix(height, k)
        self.cols = _reflect_conv_matrix(width, k)
        self.matrix = np.kron(self.rows, self.cols)

    def _images(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.height * self.width:
            raise ValueError(f"blur expects {self.height * self.width} pixels, got {x.shape}")
        return x.reshape(x.shape[:-1] + (self.height, self.width))

    def apply(self, x):
        img = self._images(x)
        out = self.rows @ img @ self.cols.T
        return out.reshape(img.shape[:-2] + (-1,))

    def adjoint(self, y):
        img = self._images(y)
        out = self.rows.T @ img @ self.cols
        return out.reshape(img.shape[:-2] + (-1,))

    def to_dict(self) -> dict:
        return {
            "kind": "blur",
            "height": self.height,
            "width": self.width,
            "kernel_size": self.kernel_size,
            "sigma": self.sigma,
        }


def operator_from_dict(doc: dict) -> LinearOperator:
    kind = doc.get("kind")
    if kind == "matrix":
        return MatrixOperator(doc["matrix"])
    if kind == "identity":
        return MatrixOperator(np.eye(int(doc["dim"])))
    if kind == "blur":
        return GaussianBlur(
            int(doc["height"]), int(doc["width"]), int(doc.get("kernel_size", 9)), float(doc.get("sigma", 1.5))
        )
    raise ValueError(f"unknown operator kind {kind!r}")


def power_iteration_norm(apply, adjoint, dim: int, iters: int = 100, tol: float = 1e-10, seed=0) -> float:
    """Largest singular value of an operator from repeated ``A^T A`` products."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = adjoint(apply(v))
        new = float(np.linalg.norm(w))
        if new == 0.0:
            return 0.0
        v = w / new
        if abs(new - lam) <= tol * new:
            lam = new
            break
        lam = new
    return math.sqrt(lam)


@dataclass
class CorruptionModel:
    operator: LinearOperator
    noise_sigma: float

    def __post_init__(self):
        if not self.noise_sigma > 0.0:
            raise ValueError("noise_sigma must be positive")

    @property
    def signal_dim(self) -> int:
        return self.operator.shape[1]

    @property
    def measurement_dim(self) -> int:
        return self.operator.shape[0]

    def apply(self, x, seed=None, noiseless: bool = False):
        """``A x + sigma n`` with ``n ~ N(0, I)``, or ``A x`` when noiseless."""
        y = self.operator.apply(x)
        if noiseless:
            return y
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        return y + self.noise_sigma * rng.standard_normal(y.shape)

    def noise_log_density(self, residual):
        """Gaussian log-density of a residual (last axis is the measurement)."""
        m = self.measurement_dim
        s2 = self.noise_sigma**2
        const = -0.5 * m * (LOG_2PI + math.log(s2))
        if isinstance(residual, ad.Tensor):
            return (residual * residual).sum(axis=-1) * (-0.5 / s2) + const
        r = np.asarray(residual, dtype=np.float64)
        if r.shape[-1] != m:
            raise ValueError(f"residual must have {m} entries, got {r.shape}")
        return -0.5 * np.sum(r * r, axis=-1) / s2 + const

    def operator_norm(self, iters: int = 100) -> float:
        """``||A||`` by power iteration."""
        return power_iteration_norm(self.operator.apply, self.operator.adjoint, self.signal_dim, iters)

    def normal_operator_norm(self, iters: int = 100) -> float:
        """``||A^T A|| = ||A||^2``."""
        return self.operator_norm(iters) ** 2

    def to_dict(self) -> dict:
        return {"operator": self.operator.to_dict(), "noise_sigma": self.noise_sigma}

    @classmethod
    def from_dict(cls, doc: dict) -> "CorruptionModel":
        return cls(operator_from_dict(doc["operator"]), float(doc["noise_sigma"]))


# ---------------------------------------------------------------------------
# data sets


@dataclass
class Dataset:
    corrupted: np.ndarray
    clean_reference: np.ndarray
    ground_truth: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def save(self, directory) -> None:
        """JSON manifest plus one little-endian float64 block per array."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        blocks = {}
        for name in ("corrupted", "clean_reference", "ground_truth"):
            arr = getattr(self, name)
            if arr is None:
                continue
            fname = f"{name}.f64"
            np.ascontiguousarray(arr, dtype="<f8").tofile(directory / fname)
            blocks[name] = {"file": fname, "shape": list(arr.shape), "dtype": "<f8"}
        manifest = {"version": 1, "blocks": blocks, "meta": _jsonable(self.meta)}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))

    @classmethod
    def load(cls, directory) -> "Dataset":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        arrays = {}
        for name, blk in manifest["blocks"].items():
            raw = np.fromfile(directory / blk["file"], dtype="<f8")
            arrays[name] = raw.reshape(blk["shape"])
        meta = manifest.get("meta", {})
        return cls(
            arrays["corrupted"],
            arrays.get("clean_reference", np.zeros((0, arrays["corrupted"].shape[1]))),
            arrays.get("ground_truth"),
            meta,
        )


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_blocks(path_prefix, array: np.ndarray, meta: dict | None = None) -> None:
    """Write one array as ``<prefix>.f64`` plus ``<prefix>.json`` manifest."""
    prefix = Path(path_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(array, dtype="<f8")
    arr.tofile(prefix.with_suffix(".f64"))
    doc = {"file": prefix.with_suffix(".f64").name, "shape": list(arr.shape), "dtype": "<f8"}
    if meta:
        doc["meta"] = _jsonable(meta)
    prefix.with_suffix(".json").write_text(json.dumps(doc, indent=1))


def read_blocks(manifest_path) -> np.ndarray:
    manifest_path = Path(manifest_path)
    doc = json.loads(manifest_path.read_text())
    raw = np.fromfile(manifest_path.parent / doc["file"], dtype="<f8")
    return raw.reshape(doc["shape"])


# -- sinusoid -----------------------------------------------------------------

def sinusoid_curve(s) -> np.ndarray:
    """Curve ``s -> (s, sin 2s, 0, 0, 0)`` in R^5."""
    s = np.asarray(s, dtype=np.float64)
    out = np.zeros(s.shape + (5,))
    out[..., 0] = s
    out[..., 1] = np.sin(2.0 * s)
    return out


def make_sinusoid_dataset(n_corrupt: int = 1000, n_clean: int = 50, sigma: float = 0.1, seed=0):
    """Sinusoid data embedded in R^3 by a seeded Gaussian 3 x 5 matrix.

    The signal space is R^3; measurements are the embedded points plus
    Gaussian noise (``A = I``).  Returns ``(Dataset, CorruptionModel)``; with
    ``sigma == 0`` the points are noise-free and no noise model is returned.
    """
    if n_corrupt < 0 or n_clean < 0:
        raise ValueError("sample counts must be nonnegative")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    rng = np.random.default_rng(seed)
    embedding = rng.normal(0.0, math.sqrt(1.0 / 3.0), (3, 5))
    s_all = rng.uniform(-math.pi, math.pi, n_corrupt + n_clean)
    x_all = sinusoid_curve(s_all) @ embedding.T
    x_corrupt, x_clean = x_all[:n_corrupt], x_all[n_corrupt:]
    corruption = CorruptionModel(MatrixOperator(np.eye(3)), sigma) if sigma > 0 else None
    y = x_corrupt + sigma * rng.standard_normal(x_corrupt.shape)
    meta = {"kind": "sinusoid", "embedding": embedding, "seed": seed, "sigma": sigma}
    return Dataset(y, x_clean, x_corrupt, meta), corruption


def curve_distance(points, embedding, resolution: int = 20001) -> np.ndarray:
    """Distance of each point to the densely sampled embedded curve."""
    s = np.linspace(-math.pi, math.pi, resolution)
    curve = sinusoid_curve(s) @ np.asarray(embedding).T
    pts = np.atleast_2d(points)
    out = np.empty(len(pts))
    for i in range(0, len(pts), 256):
        chunk = pts[i : i + 256]
        d2 = ((chunk[:, None, :] - curve[None]) ** 2).sum(-1)
        out[i : i + 256] = np.sqrt(d2.min(axis=1))
    return out


# -- MNIST ----------------------------------------------------------------------

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049


class IdxFormatError(ValueError):
    pass


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    """Parse an IDX file of unsigned bytes (big-endian header)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header at byte offset {len(raw)}")
    (magic,) = struct.unpack(">I", raw[:4])
    if expected_magic is not None and magic != expected_magic:
        raise IdxFormatError(f"{path}: bad magic {magic:#010x} at byte offset 0, expected {expected_magic:#010x}")
    if magic >> 8 != 0x08:
        raise IdxFormatError(f"{path}: unsupported element type in magic {magic:#010x} at byte offset 0")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated dimension list at byte offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims)) if dims else 0
    if len(raw) < header + count:
        raise IdxFormatError(
            f"{path}: truncated payload at byte offset {len(raw)}, expected {header + count} bytes"
        )
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x0800 | arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def pool2x2(images: np.ndarray) -> np.ndarray:
    n, h, w = images.shape
    return images.reshape(n, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def load_mnist_idx(images_path, labels_path=None):
    """Images scaled to [0, 1] and average-pooled to 14 x 14, flattened to 196.

    Returns ``(images, labels)``; labels are ``None`` without a labels file.
    """
    imgs = read_idx(images_path, IDX_IMAGES_MAGIC).astype(np.float64) / 255.0
    if imgs.ndim != 3:
        raise IdxFormatError(f"{images_path}: image file must be 3-dimensional")
    pooled = pool2x2(imgs).reshape(len(imgs), -1)
    labels = None
    if labels_path is not None:
        labels = read_idx(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
        if len(labels) != len(pooled):
            raise IdxFormatError("image and label counts differ")
    return pooled, labels


def make_mnist_dataset(images: np.ndarray, n_train: int = 55000, n_clean: int = 100, sigma: float = 0.05,
                       kernel_size: int = 9, kernel_sigma: float = 1.5, seed=0, dequantize: bool = True):
    """Blurred, noisy 14 x 14 digits; ``n_clean`` of the sampled images double as
    clean references."""
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(images), size=min(n_train, len(images)), replace=False)
    x = np.array(images[idx], dtype=np.float64)
    if dequantize:
        x = x + rng.uniform(0.0, 1.0 / 256.0, x.shape)
    side = int(round(math.sqrt(x.shape[1])))
    corruption = CorruptionModel(GaussianBlur(side, side, kernel_size, kernel_sigma), sigma)
    y = corruption.apply(x, rng)
    meta = {"kind": "mnist14", "seed": seed, "sigma": sigma, "indices": idx}
    return Dataset(y, x[:n_clean].copy(), x, meta), corruption
