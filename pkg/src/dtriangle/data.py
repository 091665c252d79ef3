"""Data ingestion: IDX image files, synthetic 2-D mixtures, batching."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .optim import stream

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxError(ValueError):
    """Base class for malformed IDX input."""


class BadMagicError(IdxError):
    pass


class TruncatedIdxError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


def _read_bytes(path: str) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path: str, expected_magic: int | None = None) -> np.ndarray:
    """Parse an unsigned-byte IDX file (plain or gzip) into a uint8 array."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise TruncatedIdxError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic >> 8 != 0x08 or (expected_magic is not None and magic != expected_magic):
        want = f"0x{expected_magic:08x}" if expected_magic is not None else "0x000008nn"
        raise BadMagicError(f"{path}: magic 0x{magic:08x}, expected {want}")
    ndim = magic & 0xFF
    if len(raw) < 4 + 4 * ndim:
        raise TruncatedIdxError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    count = int(np.prod(dims, dtype=np.int64))
    body = raw[4 + 4 * ndim :]
    if len(body) < count:
        raise TruncatedIdxError(f"{path}: expected {count} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=count).reshape(dims)


def write_idx(path: str, array: np.ndarray, compress: bool = False) -> None:
    """Write a uint8 array as IDX (gzip-compressed when ``compress``)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x0800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    payload = header + array.tobytes()
    if compress:
        payload = gzip.compress(payload, mtime=0)
    with open(path, "wb") as fh:
        fh.write(payload)


def bytes_to_signed(b: np.ndarray) -> np.ndarray:
    """Affine map of pixel bytes ``[0, 255]`` onto ``[-1, 1]``."""
    return 2.0 * np.asarray(b, dtype=np.float64) / 255.0 - 1.0


def downsample2(x: np.ndarray) -> np.ndarray:
    """2x2 mean pooling over the last two axes."""
    h, w = x.shape[-2:]
    x = x[..., : h - h % 2, : w - w % 2]
    return x.reshape(*x.shape[:-2], h // 2, 2, w // 2, 2).mean(axis=(-3, -1))


@dataclass
class DataSet:
    examples: np.ndarray
    labels: np.ndarray | None = None
    source: str = ""
    bounded: bool = True

    def __post_init__(self):
        self.examples = np.asarray(self.examples, dtype=np.float64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if len(self.labels) != len(self.examples):
                raise ValueError("labels length must match number of examples")
        if self.bounded and self.examples.size and (self.examples.min() < -1 or self.examples.max() > 1):
            raise ValueError("image data must lie in [-1, 1]")

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def signal_shape(self) -> tuple[int, ...]:
        return tuple(self.examples.shape[1:])

    def subset(self, idx) -> "DataSet":
        idx = np.asarray(idx)
        labels = None if self.labels is None else self.labels[idx]
        return DataSet(self.examples[idx], labels, self.source, self.bounded)

    def with_labels(self, keep) -> "DataSet":
        """Examples whose label is in ``keep``, original order preserved."""
        if self.labels is None:
            raise ValueError("dataset has no labels")
        return self.subset(np.flatnonzero(np.isin(self.labels, list(keep))))

    def per_class(self, k: int) -> "DataSet":
        """First ``k`` examples of every label, in original order."""
        if self.labels is None:
            raise ValueError("dataset has no labels")
        keep = np.zeros(len(self), dtype=bool)
        for c in np.unique(self.labels):
            keep[np.flatnonzero(self.labels == c)[:k]] = True
        return self.subset(np.flatnonzero(keep))


def load_idx(
    images_path: str,
    labels_path: str | None = None,
    limit: int | None = None,
    downsample: bool = False,
) -> DataSet:
    """Load IDX images (and labels) as ``[n, 1, H, W]`` values in ``[-1, 1]``."""
    imgs = read_idx(images_path, IMAGE_MAGIC)
    labels = None
    if labels_path is not None:
        labels = read_idx(labels_path, LABEL_MAGIC)
        if len(labels) != len(imgs):
            raise CountMismatchError(f"{len(imgs)} images but {len(labels)} labels")
    if limit is not None:
        imgs = imgs[:limit]
        labels = None if labels is None else labels[:limit]
    x = bytes_to_signed(imgs)[:, None, :, :]
    if downsample:
        x = downsample2(x)
    return DataSet(x, None if labels is None else labels.astype(np.int64), os.path.abspath(images_path))


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass
class Synthetic2D:
    kind: str = "gaussian_mixture"  # or "ring"
    means: tuple = ((-2.0, 0.0), (2.0, 0.0))
    weights: tuple = (0.5, 0.5)
    std: float = 0.3
    radius: float = 2.0

    def __post_init__(self):
        if self.kind not in ("gaussian_mixture", "ring"):
            raise ValueError(f"unknown synthetic kind {self.kind!r}")
        if self.std < 0:
            raise ValueError("std must be >= 0")
        if self.kind == "gaussian_mixture":
            w = np.asarray(self.weights, float)
            if len(w) != len(self.means) or np.any(w < 0) or not np.isclose(w.sum(), 1.0):
                raise ValueError("mixture weights must be nonnegative, one per mean, and sum to 1")


def sample_synthetic(spec: Synthetic2D, n: int, rng: np.random.Generator) -> DataSet:
    if n < 1:
        raise ValueError("n must be >= 1")
    if spec.kind == "ring":
        theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
        base = spec.radius * np.stack([np.cos(theta), np.sin(theta)], axis=1)
        labels = None
    else:
        means = np.asarray(spec.means, float)
        labels = rng.choice(len(means), size=n, p=np.asarray(spec.weights, float))
        base = means[labels]
    x = base + spec.std * rng.standard_normal(base.shape) if spec.std > 0 else base.copy()
    return DataSet(x, labels, f"synthetic:{spec.kind}", bounded=False)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return stream(seed, "data", epoch).permutation(n)


def batches(ds: DataSet, M: int, seed: int, epochs: int | None = None):
    """Yield shuffled index batches; each epoch is one permutation, last partial batch dropped."""
    n = len(ds)
    if M < 1:
        raise ValueError("batch size must be >= 1")
    if M > n:
        raise ValueError(f"batch size {M} exceeds dataset size {n}")
    epoch = 0
    while epochs is None or epoch < epochs:
        perm = epoch_permutation(n, seed, epoch)
        for j in range(n // M):
            yield perm[j * M : (j + 1) * M]
        epoch += 1


@dataclass
class BatchSource:
    """Random-access view of :func:`batches`: the batch for iteration ``t`` is a pure function of ``(seed, t)``."""

    examples: np.ndarray
    batch_size: int
    seed: int
    masks: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        n = len(self.examples)
        if n == 0:
            raise ValueError("dataset is empty")
        if self.batch_size < 1 or self.batch_size > n:
            raise ValueError(f"batch size {self.batch_size} invalid for dataset of size {n}")

    @property
    def batches_per_epoch(self) -> int:
        return len(self.examples) // self.batch_size

    def indices(self, t: int) -> np.ndarray:
        epoch, j = divmod(t, self.batches_per_epoch)
        perm = self._cache.get(epoch)
        if perm is None:
            self._cache.clear()
            perm = self._cache[epoch] = epoch_permutation(len(self.examples), self.seed, epoch)
        M = self.batch_size
        return perm[j * M : (j + 1) * M]

    def get_batch(self, t: int):
        idx = self.indices(t)
        mask = None if self.masks is None else self.masks[idx]
        return self.examples[idx], mask


# ---------------------------------------------------------------------------
# bundled MNIST subset
# ---------------------------------------------------------------------------


def _mlxtend_csv() -> str:
    import importlib.util

    spec = importlib.util.find_spec("mlxtend")
    if spec is None or not spec.submodule_search_locations:
        raise FileNotFoundError("set DTRI_MNIST_DIR to a directory with MNIST IDX files, or install mlxtend")
    path = os.path.join(spec.submodule_search_locations[0], "data", "data", "mnist_5k.csv.gz")
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return path


def materialize_mnist(out_dir: str) -> tuple[str, str]:
    """Return ``(images, labels)`` IDX paths for an MNIST sample.

    Uses ``$DTRI_MNIST_DIR/train-{images-idx3,labels-idx1}-ubyte[.gz]`` when
    set; otherwise writes IDX files for the 5,000-image MNIST sample shipped
    inside the ``mlxtend`` package (500 per digit) into ``out_dir``.
    """
    root = os.environ.get("DTRI_MNIST_DIR")
    if root:
        for suffix in ("", ".gz"):
            imgs = os.path.join(root, "train-images-idx3-ubyte" + suffix)
            lbls = os.path.join(root, "train-labels-idx1-ubyte" + suffix)
            if os.path.exists(imgs) and os.path.exists(lbls):
                return imgs, lbls
        raise FileNotFoundError(f"no MNIST IDX files in {root}")
    os.makedirs(out_dir, exist_ok=True)
    imgs = os.path.join(out_dir, "mnist5k-images-idx3-ubyte")
    lbls = os.path.join(out_dir, "mnist5k-labels-idx1-ubyte")
    if not (os.path.exists(imgs) and os.path.exists(lbls)):
        table = np.loadtxt(gzip.open(_mlxtend_csv()), delimiter=",", dtype=np.int64)
        write_idx(imgs, table[:, :-1].reshape(-1, 28, 28))
        write_idx(lbls, table[:, -1])
    return imgs, lbls
