"""Datasets: IDX (MNIST) reader/writer, class subsets, forget/retain splits, synthetic data."""

from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .errors import DataError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray  # float32 [n, d] in [0, 1]
    labels: np.ndarray  # int64 [n]
    source_id: str = ""

    def __post_init__(self):
        if self.images.ndim != 2 or self.images.shape[0] != self.labels.shape[0]:
            raise DataError(f"images {self.images.shape} / labels {self.labels.shape} mismatch")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def classes(self):
        return sorted(int(c) for c in np.unique(self.labels))

    def take(self, idx):
        idx = np.asarray(idx)
        return LabeledDataset(self.images[idx].copy(), self.labels[idx].copy(), self.source_id)

    def sha256(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()

    def manifest(self):
        return {"source_id": self.source_id, "n": len(self), "classes": self.classes,
                "sha256": self.sha256()}


@dataclass(frozen=True)
class DatasetSplit:
    all: LabeledDataset
    forget: np.ndarray
    retain: np.ndarray
    spec: dict = field(default_factory=dict)

    @property
    def p(self) -> float:
        """Forget fraction |D_f| / n."""
        return self.forget.size / len(self.all)

    @property
    def forget_images(self):
        return self.all.images[self.forget]

    @property
    def retain_images(self):
        return self.all.images[self.retain]


# ---------------------------------------------------------------------------
# IDX

def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, expected_magic, ndim):
    path = Path(path)
    if not path.exists():
        raise DataError(f"IDX file not found: {path}")
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4 + 4 * ndim:
        raise DataError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    start = 4 + 4 * ndim
    count = int(np.prod(dims))
    if len(raw) - start < count:
        raise DataError(f"{path}: truncated payload ({len(raw) - start} of {count} bytes)")
    payload = np.frombuffer(raw, dtype=np.uint8, count=count, offset=start)
    return dims, payload


def load_idx(images_path, labels_path, source_id: str | None = None) -> LabeledDataset:
    """Parse an IDX image/label file pair (optionally gzipped)."""
    (n, rows, cols), pixels = _read_idx(images_path, IMAGES_MAGIC, 3)
    (m,), labels = _read_idx(labels_path, LABELS_MAGIC, 1)
    if n != m:
        raise DataError(f"image count {n} != label count {m}")
    images = pixels.reshape(n, rows * cols).astype(np.float32) / np.float32(255.0)
    return LabeledDataset(images, labels.astype(np.int64), source_id or Path(images_path).name)


def write_idx(ds: LabeledDataset, images_path, labels_path, shape=(28, 28)):
    """Serialize to IDX. Pixels are quantized back to uint8."""
    rows, cols = shape
    n = len(ds)
    pixels = np.rint(np.asarray(ds.images, dtype=np.float64) * 255.0).astype(np.uint8)
    img = struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols) + pixels.tobytes()
    lab = struct.pack(">II", LABELS_MAGIC, n) + ds.labels.astype(np.uint8).tobytes()
    for path, blob in ((images_path, img), (labels_path, lab)):
        path = Path(path)
        if path.suffix == ".gz":
            with gzip.GzipFile(path, "wb", mtime=0) as fh:
                fh.write(blob)
        else:
            path.write_bytes(blob)


# ---------------------------------------------------------------------------
# subsets and splits

def subset_classes(ds: LabeledDataset, classes: Iterable[int] = (1, 3, 8)) -> LabeledDataset:
    classes = sorted(set(int(c) for c in classes))
    if not classes:
        raise DataError("empty class set")
    idx = np.flatnonzero(np.isin(ds.labels, classes))
    if idx.size == 0:
        raise DataError(f"no samples of classes {classes}")
    tag = "".join(str(c) for c in classes)
    return LabeledDataset(ds.images[idx].copy(), ds.labels[idx].copy(), f"{ds.source_id}[{tag}]")


def make_split(ds: LabeledDataset, forget_class: int | None = None, indices=None,
               predicate: Callable[[np.ndarray], np.ndarray] | None = None) -> DatasetSplit:
    """Partition ``ds`` into forget/retain by class, explicit indices or a label predicate."""
    given = sum(x is not None for x in (forget_class, indices, predicate))
    if given != 1:
        raise ValueError("give exactly one of forget_class, indices, predicate")
    n = len(ds)
    mask = np.zeros(n, dtype=bool)
    if forget_class is not None:
        mask = ds.labels == int(forget_class)
        spec = {"class": int(forget_class)}
    elif indices is not None:
        idx = np.unique(np.asarray(indices, dtype=np.int64))
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise DataError("forget index out of range")
        mask[idx] = True
        spec = {"indices": idx.tolist()}
    else:
        mask = np.asarray(predicate(ds.labels), dtype=bool)
        spec = {"predicate": getattr(predicate, "__name__", "predicate")}
    forget = np.flatnonzero(mask)
    retain = np.flatnonzero(~mask)
    if forget.size == 0:
        raise DataError("forget set is empty")
    if retain.size == 0:
        raise DataError("forget set equals the full dataset")
    return DatasetSplit(ds, forget, retain, spec)


# ---------------------------------------------------------------------------
# synthetic

def _templates(n_classes, image_dim):
    side = int(round(np.sqrt(image_dim)))
    if side * side == image_dim:
        yy, xx = np.mgrid[0:side, 0:side] / (side - 1) - 0.5
        out = []
        for k in range(n_classes):
            angle = np.pi * k / n_classes
            # stripe through the centre at angle k*pi/C
            dist = np.abs(xx * np.sin(angle) - yy * np.cos(angle))
            stripe = np.clip(1.0 - dist / 0.08, 0.0, 1.0)
            # blob on a ring, at a class-specific position
            cx, cy = 0.3 * np.cos(2 * angle + 1.0), 0.3 * np.sin(2 * angle + 1.0)
            blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * 0.07 ** 2))
            out.append(np.clip(np.maximum(stripe, blob), 0.0, 1.0).ravel())
        return np.array(out)
    # non-square: one contiguous band per class
    out = np.zeros((n_classes, image_dim))
    for k, band in enumerate(np.array_split(np.arange(image_dim), n_classes)):
        out[k, band] = 1.0
    return out


@dataclass(frozen=True)
class SynthConfig:
    n: int = 600
    classes: tuple[int, ...] = (1, 3, 8)
    image_dim: int = 784
    seed: int = 0
    noise_std: float = 0.05
    amp_range: tuple[float, float] = (0.6, 1.0)

    def noise_floor(self) -> float:
        """Per-pixel MSE of the best predictor that ignores sample-specific noise.

        The amplitude is recoverable from the image, the additive pixel noise
        is not, so ``noise_std**2`` bounds what any reconstruction can reach
        before clipping; clipping at [0, 1] only lowers it.
        """
        return self.noise_std ** 2


def synth_dataset(cfg: SynthConfig = SynthConfig()) -> LabeledDataset:
    """Class-conditional stripe+blob images with random amplitude and pixel noise."""
    rng = np.random.default_rng([cfg.seed, 7])
    classes = np.asarray(cfg.classes, dtype=np.int64)
    templates = _templates(len(classes), cfg.image_dim)
    which = rng.integers(0, len(classes), size=cfg.n)
    amp = rng.uniform(*cfg.amp_range, size=(cfg.n, 1))
    noise = rng.normal(0.0, cfg.noise_std, size=(cfg.n, cfg.image_dim))
    images = np.clip(amp * templates[which] + noise, 0.0, 1.0).astype(np.float32)
    tag = ",".join(str(c) for c in cfg.classes)
    return LabeledDataset(images, classes[which], f"synth(n={cfg.n},classes={tag},seed={cfg.seed})")
