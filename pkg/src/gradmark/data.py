"""Datasets: IDX archives, synthetic class blobs, stratified splits."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

DESK_FILES = {
    "train": ("train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz"),
    "test": ("test-images-idx3-ubyte.gz", "test-labels-idx1-ubyte.gz"),
}


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Images (n, H, W, C) with pixels in [0, 1] and integer labels in [0, k)."""

    images: np.ndarray
    labels: np.ndarray
    name: str
    class_count: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (n, H, W, C), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DatasetError("pixel values outside [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DatasetError("label outside [0, class_count)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.images.shape[1:]))

    def subset(self, index, name: str | None = None) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.images[index], self.labels[index], name or self.name, self.class_count)

    def of_class(self, label: int) -> "Dataset":
        return self.subset(np.flatnonzero(self.labels == label), f"{self.name}[class={label}]")

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)


def _open(path: Path):
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4 + 4 * ndim:
        raise DatasetError(f"{path}: truncated header")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise DatasetError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(">" + "I" * ndim, raw[4:4 + 4 * ndim])
    body = raw[4 + 4 * ndim:]
    expected = int(np.prod(dims))
    if len(body) != expected:
        raise DatasetError(f"{path}: expected {expected} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, name: str | None = None, class_count: int | None = None) -> Dataset:
    """Read an IDX image/label pair (plain or gzip)."""
    images = _read_idx(images_path, IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise DatasetError(f"count mismatch: {len(images)} images, {len(labels)} labels")
    x = (images.astype(np.float64) / 255.0)[..., None]
    y = labels.astype(np.int64)
    k = class_count if class_count is not None else int(y.max()) + 1 if y.size else 0
    return Dataset(x, y, name or Path(images_path).name, k)


def write_idx(images_u8: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write an IDX pair; ``.gz`` suffixes are gzip-compressed (mtime pinned for reproducibility)."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images_u8.ndim != 3:
        raise DatasetError("images must be (n, rows, cols)")
    img = struct.pack(">IIII", IMAGES_MAGIC, *images_u8.shape) + images_u8.tobytes()
    lab = struct.pack(">II", LABELS_MAGIC, len(labels)) + labels.tobytes()
    for path, payload in ((images_path, img), (labels_path, lab)):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        if path.suffix == ".gz":
            with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
                fh.write(payload)
        else:
            path.write_bytes(payload)


def make_synthetic(k: int, n_per_class: int, dims=(8, 8, 1), seed: int = 0, spread: float = 0.15) -> Dataset:
    """Gaussian blobs around random class prototypes, clipped to [0, 1]."""
    if k < 2:
        raise DatasetError("need at least two classes")
    if n_per_class < 1:
        raise DatasetError("n_per_class must be positive")
    rng = np.random.default_rng(seed)
    dims = tuple(dims)
    d = int(np.prod(dims))
    centers = rng.uniform(0.2, 0.8, size=(k, d))
    labels = np.repeat(np.arange(k), n_per_class)
    x = centers[labels] + spread * rng.standard_normal((len(labels), d))
    x = np.clip(x, 0.0, 1.0)
    order = rng.permutation(len(labels))
    return Dataset(x[order].reshape((-1,) + dims), labels[order], f"synthetic-k{k}-s{seed}", k)


def split(dataset: Dataset, fractions, seed: int = 0) -> list[Dataset]:
    """Stratified, disjoint, covering split; part sizes are floored per class, remainder to the last part."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if abs(fractions.sum() - 1.0) > 1e-9 or np.any(fractions < 0):
        raise DatasetError(f"fractions must be non-negative and sum to 1, got {fractions.tolist()}")
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[] for _ in fractions]
    for c in range(dataset.class_count):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size == 0:
            continue
        if idx.size < np.count_nonzero(fractions):
            raise DatasetError(f"class {c} has {idx.size} samples, fewer than {len(fractions)} parts")
        idx = rng.permutation(idx)
        counts = np.floor(fractions * idx.size + 1e-9).astype(int)
        counts[-1] = idx.size - counts[:-1].sum()
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for p in range(len(fractions)):
            parts[p].append(idx[bounds[p]:bounds[p + 1]])
    out = []
    for p, chunks in enumerate(parts):
        index = np.sort(np.concatenate(chunks)) if chunks else np.zeros(0, dtype=np.int64)
        out.append(dataset.subset(index, f"{dataset.name}/part{p}"))
    return out


def subsample_indices(dataset: Dataset, n_per_class: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(dataset.class_count):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size < n_per_class:
            raise DatasetError(f"class {c} has {idx.size} samples, {n_per_class} requested")
        chosen.append(rng.choice(idx, size=n_per_class, replace=False))
    return np.concatenate(chosen)


def subsample_per_class(dataset: Dataset, n_per_class: int, seed: int = 0) -> Dataset:
    """Exactly ``n_per_class`` samples of every class, drawn without replacement."""
    index = subsample_indices(dataset, n_per_class, seed)
    return dataset.subset(index, f"{dataset.name}/sub{n_per_class}")


def build_desk_archive(directory, test_per_class: int = 100, seed: int = 0) -> Path:
    """Write the desk benchmark (handwritten digits, 28x28x1) as IDX files.

    The source is the 5000-image digit sample shipped with ``mlxtend``
    (500 per class). ``test_per_class`` images of each class go to the test
    archive, the rest to the training archive.
    """
    directory = Path(directory)
    paths = [directory / f for pair in DESK_FILES.values() for f in pair]
    if all(p.exists() for p in paths):
        return directory
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise DatasetError("building the desk archive needs the 'mlxtend' package") from exc
    x, y = mnist_data()
    x = x.reshape(-1, 28, 28).astype(np.uint8)
    y = y.astype(np.int64)
    full = Dataset(x[..., None] / 255.0, y, "digits", 10)
    frac = test_per_class / 500.0
    train, test = split(full, [1.0 - frac, frac], seed=seed)
    for part, (img_name, lab_name) in zip((train, test), DESK_FILES.values()):
        u8 = np.rint(part.images[..., 0] * 255.0).astype(np.uint8)
        write_idx(u8, part.labels, directory / img_name, directory / lab_name)
    return directory


def load_desk(directory) -> tuple[Dataset, Dataset]:
    """Load (train, test) of the desk benchmark, building the archive on first use."""
    directory = build_desk_archive(directory)
    train = load_idx(*(directory / f for f in DESK_FILES["train"]), name="digits-train", class_count=10)
    test = load_idx(*(directory / f for f in DESK_FILES["test"]), name="digits-test", class_count=10)
    return train, test
