"""Datasets: MNIST IDX loading, disjoint client partitions, AWGN views and a
synthetic blob corpus for quick runs."""
from __future__ import annotations

import gzip
import importlib.util
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConsistencyError, FormatError, ShapeError, TruncatedError, VersionError

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class Dataset:
    images: np.ndarray  # N x H x W, float32
    labels: np.ndarray  # N, int64

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ConsistencyError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx])


@dataclass(frozen=True)
class NoiseSpec:
    snr_db: float = -10.0

    def __post_init__(self):
        if not np.isfinite(self.snr_db):
            raise ValueError("snr_db must be finite")

    @property
    def noise_to_signal(self) -> float:
        return 10.0 ** (-self.snr_db / 10.0)


@dataclass
class MultiViewSample:
    views: np.ndarray  # K x H x W, local view first
    label: int


@dataclass
class MultiViewSet:
    views: np.ndarray  # N x K x H x W
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> MultiViewSample:
        return MultiViewSample(self.views[i], int(self.labels[i]))

    def __iter__(self) -> Iterator[MultiViewSample]:
        return (self[i] for i in range(len(self)))

    @property
    def k(self) -> int:
        return self.views.shape[1]

    def first_views(self, k: int) -> np.ndarray:
        if k > self.k:
            raise ShapeError(f"requested {k} views, only {self.k} prepared")
        return self.views[:, :k]


# ---------------------------------------------------------------------------
# IDX


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, expected_magic: int) -> np.ndarray:
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise TruncatedError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: magic {magic} != expected {expected_magic}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise TruncatedError(f"{path}: payload has {len(raw) - header} bytes, header implies {count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    images = _read_idx(images_path, IMAGE_MAGIC)
    labels = _read_idx(labels_path, LABEL_MAGIC)
    if len(images) != len(labels):
        raise ConsistencyError(f"{len(images)} images but {len(labels)} labels")
    return Dataset(images.astype(np.float32) / 255.0, labels.astype(np.int64))


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Write pixels (rounded back to bytes) and labels as IDX files."""
    px = np.clip(np.rint(dataset.images * 255.0), 0, 255).astype(np.uint8)
    n, h, w = px.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, n, h, w))
        f.write(px.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def _find(directory: Path, stem: str) -> Path | None:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (directory / name).exists():
            return directory / name
    return None


def bundled_mnist_path() -> Path | None:
    """The 5000-digit MNIST sample shipped inside mlxtend, if installed."""
    spec = importlib.util.find_spec("mlxtend")
    if spec is None or not spec.submodule_search_locations:
        return None
    path = Path(list(spec.submodule_search_locations)[0]) / "data" / "data" / "mnist_5k.csv.gz"
    return path if path.exists() else None


def load_mnist(mnist_dir=None, holdout: float = 0.2) -> tuple[Dataset, Dataset, str]:
    """Return ``(train, test, source)``.

    Reads the standard four IDX files from ``mnist_dir`` when present;
    otherwise falls back to the 5000-digit sample bundled with mlxtend, split
    into train/test with a fixed permutation.
    """
    if mnist_dir is not None:
        d = Path(mnist_dir)
        found = {split: [_find(d, s) for s in stems] for split, stems in MNIST_FILES.items()}
        if all(p is not None for paths in found.values() for p in paths):
            train = load_idx(*found["train"])
            test = load_idx(*found["test"])
            return train, test, f"idx:{d}"
    path = bundled_mnist_path()
    if path is None:
        raise FileNotFoundError(
            "no MNIST IDX files found and the mlxtend sample is unavailable; "
            "pass mnist_dir or `pip install mlxtend`"
        )
    table = np.loadtxt(path, delimiter=",", dtype=np.float32)
    images = (table[:, :-1] / 255.0).reshape(-1, 28, 28).astype(np.float32)
    labels = table[:, -1].astype(np.int64)
    order = np.random.default_rng(0).permutation(len(labels))
    n_test = int(round(len(labels) * holdout))
    full = Dataset(images, labels)
    return full.subset(np.sort(order[n_test:])), full.subset(np.sort(order[:n_test])), f"mlxtend-sample:{path}"


# ---------------------------------------------------------------------------
# Partition and noise


def partition_indices(n: int, n_parts: int, seed: int) -> list[np.ndarray]:
    if n_parts < 1:
        raise ValueError("n_parts must be at least 1")
    if n_parts > n:
        raise ValueError(f"cannot split {n} items into {n_parts} parts")
    perm = np.random.default_rng(seed).permutation(n)
    base, extra = divmod(n, n_parts)
    parts, start = [], 0
    for i in range(n_parts):
        size = base + (1 if i < extra else 0)
        parts.append(perm[start:start + size])
        start += size
    return parts


def partition_disjoint(dataset: Dataset, n_parts: int, seed: int) -> list[Dataset]:
    return [dataset.subset(idx) for idx in partition_indices(len(dataset), n_parts, seed)]


def add_awgn(image: np.ndarray, spec: NoiseSpec, rng: np.random.Generator) -> np.ndarray:
    """Additive white Gaussian noise at ``spec.snr_db`` relative to the image's
    mean-square value. Output is not clipped."""
    image = np.asarray(image)
    power = float(np.mean(np.square(image, dtype=np.float64)))
    if power == 0.0:
        return image.copy()
    sigma = np.sqrt(power * spec.noise_to_signal)
    return (image + sigma * rng.standard_normal(image.shape)).astype(image.dtype)


def make_multiview(images: np.ndarray, labels: np.ndarray, k: int, spec: NoiseSpec,
                   rng: np.random.Generator) -> MultiViewSet:
    """Expand each image into ``k`` independently noised copies."""
    if k < 1:
        raise ValueError("k must be at least 1")
    images = np.asarray(images, dtype=np.float32)
    axes = tuple(range(1, images.ndim))
    power = np.mean(np.square(images, dtype=np.float64), axis=axes)
    sigma = np.sqrt(power * spec.noise_to_signal).astype(np.float32)
    noise = rng.standard_normal((len(images), k, *images.shape[1:]), dtype=np.float32)
    sigma = sigma.reshape(-1, 1, *([1] * len(axes)))
    views = images[:, None] + sigma * noise
    return MultiViewSet(views.astype(np.float32), np.asarray(labels, dtype=np.int64))


def make_multiview_batch(samples: Dataset, k: int, spec: NoiseSpec, rng: np.random.Generator) -> list[MultiViewSample]:
    return list(make_multiview(samples.images, samples.labels, k, spec, rng))


def synth_blobs(classes: int, dim: int, separation: float, noise_sigma: float, n: int,
                rng: np.random.Generator) -> Dataset:
    """Isotropic Gaussian classes whose means are pairwise ``separation`` apart.

    Vectors are zero-padded to the next square length and reshaped to a
    square pseudo-image.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if dim < classes:
        raise ValueError("dim must be at least the number of classes")
    means = blob_means(classes, dim, separation)
    labels = rng.integers(0, classes, size=n)
    x = means[labels] + noise_sigma * rng.standard_normal((n, dim))
    side = int(np.ceil(np.sqrt(dim)))
    padded = np.zeros((n, side * side))
    padded[:, :dim] = x
    return Dataset(padded.reshape(n, side, side).astype(np.float32), labels.astype(np.int64))


def blob_means(classes: int, dim: int, separation: float) -> np.ndarray:
    # scaled simplex vertices: |e_i - e_j| * s / sqrt(2) = s
    means = np.zeros((classes, dim))
    means[np.arange(classes), np.arange(classes)] = separation / np.sqrt(2.0)
    return means


# ---------------------------------------------------------------------------
# Prepared per-client data


@dataclass
class ClientData:
    train: MultiViewSet
    test: MultiViewSet


DATA_MAGIC = b"PEPD"
DATA_VERSION = 1


def _write_set(f, s: MultiViewSet) -> None:
    n, k, h, w = s.views.shape
    f.write(struct.pack("<4I", n, k, h, w))
    f.write(s.views.astype("<f4").tobytes())
    f.write(s.labels.astype(np.uint8).tobytes())


def _read_set(buf: memoryview, pos: int) -> tuple[MultiViewSet, int]:
    if len(buf) < pos + 16:
        raise TruncatedError("truncated data cache")
    n, k, h, w = struct.unpack_from("<4I", buf, pos)
    pos += 16
    size = n * k * h * w
    end = pos + 4 * size + n
    if len(buf) < end:
        raise TruncatedError("truncated data cache")
    views = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(n, k, h, w).astype(np.float32)
    labels = np.frombuffer(buf, dtype=np.uint8, count=n, offset=pos + 4 * size).astype(np.int64)
    return MultiViewSet(views, labels), end


def save_client_data(clients: list[ClientData], path) -> None:
    with open(path, "wb") as f:
        f.write(DATA_MAGIC)
        f.write(struct.pack("<II", DATA_VERSION, len(clients)))
        for c in clients:
            _write_set(f, c.train)
            _write_set(f, c.test)


def load_client_data(path) -> list[ClientData]:
    buf = memoryview(Path(path).read_bytes())
    if len(buf) < 12:
        raise TruncatedError("truncated data cache")
    if bytes(buf[:4]) != DATA_MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version > DATA_VERSION:
        raise VersionError(f"data cache version {version} > supported {DATA_VERSION}")
    pos, out = 12, []
    for _ in range(count):
        train, pos = _read_set(buf, pos)
        test, pos = _read_set(buf, pos)
        out.append(ClientData(train, test))
    return out
