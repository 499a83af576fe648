"""Dataset ingestion: IDX files, the bundled MNIST subset, synthetic tasks."""

from __future__ import annotations

import gzip
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import Dataset, make_quadratic

log = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
DATA_DIR_ENV = "AFL_DATA_DIR"


class IDXError(ValueError):
    pass


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Parse an unsigned-byte IDX file into an array of its declared shape."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IDXError(f"{path}: truncated header ({len(raw)} bytes)")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code != 0x08:
        raise IDXError(f"{path}: bad magic 0x{int.from_bytes(raw[:4], 'big'):08x}")
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise IDXError(f"{path}: truncated header ({len(raw)} < {header_len} bytes)")
    shape = struct.unpack(f">{ndim}I", raw[4:header_len])
    count = int(np.prod(shape)) if ndim else 0
    if len(raw) - header_len < count:
        raise IDXError(f"{path}: truncated body ({len(raw) - header_len} < {count} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header_len).reshape(shape)


def write_idx(path, array) -> None:
    """Write a uint8 array as an IDX file (gzip when the name ends in .gz)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">HBB", 0, 0x08, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(header + array.tobytes())


def _labels_path_for(images_path: Path) -> Path:
    name = images_path.name
    for a, b in (("images-idx3", "labels-idx1"), ("images.idx3", "labels.idx1"), ("images", "labels")):
        if a in name:
            return images_path.with_name(name.replace(a, b))
    raise IDXError(f"cannot infer a labels file for {images_path}")


def load_idx(images_path, labels_path=None, name=None) -> Dataset:
    """Load an IDX image/label pair with pixels scaled into [0, 1]."""
    images_path = Path(images_path)
    labels_path = Path(labels_path) if labels_path is not None else _labels_path_for(images_path)
    for p, magic in ((images_path, IMAGES_MAGIC), (labels_path, LABELS_MAGIC)):
        with _open(p) as fh:
            head = fh.read(4)
        if len(head) < 4:
            raise IDXError(f"{p}: truncated header")
        found = int.from_bytes(head, "big")
        if found != magic:
            raise IDXError(f"{p}: expected magic 0x{magic:08x}, found 0x{found:08x}")
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IDXError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(X, labels.astype(np.int64), name or images_path.name)


def idx_info(path) -> dict:
    arr = read_idx(path)
    with _open(path) as fh:
        magic = int.from_bytes(fh.read(4), "big")
    info = {"path": str(path), "magic": f"0x{magic:08x}", "shape": list(arr.shape)}
    if arr.ndim == 1:
        info["label_counts"] = np.bincount(arr).tolist()
    else:
        info["pixel_range"] = [int(arr.min()), int(arr.max())] if arr.size else []
    return info


def bundled_mnist() -> Dataset:
    """5,000 MNIST digits (500 per class) shipped with ``mlxtend``."""
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:  # optional dependency
        raise IDXError("bundled MNIST subset needs mlxtend (pip install afldp[data])") from exc
    X, y = mnist_data()
    return Dataset(X / 255.0, y.astype(np.int64), "mnist-bundled")


def find_idx_pair(data_dir, split="train"):
    data_dir = Path(data_dir)
    prefix = "train" if split == "train" else "t10k"
    for suffix in ("", ".gz"):
        img = data_dir / f"{prefix}-images-idx3-ubyte{suffix}"
        lab = data_dir / f"{prefix}-labels-idx1-ubyte{suffix}"
        if img.exists() and lab.exists():
            return img, lab
    raise IDXError(f"no {split} IDX pair under {data_dir}")


def two_gaussians(n: int, dim: int, seed: int = 0, separation: float = 1.0) -> Dataset:
    """Balanced binary task: class means at +/- separation * (1,...,1)/sqrt(dim),
    identity covariance."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    mean = separation * np.ones(dim) / np.sqrt(dim)
    X = rng.standard_normal((n, dim)) + np.where(labels[:, None] == 1, mean, -mean)
    return Dataset(X, labels, "gaussians")


def to_binary(data: Dataset, task: str = "parity") -> Dataset:
    """Relabel digits for a two-way classifier."""
    if task == "parity":
        labels = data.labels % 2
    elif task.startswith("digit"):
        labels = (data.labels == int(task[5:])).astype(np.int64)
    elif task == "lowhigh":
        labels = (data.labels >= 5).astype(np.int64)
    else:
        raise ValueError(f"unknown binary task {task!r}")
    return Dataset(data.features, labels, f"{data.name}:{task}")


@dataclass(frozen=True)
class DatasetSpec:
    """Reproducible description of a train/test pair.

    ``kind`` is one of ``quadratic``, ``gaussians``, ``mnist-bundled`` or
    ``idx`` (IDX files under ``path`` or ``$AFL_DATA_DIR``).
    """

    kind: str = "quadratic"
    n_train: int = 2000
    n_test: int = 1000
    dim: int = 20
    condition: float = 1.0
    noise_sigma: float = 1.0
    separation: float = 1.0
    seed: int = 0
    task: str = "parity"
    path: str = ""
    full: bool = False

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _split(data: Dataset, n_train: int, n_test: int, seed: int):
    order = np.random.default_rng(seed).permutation(len(data))
    if n_train + n_test > len(data):
        raise ValueError(f"requested {n_train}+{n_test} samples from {len(data)}")
    return data.subset(order[:n_train]), data.subset(order[n_train:n_train + n_test])


def build_dataset(spec: DatasetSpec, binary: bool):
    """Return ``(train, test, quadratic_spec_or_None)``."""
    if spec.kind == "quadratic":
        qspec, train = make_quadratic(spec.dim, spec.condition, spec.noise_sigma,
                                      n_samples=spec.n_train, seed=spec.seed)
        return train, None, qspec
    if spec.kind == "gaussians":
        data = two_gaussians(spec.n_train + spec.n_test, spec.dim, spec.seed, spec.separation)
        return data.subset(np.arange(spec.n_train)), data.subset(
            np.arange(spec.n_train, spec.n_train + spec.n_test)), None
    if spec.kind == "mnist-bundled":
        data = bundled_mnist()
        train, test = _split(data, spec.n_train, spec.n_test, spec.seed)
    elif spec.kind == "idx":
        root = spec.path or os.environ.get(DATA_DIR_ENV, "")
        if not root:
            raise IDXError(f"idx dataset needs a path or ${DATA_DIR_ENV}")
        train = load_idx(*find_idx_pair(root, "train"))
        test = load_idx(*find_idx_pair(root, "test"))
        if not spec.full:
            rng = np.random.default_rng(spec.seed)
            train = train.subset(rng.permutation(len(train))[:spec.n_train])
            test = test.subset(rng.permutation(len(test))[:spec.n_test])
    else:
        raise ValueError(f"unknown dataset kind {spec.kind!r}")
    if binary:
        train, test = to_binary(train, spec.task), to_binary(test, spec.task)
    return train, test, None
