"""Synthetic data generation and ingestion of IDX image files and CSV tables.

Owns the normalization policy and train/test splits. Inputs are never
rescaled to unit 2-norm (the metric bounds depend on the input modulus);
samples whose norm falls below 1e-8 are dropped and counted.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, FormatError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
NORM_FLOOR = 1e-8


@dataclass
class Dataset:
    name: str
    inputs: np.ndarray                 # (n, M)
    targets: np.ndarray                # (n, N), one-hot rows when one_hot
    train_idx: np.ndarray
    test_idx: np.ndarray
    one_hot: bool = True
    normalization: str = "none"
    n_dropped_zero_norm: int = 0
    image_shape: tuple | None = None   # (c, h, w) when inputs are images
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        self.targets = np.ascontiguousarray(self.targets, dtype=np.float64)
        if self.inputs.ndim != 2 or self.targets.ndim != 2:
            raise ContractViolation("dataset inputs/targets must be 2-D")
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ContractViolation("inputs/targets row counts differ")
        if np.any(np.isnan(self.inputs)) or np.any(np.isnan(self.targets)):
            raise ContractViolation("dataset contains NaN")
        if self.one_hot and self.targets.size and \
                not np.allclose(self.targets.sum(axis=1), 1.0, atol=1e-12):
            raise ContractViolation("one-hot target rows must sum to 1")
        self.train_idx = np.asarray(self.train_idx, dtype=np.intp)
        self.test_idx = np.asarray(self.test_idx, dtype=np.intp)
        if np.intersect1d(self.train_idx, self.test_idx).size:
            raise ContractViolation("train/test splits overlap")

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def target_dim(self) -> int:
        return self.targets.shape[1]

    def train_inputs(self) -> np.ndarray:
        return self.inputs[self.train_idx]

    def train_targets(self) -> np.ndarray:
        return self.targets[self.train_idx]

    def test_inputs(self) -> np.ndarray:
        return self.inputs[self.test_idx]

    def test_targets(self) -> np.ndarray:
        return self.targets[self.test_idx]


def _drop_zero_norm(inputs: np.ndarray, targets: np.ndarray):
    norms = np.linalg.norm(inputs, axis=1)
    keep = norms >= NORM_FLOOR
    return inputs[keep], targets[keep], int(np.sum(~keep))


def _split(n: int, train_fraction: float, rng: np.random.Generator):
    perm = rng.permutation(n)
    n_train = max(1, int(round(train_fraction * n))) if n > 1 else 1
    n_train = min(n_train, n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def one_hot(labels: np.ndarray, classes: list[int]) -> np.ndarray:
    lut = {c: i for i, c in enumerate(classes)}
    out = np.zeros((len(labels), len(classes)))
    for i, lab in enumerate(labels):
        out[i, lut[int(lab)]] = 1.0
    return out


def synth_gaussian_mixture(n_per_class: int, classes: int, dim: int,
                           separation: float, seed: int,
                           train_fraction: float = 0.8) -> Dataset:
    """Unit-covariance Gaussian blobs with class means separation * e_c on
    the coordinate axes; deterministic per seed."""
    if n_per_class < 1:
        raise ContractViolation("n_per_class must be >= 1 (empty dataset)")
    if classes < 2:
        raise ContractViolation("need at least 2 classes")
    if dim < classes:
        raise ContractViolation("dim must be >= number of classes")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    n = n_per_class * classes
    inputs = rng.standard_normal((n, dim))
    labels = np.repeat(np.arange(classes), n_per_class)
    for c in range(classes):
        inputs[labels == c, c] += separation
    targets = one_hot(labels, list(range(classes)))
    inputs, targets, dropped = _drop_zero_norm(inputs, targets)
    train_idx, test_idx = _split(inputs.shape[0], train_fraction, rng)
    return Dataset(name=f"gauss{classes}x{n_per_class}d{dim}", inputs=inputs,
                   targets=targets, train_idx=train_idx, test_idx=test_idx,
                   one_hot=True, normalization="none",
                   n_dropped_zero_norm=dropped)


def _read_exact(fh, count: int, path: str, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise FormatError(f"{path}: truncated file while reading {what} "
                          f"({len(data)} of {count} bytes)")
    return data


def _read_idx_images(path: str, limit: int | None):
    with open(path, "rb") as fh:
        header = _read_exact(fh, 16, path, "image header")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IMAGES_MAGIC:
            raise FormatError(f"{path}: bad image magic 0x{magic:08x} at offset 0 "
                              f"(expected 0x{IMAGES_MAGIC:08x})")
        if limit is not None:
            count = min(count, limit)
        raw = _read_exact(fh, count * rows * cols, path, f"{count} images")
    pixels = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
    return pixels.reshape(count, rows * cols), (rows, cols)


def _read_idx_labels(path: str, limit: int | None):
    with open(path, "rb") as fh:
        header = _read_exact(fh, 8, path, "label header")
        magic, count = struct.unpack(">II", header)
        if magic != LABELS_MAGIC:
            raise FormatError(f"{path}: bad label magic 0x{magic:08x} at offset 0 "
                              f"(expected 0x{LABELS_MAGIC:08x})")
        if limit is not None:
            count = min(count, limit)
        raw = _read_exact(fh, count, path, f"{count} labels")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.intp)


def load_idx_images(image_path: str, label_path: str, limit: int | None = None,
                    classes_filter=None, standardize: bool = False) -> Dataset:
    """Load one IDX image/label file pair as a train-only dataset.

    Pixels are scaled to [0, 1]; optional per-feature standardization.
    """
    images, (rows, cols) = _read_idx_images(image_path, limit)
    labels = _read_idx_labels(label_path, limit)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{image_path}: image count {images.shape[0]} does not "
                          f"match label count {labels.shape[0]} in {label_path}")
    if classes_filter is not None:
        classes = sorted(int(c) for c in classes_filter)
        keep = np.isin(labels, classes)
        images, labels = images[keep], labels[keep]
    else:
        classes = sorted(int(c) for c in np.unique(labels))
    normalization = "pixel[0,1]"
    if standardize:
        mu = images.mean(axis=0)
        sd = np.maximum(images.std(axis=0), 1e-8)
        images = (images - mu) / sd
        normalization = "pixel[0,1]+standardized"
    targets = one_hot(labels, classes)
    images, targets, dropped = _drop_zero_norm(images, targets)
    n = images.shape[0]
    return Dataset(name="idx", inputs=images, targets=targets,
                   train_idx=np.arange(n), test_idx=np.arange(0),
                   one_hot=True, normalization=normalization,
                   n_dropped_zero_norm=dropped, image_shape=(1, rows, cols))


def load_idx_pair(train_images: str, train_labels: str, test_images: str,
                  test_labels: str, limit: int | None = None,
                  classes_filter=None, standardize: bool = False) -> Dataset:
    """Combine separate train/test IDX file pairs into one split dataset."""
    tr = load_idx_images(train_images, train_labels, limit, classes_filter,
                         standardize=False)
    te = load_idx_images(test_images, test_labels, limit, classes_filter,
                         standardize=False)
    if tr.target_dim != te.target_dim:
        raise FormatError("train/test class sets differ")
    inputs = np.vstack([tr.inputs, te.inputs])
    targets = np.vstack([tr.targets, te.targets])
    normalization = tr.normalization
    if standardize:
        mu = tr.inputs.mean(axis=0)
        sd = np.maximum(tr.inputs.std(axis=0), 1e-8)
        inputs = (inputs - mu) / sd
        normalization += "+standardized(train stats)"
    n_train = tr.inputs.shape[0]
    return Dataset(name="idx-pair", inputs=inputs, targets=targets,
                   train_idx=np.arange(n_train),
                   test_idx=np.arange(n_train, inputs.shape[0]),
                   one_hot=True, normalization=normalization,
                   n_dropped_zero_norm=tr.n_dropped_zero_norm + te.n_dropped_zero_norm,
                   image_shape=tr.image_shape)


def load_csv_dataset(path: str, n_targets: int, train_fraction: float = 0.8,
                     seed: int = 0, one_hot_targets: bool = False) -> Dataset:
    """CSV with a header row and f64 columns; the last n_targets columns are
    the targets."""
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise FormatError(f"{path}: empty CSV")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}: row {line_no} has {len(row)} columns, "
                                  f"expected {len(header)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise FormatError(f"{path}: non-numeric value in row {line_no}") from exc
    if not rows:
        raise FormatError(f"{path}: no data rows")
    data = np.asarray(rows)
    if n_targets < 1 or n_targets >= data.shape[1]:
        raise ContractViolation("n_targets must leave at least one input column")
    inputs, targets = data[:, :-n_targets], data[:, -n_targets:]
    inputs, targets, dropped = _drop_zero_norm(inputs, targets)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC57]))
    train_idx, test_idx = _split(inputs.shape[0], train_fraction, rng)
    return Dataset(name="csv", inputs=inputs, targets=targets,
                   train_idx=train_idx, test_idx=test_idx,
                   one_hot=one_hot_targets, normalization="none",
                   n_dropped_zero_norm=dropped)


def build_dataset(desc: dict) -> Dataset:
    """Construct a dataset from a config descriptor (see the CLI schema)."""
    kind = desc.get("kind")
    if kind == "gaussian_mixture":
        return synth_gaussian_mixture(
            n_per_class=int(desc["n_per_class"]), classes=int(desc["classes"]),
            dim=int(desc["dim"]), separation=float(desc["separation"]),
            seed=int(desc.get("seed", 0)),
            train_fraction=float(desc.get("train_fraction", 0.8)))
    if kind == "idx":
        return load_idx_pair(desc["train_images"], desc["train_labels"],
                             desc["test_images"], desc["test_labels"],
                             limit=desc.get("limit"),
                             classes_filter=desc.get("classes"),
                             standardize=bool(desc.get("standardize", False)))
    if kind == "csv":
        return load_csv_dataset(desc["path"], n_targets=int(desc["n_targets"]),
                                train_fraction=float(desc.get("train_fraction", 0.8)),
                                seed=int(desc.get("seed", 0)),
                                one_hot_targets=bool(desc.get("one_hot", False)))
    raise ContractViolation(f"unknown dataset kind {kind!r}")
