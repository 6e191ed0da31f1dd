"""Datasets: CSV and IDX loaders, seeded splits, standardization, subsampling."""

from __future__ import annotations

import csv
import enum
import gzip
import io
import math
import struct
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "Split",
    "LabeledDataset",
    "ParseError",
    "SplitError",
    "SplitSpec",
    "Standardizer",
    "DatasetBundle",
    "load_csv",
    "save_csv",
    "load_idx",
    "split",
    "standardize",
    "subsample",
    "load_dataset",
    "DATASETS",
]


class ParseError(ValueError):
    """Malformed input file; the message names the file and line."""


class SplitError(ValueError):
    """A split specification cannot be honoured."""


class Split(str, enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"
    ALL = "all"


@dataclass(frozen=True)
class LabeledDataset:
    X: np.ndarray
    Y: np.ndarray
    name: str = "data"
    split: Split = Split.ALL
    num_classes: int | None = None
    feature_names: tuple[str, ...] | None = None

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        Y = np.asarray(self.Y)
        if X.ndim != 2:
            raise ValueError(f"X must be a matrix, got shape {X.shape}")
        if Y.ndim != 1 or len(Y) != len(X):
            raise ValueError(f"{len(X)} rows but labels of shape {Y.shape}")
        if Y.size and not np.issubdtype(Y.dtype, np.integer):
            if not np.all(Y == np.round(Y)):
                raise ValueError("labels must be integers")
        Y = Y.astype(np.int64)
        k = self.num_classes if self.num_classes is not None else (int(Y.max()) + 1 if Y.size else 0)
        if Y.size and (Y.min() < 0 or Y.max() >= k):
            raise ValueError(f"labels must lie in 0..{k - 1}, got range {Y.min()}..{Y.max()}")
        if not np.all(np.isfinite(X)):
            raise ValueError("features contain NaN or infinite values")
        if self.feature_names is not None and len(self.feature_names) != X.shape[1]:
            raise ValueError("feature_names length does not match the column count")
        X.setflags(write=False)
        Y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "num_classes", k)
        object.__setattr__(self, "split", Split(self.split))

    def __len__(self) -> int:
        return len(self.Y)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def with_features(self, X: np.ndarray) -> "LabeledDataset":
        return replace(self, X=X)

    def take(self, idx: np.ndarray, split: Split | None = None) -> "LabeledDataset":
        return replace(self, X=self.X[idx], Y=self.Y[idx], split=split or self.split)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.Y, minlength=self.num_classes)


# ---------------------------------------------------------------- CSV


def _open_text(path: Path):
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8", newline="")
    return open(path, encoding="utf-8", newline="")


def _to_float(cell: str) -> float | None:
    try:
        return float(cell)
    except ValueError:
        return None


def _sort_key(values: Sequence[str]):
    nums = [_to_float(v) for v in values]
    if all(n is not None for n in nums):
        return sorted(values, key=float)
    return sorted(values)


def load_csv(path, label_column: int | str = -1, header: bool = True, categorical: str | None = None,
             delimiter: str = ",", name: str | None = None, remap_labels: bool = True) -> LabeledDataset:
    """Read a delimited file into a dataset.

    ``categorical`` controls non-numeric feature columns: ``None`` rejects
    them, ``"ordinal"`` codes categories by sorted value and ``"onehot"``
    appends one indicator column per category after the numeric columns.
    Labels are remapped to ``0..K-1`` by sorted original value unless
    ``remap_labels`` is false, in which case they must already be integers.
    """
    path = Path(path)
    if categorical not in (None, "ordinal", "onehot"):
        raise ValueError(f"categorical must be None, 'ordinal' or 'onehot', got {categorical!r}")
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with _open_text(path) as fh:
        rows = [(i + 1, r) for i, r in enumerate(csv.reader(fh, delimiter=delimiter))]
    rows = [(ln, [c.strip() for c in r]) for ln, r in rows if r and any(c.strip() for c in r)]
    names = None
    if header:
        if not rows:
            raise ParseError(f"{path}: empty file")
        names = rows[0][1]
        rows = rows[1:]
    if not rows:
        raise ParseError(f"{path}: no data rows")
    width = len(names) if names else len(rows[0][1])
    for ln, r in rows:
        if len(r) != width:
            raise ParseError(f"{path}, line {ln}: expected {width} fields, found {len(r)}")
    if isinstance(label_column, str):
        if names is None or label_column not in names:
            raise ParseError(f"{path}: no column named {label_column!r}")
        lc = names.index(label_column)
    else:
        lc = label_column % width
    feat_cols = [c for c in range(width) if c != lc]
    numeric_cols, cat_cols = [], []
    for c in feat_cols:
        bad = next(((ln, r[c]) for ln, r in rows if _to_float(r[c]) is None), None)
        if bad is None:
            numeric_cols.append(c)
        elif categorical is None:
            raise ParseError(f"{path}, line {bad[0]}: non-numeric value {bad[1]!r} in column {c}")
        else:
            cat_cols.append(c)
    m = len(rows)
    blocks, fnames = [], []
    colname = (lambda c: names[c]) if names else (lambda c: f"x{c}")
    if numeric_cols:
        blocks.append(np.array([[float(r[c]) for c in numeric_cols] for _, r in rows]))
        fnames += [colname(c) for c in numeric_cols]
    if categorical == "ordinal":
        if cat_cols:
            codes = []
            for c in cat_cols:
                cats = {v: i for i, v in enumerate(_sort_key(sorted({r[c] for _, r in rows})))}
                codes.append([cats[r[c]] for _, r in rows])
                fnames.append(colname(c))
            blocks.append(np.array(codes, dtype=np.float64).T)
    elif categorical == "onehot":
        for c in cat_cols:
            cats = _sort_key(sorted({r[c] for _, r in rows}))
            index = {v: i for i, v in enumerate(cats)}
            block = np.zeros((m, len(cats)))
            block[np.arange(m), [index[r[c]] for _, r in rows]] = 1.0
            blocks.append(block)
            fnames += [f"{colname(c)}={v}" for v in cats]
    X = np.hstack(blocks) if blocks else np.zeros((m, 0))
    raw = [r[lc] for _, r in rows]
    if remap_labels:
        values = _sort_key(sorted(set(raw)))
        index = {v: i for i, v in enumerate(values)}
        Y = np.array([index[v] for v in raw], dtype=np.int64)
        k = len(values)
    else:
        try:
            Y = np.array([int(v) for v in raw], dtype=np.int64)
        except ValueError as exc:
            raise ParseError(f"{path}: non-integer label ({exc})") from None
        k = int(Y.max()) + 1
    return LabeledDataset(X, Y, name or path.name.split(".")[0], Split.ALL, k, tuple(fnames))


def save_csv(data: LabeledDataset, path, header: bool = True) -> Path:
    """Write features then the integer label; floats use shortest round-trip repr."""
    path = Path(path)
    names = data.feature_names or tuple(f"x{i}" for i in range(data.dim))
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wt", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow([*names, "label"])
        for x, y in zip(data.X, data.Y):
            w.writerow([*map(repr, x.tolist()), int(y)])
    return path


# ---------------------------------------------------------------- IDX


def _read_bytes(path: Path) -> bytes:
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _parse_idx(path: Path, magic: int, ndim: int) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 4 + 4 * ndim:
        raise ParseError(f"{path}: truncated IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise ParseError(f"{path}: bad IDX magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    body = raw[4 + 4 * ndim:]
    if len(body) != math.prod(dims):
        raise ParseError(f"{path}: expected {math.prod(dims)} data bytes for dims {dims}, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, name: str = "mnist") -> LabeledDataset:
    """Big-endian IDX image/label pair; pixels scaled to [0, 1] and flattened."""
    images = _parse_idx(Path(images_path), 0x00000803, 3)
    labels = _parse_idx(Path(labels_path), 0x00000801, 1)
    if len(images) != len(labels):
        raise ParseError(f"{images_path} has {len(images)} images but {labels_path} has {len(labels)} labels")
    X = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return LabeledDataset(X, labels.astype(np.int64), name, Split.ALL, 10)


# ---------------------------------------------------------------- splits


@dataclass(frozen=True)
class SplitSpec:
    """Train/val/test sizes as counts (ints) or fractions (floats summing to 1)."""

    train: float
    val: float
    test: float
    seed: int = 0

    def counts(self, m: int) -> tuple[int, int, int]:
        parts = (self.train, self.val, self.test)
        if any(p <= 0 for p in parts):
            raise SplitError(f"split sizes must be positive, got {parts}")
        if all(isinstance(p, (int, np.integer)) for p in parts):
            if sum(parts) != m:
                raise SplitError(f"split counts {parts} sum to {sum(parts)}, dataset has {m} rows")
            return tuple(int(p) for p in parts)
        if not math.isclose(sum(parts), 1.0, abs_tol=1e-9):
            raise SplitError(f"split fractions {parts} do not sum to 1")
        val, test = int(self.val * m), int(self.test * m)
        train = m - val - test
        if min(train, val, test) < 1:
            raise SplitError(f"{m} rows are too few for split {parts}")
        return train, val, test


def split(data: LabeledDataset, spec: SplitSpec) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Seeded shuffle, then contiguous train/val/test blocks."""
    n_train, n_val, _ = spec.counts(len(data))
    perm = np.random.default_rng(spec.seed).permutation(len(data))
    parts = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    train, val, test = (data.take(idx, s) for idx, s in zip(parts, (Split.TRAIN, Split.VAL, Split.TEST)))
    missing = np.flatnonzero(train.class_counts() == 0)
    if missing.size:
        raise SplitError(f"classes {missing.tolist()} have no training samples")
    return train, val, test


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @property
    def passthrough(self) -> np.ndarray:
        return self.std == 0

    def apply(self, data: LabeledDataset) -> LabeledDataset:
        keep = self.passthrough
        X = (data.X - np.where(keep, 0.0, self.mean)) / np.where(keep, 1.0, self.std)
        return data.with_features(X)

    @classmethod
    def fit(cls, data: LabeledDataset) -> "Standardizer":
        return cls(data.X.mean(axis=0), data.X.std(axis=0))


def standardize(train: LabeledDataset, *others: LabeledDataset):
    """z-score every feature with statistics of ``train`` alone.

    Returns ``(train', *others', transform)``; constant features are left as they are.
    """
    tf = Standardizer.fit(train)
    return (tf.apply(train), *(tf.apply(o) for o in others), tf)


def subsample(data: LabeledDataset, n: int, seed: int = 0) -> LabeledDataset:
    """A class-stratified random subset of ``n`` rows in original order."""
    if n >= len(data):
        return data
    if n < 1:
        raise ValueError(f"subsample size must be positive, got {n}")
    rng = np.random.default_rng(seed)
    counts = data.class_counts()
    quota = counts * n / len(data)
    take = np.floor(quota).astype(int)
    # largest remainders get the leftover slots
    for c in np.argsort(-(quota - take), kind="stable")[: n - take.sum()]:
        take[c] += 1
    chosen = [rng.choice(np.flatnonzero(data.Y == c), take[c], replace=False)
              for c in range(data.num_classes) if take[c]]
    return data.take(np.sort(np.concatenate(chosen)))


# ---------------------------------------------------------------- registry


@dataclass
class DatasetBundle:
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset
    info: dict = field(default_factory=dict)


def _data_file(name: str) -> Path:
    return Path(str(resources.files("noisereg") / "data_files" / name))


def _mnist() -> tuple[LabeledDataset, SplitSpec]:
    data = load_idx(_data_file("mnist10k-images-idx3-ubyte.gz"), _data_file("mnist10k-labels-idx1-ubyte.gz"))
    return data, SplitSpec(5 / 6, 1 / 12, 1 / 12)


def _adult() -> tuple[LabeledDataset, SplitSpec]:
    data = load_csv(_data_file("adult.csv.gz"), "income", categorical="onehot", name="adult")
    return data, SplitSpec(29304, 9769, 9769)


DATASETS = {"mnist": _mnist, "adult": _adult}


def load_dataset(name: str, seed: int = 0, max_train: int | None = 10_000,
                 standardize_features: bool = True) -> DatasetBundle:
    """Split, subsample and standardize a bundled dataset (or a CSV at ``name``).

    Standardization happens after splitting and subsampling, so noise
    injected later is measured on the standardized scale.
    """
    if name in DATASETS:
        data, spec = DATASETS[name]()
    else:
        path = Path(name)
        if not path.exists():
            raise ValueError(f"unknown dataset {name!r}; choose from {sorted(DATASETS)} or give a CSV path")
        data, spec = load_csv(path, categorical="onehot"), SplitSpec(0.8, 0.1, 0.1)
    train, val, test = split(data, replace(spec, seed=seed))
    if max_train:
        train = subsample(train, max_train, seed)
    info = {"dataset": data.name, "rows": len(data), "dim": data.dim, "classes": data.num_classes,
            "train": len(train), "val": len(val), "test": len(test), "split_seed": seed,
            "standardized": standardize_features}
    if standardize_features:
        train, val, test, _ = standardize(train, val, test)
    return DatasetBundle(train, val, test, info)
