"""Datasets: synthetic shifted tasks, CSV ingestion, splitting, scaling.

The synthetic generators return a ``(broad, train, test)`` triple. ``broad``
is what the frozen models are pretrained on; ``train``/``test`` are the
downstream task, deliberately displaced from ``broad`` so that the large
model's knowledge is useful but not sufficient.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError

SPLITS = ("pretrain_broad", "downstream_train", "downstream_test", "unsplit")


class DataError(Exception):
    pass


class ParseError(DataError):
    def __init__(self, msg: str, line: int, column: str | None = None):
        super().__init__(f"line {line}" + (f", column {column!r}" if column else "") + f": {msg}")
        self.line = line
        self.column = column


class RaggedRow(ParseError):
    pass


class UnknownLabelColumn(DataError):
    pass


class LabelOutOfRange(DataError):
    pass


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    n_classes: int
    split: str = "unsplit"
    provenance: str = ""
    feature_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64)
        y = np.array(self.y, dtype=np.int64)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise DataError(f"X {X.shape} and y {y.shape} disagree")
        if not np.all(np.isfinite(X)):
            raise DataError("non-finite features")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise LabelOutOfRange(f"labels must lie in [0, {self.n_classes})")
        if self.split not in SPLITS:
            raise DataError(f"unknown split tag {self.split!r}")
        X.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.X.astype("<f8").tobytes())
        h.update(self.y.astype("<i8").tobytes())
        return h.hexdigest()[:16]


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def _unit(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def gen_blobs_shifted(seed: int, n_classes: int, input_dim: int, n_per_class: int,
                      shift: float, spread: float = 1.0, center_scale: float = 3.0):
    """Gaussian class clusters; downstream clusters are translated by ``shift``.

    Broad data has ``n_per_class`` points per class around centres drawn once
    per seed; the downstream train and test splits each have ``n_per_class``
    points per class around the same centres moved along one fixed random
    direction.
    """
    if n_classes < 2 or input_dim < 1 or n_per_class < 8 or not shift >= 0:
        raise ConfigError("need n_classes >= 2, input_dim >= 1, n_per_class >= 8, shift >= 0")
    rng = _rng(seed)
    centers = rng.standard_normal((n_classes, input_dim)) * center_scale
    direction = _unit(rng, input_dim)
    moved = centers + shift * direction
    tag = f"blobs_shifted(seed={seed},C={n_classes},d={input_dim},n={n_per_class},shift={shift})"

    def draw(cs, split):
        X = np.concatenate([c + spread * rng.standard_normal((n_per_class, input_dim)) for c in cs])
        y = np.repeat(np.arange(n_classes), n_per_class)
        return Dataset(X, y, n_classes, split, tag)

    broad = draw(centers, "pretrain_broad")
    train = draw(moved, "downstream_train")
    test = draw(moved, "downstream_test")
    return broad, train, test


def _moons_xy(rng, n, noise):
    n0 = (n + 1) // 2
    n1 = n - n0
    t0 = rng.uniform(0, np.pi, n0)
    t1 = rng.uniform(0, np.pi, n1)
    X = np.concatenate([
        np.column_stack([np.cos(t0), np.sin(t0)]),
        np.column_stack([1 - np.cos(t1), 0.5 - np.sin(t1)]),
    ])
    if noise > 0:
        X = X + noise * rng.standard_normal(X.shape)
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    return X, y


def gen_moons(seed: int, n: int, noise: float) -> Dataset:
    """Two interleaved half-circles, classes balanced to within one point."""
    if n < 16 or not noise >= 0:
        raise ConfigError("need n >= 16 and noise >= 0")
    X, y = _moons_xy(_rng(seed), n, noise)
    return Dataset(X, y, 2, "unsplit", f"moons(seed={seed},n={n},noise={noise})")


def gen_moons_shifted(seed: int, n: int, noise: float, shift: float,
                      rotation: float = 0.0, broad_noise: float | None = None):
    """Moons task with a displaced downstream distribution.

    Downstream points are the broad distribution rotated by ``rotation``
    radians about the moons' centre and translated by ``shift`` along a
    random direction. ``broad_noise`` defaults to ``noise``.
    """
    if n < 16 or not noise >= 0 or not shift >= 0:
        raise ConfigError("need n >= 16, noise >= 0, shift >= 0")
    rng = _rng(seed)
    direction = _unit(rng, 2)
    c, s = np.cos(rotation), np.sin(rotation)
    R = np.array([[c, -s], [s, c]])
    centre = np.array([0.5, 0.25])
    tag = f"moons_shifted(seed={seed},n={n},noise={noise},shift={shift},rot={rotation})"

    bX, by = _moons_xy(rng, n, noise if broad_noise is None else broad_noise)
    broad = Dataset(bX, by, 2, "pretrain_broad", tag)

    def downstream(split):
        X, y = _moons_xy(rng, n, noise)
        X = (X - centre) @ R.T + centre + shift * direction
        return Dataset(X, y, 2, split, tag)

    return broad, downstream("downstream_train"), downstream("downstream_test")


def split(dataset: Dataset, fractions: Sequence[float], seed: int,
          tags: Sequence[str] | None = None):
    """Seeded shuffle, then consecutive partitions with the given fractions."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.ndim != 1 or fr.size < 2 or np.any(fr <= 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ConfigError(f"fractions must be positive and sum to 1, got {list(fractions)}")
    n = len(dataset)
    perm = _rng(seed).permutation(n)
    bounds = np.round(np.cumsum(fr) * n).astype(int)
    bounds[-1] = n
    tags = list(tags) if tags is not None else [dataset.split] * fr.size
    out, start = [], 0
    for stop, tag in zip(bounds, tags):
        idx = perm[start:stop]
        out.append(replace(dataset, X=dataset.X[idx], y=dataset.y[idx], split=tag))
        start = stop
    return tuple(out)


def load_csv(path, label_column: str, n_classes: int | None = None) -> Dataset:
    """Read a numeric CSV with a header; every non-label column is a feature."""
    try:
        fh = open(path, newline="")
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    with fh:
        raw = fh.read()
    rows = list(csv.reader(raw.splitlines()))
    if not rows:
        raise ParseError("empty file", 1)
    header = [h.strip() for h in rows[0]]
    if label_column not in header:
        raise UnknownLabelColumn(f"label column {label_column!r} not in header {header}")
    li = header.index(label_column)
    feats, labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise RaggedRow(f"{len(row)} fields, header has {len(header)}", lineno)
        vals = []
        for name, cell in zip(header, row):
            try:
                vals.append(float(cell))
            except ValueError:
                raise ParseError(f"not a number: {cell!r}", lineno, name) from None
        lab = vals.pop(li)
        if lab != int(lab):
            raise ParseError(f"label must be an integer, got {lab}", lineno, label_column)
        labels.append(int(lab))
        feats.append(vals)
    if not feats:
        raise ParseError("no data rows", 2)
    y = np.array(labels, dtype=np.int64)
    C = n_classes if n_classes is not None else int(y.max()) + 1
    if y.min() < 0 or y.max() >= C:
        raise LabelOutOfRange(f"label values {sorted(set(labels))} outside [0, {C})")
    digest = hashlib.sha256(raw.encode()).hexdigest()[:16]
    names = tuple(h for i, h in enumerate(header) if i != li)
    return Dataset(np.array(feats), y, C, "unsplit", f"csv:{digest}", names)


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, ds: Dataset) -> "Standardizer":
        sd = ds.X.std(axis=0)
        return cls(ds.X.mean(axis=0), np.where(sd > 0, sd, 1.0))

    def __call__(self, ds: Dataset) -> Dataset:
        return replace(ds, X=(ds.X - self.mean) / self.scale)
