"""Scan-pair dataset handling: ground-truth fusion, normalization,
augmentation, and binary/CSV file formats."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, FormatError, ShapeError

DATASET_MAGIC = b"HALD"
DATASET_VERSION = 1

PAIR_TOL = 1e-9  # slack for the y <= x invariant under float round-trips


@dataclass
class ScanPair:
    """Input laser scan x and fused obstacle-distance target y, in meters.

    Post-fusion, y_i <= x_i holds elementwise: the target is never farther
    than what the laser itself reported.
    """

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.ndim != 1 or self.x.shape != self.y.shape:
            raise ShapeError(f"x and y must be equal-length vectors, got {self.x.shape} and {self.y.shape}")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise DomainError("scan pair contains non-finite values")
        if self.x.min() < 0.0 or self.y.min() < 0.0:
            raise DomainError("scan pair contains negative distances")
        if np.any(self.y > self.x + PAIR_TOL):
            raise DomainError("target exceeds laser reading; pair is not fused (y <= x violated)")


@dataclass
class Dataset:
    """A list of uniform-length ScanPairs plus the capture parameters."""

    pairs: list
    n_points: int
    max_range: float
    note: str = ""

    def __post_init__(self):
        for pair in self.pairs:
            if pair.x.size != self.n_points:
                raise ShapeError(f"pair length {pair.x.size} != dataset n_points {self.n_points}")

    def __len__(self):
        return len(self.pairs)

    def stacked(self):
        """(X, Y) arrays of shape (n_pairs, n_points)."""
        if not self.pairs:
            return np.empty((0, self.n_points)), np.empty((0, self.n_points))
        return (
            np.stack([p.x for p in self.pairs]),
            np.stack([p.y for p in self.pairs]),
        )


def fuse(x, y_c):
    """Conservative target: elementwise min of laser scan and depth-derived scan."""
    x = np.asarray(x, dtype=np.float64)
    y_c = np.asarray(y_c, dtype=np.float64)
    if x.shape != y_c.shape:
        raise ShapeError(f"cannot fuse scans of shapes {x.shape} and {y_c.shape}")
    if x.min() < 0.0 or y_c.min() < 0.0:
        raise DomainError("fuse requires nonnegative distances")
    return np.minimum(x, y_c)


def normalize(x, s):
    """Clamp to [0, s] then scale to [0, 1]."""
    if s <= 0.0:
        raise DomainError(f"max range s must be positive, got {s}")
    return np.clip(np.asarray(x, dtype=np.float64), 0.0, s) / s


def denormalize(x_unit, s):
    """Exact inverse of normalize on [0, 1]: multiply by s."""
    if s <= 0.0:
        raise DomainError(f"max range s must be positive, got {s}")
    return np.asarray(x_unit, dtype=np.float64) * s


def augment_noise(x, sigma_n, rng, max_range=30.0):
    """Additive zero-mean Gaussian noise (meters), clamped to [0, max_range].

    Draws fresh samples every call, so repeated epochs see different noise.
    The input array is not modified.
    """
    if sigma_n < 0.0:
        raise DomainError(f"sigma_n must be nonnegative, got {sigma_n}")
    x = np.asarray(x, dtype=np.float64)
    if sigma_n == 0.0:
        return x.copy()
    return np.clip(x + rng.normal(0.0, sigma_n, size=x.shape), 0.0, max_range)


def augment_flip(pair: ScanPair, rng):
    """With probability 0.5, reverse the index order of x and y jointly."""
    if rng.random() < 0.5:
        return ScanPair(x=pair.x[::-1].copy(), y=pair.y[::-1].copy())
    return ScanPair(x=pair.x.copy(), y=pair.y.copy())


# ---------------------------------------------------------------------------
# Binary dataset format
#
# magic "HALD" | u32 version | u32 n_points | f64 max_range | u64 pair count
# | u32 note length | note utf-8 | per pair: n_points f64 x, n_points f64 y
# (all little-endian; see README).


def save_dataset(dataset: Dataset, path):
    with open(path, "wb") as fh:
        note = dataset.note.encode("utf-8")
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<I", DATASET_VERSION))
        fh.write(struct.pack("<I", dataset.n_points))
        fh.write(struct.pack("<d", dataset.max_range))
        fh.write(struct.pack("<Q", len(dataset.pairs)))
        fh.write(struct.pack("<I", len(note)))
        fh.write(note)
        for pair in dataset.pairs:
            fh.write(np.ascontiguousarray(pair.x, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(pair.y, dtype="<f8").tobytes())


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"dataset file truncated while reading {what}")
    return data


def load_dataset(path):
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != DATASET_MAGIC:
            raise FormatError(f"not a dataset file: bad magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != DATASET_VERSION:
            raise FormatError(f"unsupported dataset version {version}, expected {DATASET_VERSION}")
        (n_points,) = struct.unpack("<I", _read_exact(fh, 4, "n_points"))
        (max_range,) = struct.unpack("<d", _read_exact(fh, 8, "max_range"))
        (count,) = struct.unpack("<Q", _read_exact(fh, 8, "pair count"))
        (note_len,) = struct.unpack("<I", _read_exact(fh, 4, "note length"))
        note = _read_exact(fh, note_len, "note").decode("utf-8")
        pairs = []
        row = n_points * 8
        for i in range(count):
            x = np.frombuffer(_read_exact(fh, row, f"pair {i} input"), dtype="<f8")
            y = np.frombuffer(_read_exact(fh, row, f"pair {i} target"), dtype="<f8")
            if x.max(initial=0.0) > max_range or y.max(initial=0.0) > max_range:
                raise FormatError(f"pair {i} exceeds the stated max range {max_range}")
            pairs.append(ScanPair(x=x.copy(), y=y.copy()))
        if fh.read(1):
            raise FormatError("trailing bytes after dataset payload")
    return Dataset(pairs=pairs, n_points=n_points, max_range=max_range, note=note)


# ---------------------------------------------------------------------------
# CSV interchange: one row per pair, N x-values then N y-values.


def export_csv(dataset: Dataset, path):
    with open(path, "w", encoding="utf-8") as fh:
        for pair in dataset.pairs:
            values = [repr(float(v)) for v in pair.x] + [repr(float(v)) for v in pair.y]
            fh.write(",".join(values) + "\n")


def import_csv(path, max_range=30.0, note=""):
    pairs = []
    n_points = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                values = np.array([float(v) for v in line.split(",")])
            except ValueError as exc:
                raise FormatError(f"line {lineno}: {exc}") from exc
            if values.size % 2 != 0:
                raise FormatError(f"line {lineno}: odd value count {values.size}, expected 2*N")
            half = values.size // 2
            if n_points is None:
                n_points = half
            elif half != n_points:
                raise FormatError(f"line {lineno}: length {half} != first row's {n_points}")
            pairs.append(ScanPair(x=values[:half], y=values[half:]))
    if n_points is None:
        raise FormatError("CSV contains no scan pairs")
    return Dataset(pairs=pairs, n_points=n_points, max_range=max_range, note=note)
