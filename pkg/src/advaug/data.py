"""Synthetic single-source datasets with parameterized covariate shifts.

Each generator assigns labels first and applies the shift afterwards, so the
conditional label rule never depends on the shift: shifted domains differ in
appearance only.  Features are stored at single precision (the on-disk format
is f32) and up-cast to float64 in memory, which makes write/read round trips
exact.

Binary dataset format (little-endian), documented byte-exactly in README.md:
magic "ADDS", version u32, n u64, d u32, m u32, features n*d f32 row-major,
labels n u16.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

DATASET_MAGIC = b"ADDS"
DATASET_VERSION = 1

GENERATORS = ("gaussian_mixture", "two_moons", "rings")

# fixed generator geometry; severity comes from DomainSpec.shift
_MIXTURE_RADIUS = 2.0
_MIXTURE_SIGMA = 0.35
_MOONS_SIGMA = 0.1
_RINGS_SIGMA = 0.08


class DatasetFormatError(ValueError):
    """Dataset file failed magic, version or length validation."""


@dataclass(frozen=True)
class Shift:
    """Covariate shift: rotate (first two axes), scale, translate, add noise."""

    rotation: float = 0.0
    translation: tuple = ()
    scale: float = 1.0
    feature_noise: float = 0.0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.feature_noise < 0:
            raise ValueError("feature_noise must be nonnegative")
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))


IDENTITY_SHIFT = Shift()


@dataclass(frozen=True)
class DomainSpec:
    """Everything needed to reproduce one domain bit-for-bit."""

    generator: str
    n_classes: int
    dim: int
    n_samples: int
    shift: Shift = field(default_factory=Shift)
    seed: int = 0

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}")
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.generator == "two_moons" and self.n_classes != 2:
            raise ValueError("two_moons is a 2-class generator")
        if self.dim < 2:
            raise ValueError("need dim >= 2")
        if self.n_samples < 0:
            raise ValueError("n_samples must be nonnegative")
        if self.shift.translation and len(self.shift.translation) != self.dim:
            raise ValueError(
                f"translation has {len(self.shift.translation)} entries, want {self.dim}"
            )


@dataclass
class Dataset:
    features: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int64
    n_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be (n, d)")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("labels must have one entry per row")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("labels out of range")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def __eq__(self, other):
        return (
            isinstance(other, Dataset)
            and self.n_classes == other.n_classes
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )


# -- generators ----------------------------------------------------------------


def _class_counts(n, m):
    counts = np.full(m, n // m, dtype=np.int64)
    counts[: n % m] += 1
    return counts


def _gen_gaussian_mixture(spec, rng):
    counts = _class_counts(spec.n_samples, spec.n_classes)
    angles = 2.0 * np.pi * np.arange(spec.n_classes) / spec.n_classes
    xs, ys = [], []
    for cls, cnt in enumerate(counts):
        mean = np.zeros(spec.dim)
        mean[0] = _MIXTURE_RADIUS * np.cos(angles[cls])
        mean[1] = _MIXTURE_RADIUS * np.sin(angles[cls])
        xs.append(mean + _MIXTURE_SIGMA * rng.standard_normal((cnt, spec.dim)))
        ys.append(np.full(cnt, cls, dtype=np.int64))
    return np.concatenate(xs), np.concatenate(ys)


def _gen_two_moons(spec, rng):
    counts = _class_counts(spec.n_samples, 2)
    xs, ys = [], []
    for cls, cnt in enumerate(counts):
        t = rng.uniform(0.0, np.pi, size=cnt)
        pts = np.zeros((cnt, spec.dim))
        if cls == 0:
            pts[:, 0] = np.cos(t)
            pts[:, 1] = np.sin(t)
        else:
            pts[:, 0] = 1.0 - np.cos(t)
            pts[:, 1] = 0.5 - np.sin(t)
        pts += _MOONS_SIGMA * rng.standard_normal((cnt, spec.dim))
        xs.append(pts)
        ys.append(np.full(cnt, cls, dtype=np.int64))
    return np.concatenate(xs), np.concatenate(ys)


def _gen_rings(spec, rng):
    counts = _class_counts(spec.n_samples, spec.n_classes)
    xs, ys = [], []
    for cls, cnt in enumerate(counts):
        radius = 1.0 + cls + _RINGS_SIGMA * rng.standard_normal(cnt)
        angle = rng.uniform(0.0, 2.0 * np.pi, size=cnt)
        pts = _RINGS_SIGMA * rng.standard_normal((cnt, spec.dim))
        pts[:, 0] += radius * np.cos(angle)
        pts[:, 1] += radius * np.sin(angle)
        xs.append(pts)
        ys.append(np.full(cnt, cls, dtype=np.int64))
    return np.concatenate(xs), np.concatenate(ys)


_GEN_FNS = {
    "gaussian_mixture": _gen_gaussian_mixture,
    "two_moons": _gen_two_moons,
    "rings": _gen_rings,
}


def _apply_shift(x, shift, noise_rng):
    x = x.copy()
    if shift.rotation != 0.0:
        c, s = np.cos(shift.rotation), np.sin(shift.rotation)
        x0, x1 = x[:, 0].copy(), x[:, 1].copy()
        x[:, 0] = c * x0 - s * x1
        x[:, 1] = s * x0 + c * x1
    if shift.scale != 1.0:
        x *= shift.scale
    if shift.translation:
        x += np.asarray(shift.translation)
    if shift.feature_noise > 0.0:
        x += shift.feature_noise * noise_rng.standard_normal(x.shape)
    return x


def generate(spec):
    """Seeded, reproducible dataset; labels fixed before the shift applies."""
    base_ss, noise_ss = np.random.SeedSequence(spec.seed).spawn(2)
    base_rng = np.random.default_rng(base_ss)
    noise_rng = np.random.default_rng(noise_ss)

    if spec.n_samples == 0:
        return Dataset(np.zeros((0, spec.dim)), np.zeros(0, dtype=np.int64), spec.n_classes)

    x, y = _GEN_FNS[spec.generator](spec, base_rng)
    order = base_rng.permutation(len(y))
    x, y = x[order], y[order]
    x = _apply_shift(x, spec.shift, noise_rng)
    # snap to storage precision so file round trips are exact
    x = x.astype(np.float32).astype(np.float64)
    return Dataset(x, y, spec.n_classes)


# -- binary + CSV I/O ------------------------------------------------------------


def write_dataset(path, ds):
    """Write the little-endian ADDS dataset file."""
    n, d = ds.features.shape
    if ds.n_classes > 0xFFFF:
        raise ValueError("label space too large for u16 storage")
    header = struct.pack("<4sIQII", DATASET_MAGIC, DATASET_VERSION, n, d, ds.n_classes)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(ds.features.astype("<f4").tobytes())
        fh.write(ds.labels.astype("<u2").tobytes())


def read_dataset(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    head = struct.calcsize("<4sIQII")
    if len(blob) < head:
        raise DatasetFormatError(f"file too short for header: {len(blob)} < {head} bytes")
    magic, version, n, d, m = struct.unpack_from("<4sIQII", blob, 0)
    if magic != DATASET_MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}, want {DATASET_MAGIC!r}")
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported version {version}")
    expected = head + 4 * n * d + 2 * n
    if len(blob) != expected:
        raise DatasetFormatError(
            f"truncated or oversized file: expected {expected} bytes, got {len(blob)}"
        )
    feats = np.frombuffer(blob, "<f4", n * d, head).reshape(n, d).astype(np.float64)
    labels = np.frombuffer(blob, "<u2", n, head + 4 * n * d).astype(np.int64)
    return Dataset(feats, labels, m)


def export_csv(path, ds):
    """CSV with header f0,...,f{d-1},label for interop."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(ds.dim)] + ["label"])
        for row, label in zip(ds.features, ds.labels):
            writer.writerow([repr(v) for v in row] + [int(label)])


def import_csv(path, n_classes=None):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1] != "label":
            raise DatasetFormatError("CSV header must end with 'label'")
        d = len(header) - 1
        feats, labels = [], []
        for row in reader:
            if len(row) != d + 1:
                raise DatasetFormatError(f"row has {len(row)} fields, want {d + 1}")
            feats.append([float(v) for v in row[:d]])
            labels.append(int(row[d]))
    feats = np.asarray(feats, dtype=np.float64).reshape(len(labels), d)
    labels = np.asarray(labels, dtype=np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if len(labels) else 2
    return Dataset(feats, labels, n_classes)
