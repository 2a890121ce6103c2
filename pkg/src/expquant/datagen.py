"""Synthetic backbone features and the EQFT feature-file format.

EQFT layout (little-endian): magic ``b"EQFT"``, u32 version, u32 N, u32 D,
u8 has_labels, N*D float32 row-major, then N u32 labels when present.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError

FEATURE_MAGIC = b"EQFT"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIIIB")
_U32_MAX = 2**32 - 1


@dataclass
class FeatureBatch:
    """``data`` is an ``(N, D)`` float matrix; ``labels`` an optional length-N int array."""

    data: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise InvalidInputError(f"feature data must be 2-D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidInputError("feature data contains non-finite values")
        self.data = data
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (data.shape[0],):
                raise InvalidInputError(f"labels shape {labels.shape} does not match N={data.shape[0]}")
            if labels.size and (not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0):
                raise InvalidInputError("labels must be nonnegative integers")
            self.labels = labels.astype(np.int64)

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def num_classes(self) -> int:
        if self.labels is None or self.labels.size == 0:
            return 0
        return int(np.unique(self.labels).size)


def as_matrix(features) -> np.ndarray:
    """Float64 view of a FeatureBatch or array-like."""
    if isinstance(features, FeatureBatch):
        return features.data
    return np.asarray(features, dtype=np.float64)


@dataclass(frozen=True)
class ClassSpec:
    mean: tuple[float, ...]
    std: float
    count: int


@dataclass(frozen=True)
class MixtureSpec:
    classes: tuple[ClassSpec, ...]
    seed: int = 0

    def __post_init__(self):
        if not self.classes:
            raise InvalidInputError("mixture needs at least one class")
        dims = {len(c.mean) for c in self.classes}
        if len(dims) != 1 or 0 in dims:
            raise InvalidInputError("all class means must share one positive dimension")
        for c in self.classes:
            if not c.std > 0:
                raise InvalidInputError(f"class std must be positive, got {c.std}")
            if c.count < 0:
                raise InvalidInputError(f"class count must be nonnegative, got {c.count}")

    @property
    def dim(self) -> int:
        return len(self.classes[0].mean)


def _class_rng(seed: int, class_index: int) -> np.random.Generator:
    # Counter-based stream keyed by (seed, class); samples and coordinates
    # occupy fixed positions in that stream.
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, class_index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def generate(spec: MixtureSpec) -> FeatureBatch:
    """Draw ``count_c`` isotropic Gaussian samples per class, in class order."""
    blocks, labels = [], []
    for c, cls in enumerate(spec.classes):
        noise = _class_rng(spec.seed, c).standard_normal((cls.count, spec.dim))
        blocks.append(np.asarray(cls.mean, dtype=np.float64) + cls.std * noise)
        labels.append(np.full(cls.count, c, dtype=np.int64))
    # Rounded to float32 so in-memory batches match their EQFT serialization.
    data = np.concatenate(blocks).astype(np.float32).astype(np.float64)
    return FeatureBatch(data, np.concatenate(labels))


def simplex_means(num_classes: int, dim: int, separation: float) -> np.ndarray:
    """``num_classes`` points in ``dim`` dims, pairwise distance ``separation``, centred at 0."""
    if num_classes < 1:
        raise InvalidInputError("num_classes must be positive")
    if dim < num_classes:
        raise InvalidInputError(f"dim={dim} must be >= num_classes={num_classes} for a simplex")
    basis = np.eye(num_classes, dim)
    centred = basis - basis.mean(axis=0)
    return centred * (separation / math.sqrt(2.0))


def diversity_ladder(num_classes: int, dim: int, base_std: float, ratio: float, seed: int,
                     per_class: int = 200, separation: float = 4.0) -> MixtureSpec:
    """Classes with geometrically growing spread: ``std_c = base_std * ratio**c``."""
    if not ratio > 1:
        raise InvalidInputError(f"ratio must exceed 1, got {ratio}")
    means = simplex_means(num_classes, dim, separation)
    classes = tuple(
        ClassSpec(tuple(float(v) for v in means[c]), float(base_std * ratio**c), per_class)
        for c in range(num_classes)
    )
    return MixtureSpec(classes, seed)


def uniform_mixture(num_classes: int, dim: int, std: float, per_class: int, seed: int,
                    separation: float = 4.0) -> MixtureSpec:
    """Equal-spread classes on a simplex."""
    means = simplex_means(num_classes, dim, separation)
    classes = tuple(
        ClassSpec(tuple(float(v) for v in means[c]), float(std), per_class)
        for c in range(num_classes)
    )
    return MixtureSpec(classes, seed)


def write_features(batch: FeatureBatch, path) -> None:
    n, d = batch.data.shape
    has_labels = batch.labels is not None
    if n > _U32_MAX or d > _U32_MAX:
        raise InvalidInputError("feature matrix too large for u32 header fields")
    if has_labels and batch.labels.size and batch.labels.max() > _U32_MAX:
        raise InvalidInputError("label exceeds u32 range")
    parts = [
        _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, n, d, int(has_labels)),
        np.ascontiguousarray(batch.data, dtype="<f4").tobytes(),
    ]
    if has_labels:
        parts.append(np.ascontiguousarray(batch.labels, dtype="<u4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_features(path) -> FeatureBatch:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != FEATURE_MAGIC:
        raise FormatError("bad feature-file magic", 0)
    if len(raw) < _HEADER.size:
        raise FormatError("truncated feature-file header", len(raw))
    _, version, n, d, has_labels = _HEADER.unpack_from(raw, 0)
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature-file version {version}", 4)
    if has_labels not in (0, 1):
        raise FormatError(f"invalid has_labels flag {has_labels}", 16)
    offset = _HEADER.size
    data_bytes = 4 * n * d
    label_bytes = 4 * n if has_labels else 0
    expected = offset + data_bytes + label_bytes
    if n * d > (len(raw) - offset) // 4:
        raise FormatError(f"dimension overflow: N={n}, D={d} exceeds payload", offset)
    if len(raw) < expected:
        raise FormatError(f"truncated payload: need {expected} bytes, have {len(raw)}", len(raw))
    if len(raw) > expected:
        raise FormatError("trailing bytes after payload", expected)
    data = np.frombuffer(raw, dtype="<f4", count=n * d, offset=offset).astype(np.float64).reshape(n, d)
    labels = None
    if has_labels:
        labels = np.frombuffer(raw, dtype="<u4", count=n, offset=offset + data_bytes).astype(np.int64)
    try:
        return FeatureBatch(data, labels)
    except InvalidInputError as exc:
        raise FormatError(str(exc), offset) from exc
