"""Product quantization with normalized nearest-codeword assignment.

An expanded feature of dimension ``d_E`` is cut into ``M`` contiguous
subvectors; each subvector is matched against its own codebook of ``K``
codewords by squared Euclidean distance between unit-normalized operands.
The quantized vector is the concatenation of the selected (un-normalized)
codewords.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, InvalidInputError

NORM_EPS = 1e-12

CODEBOOK_MAGIC = b"PQCB"
CODEBOOK_VERSION = 1

# STEGO-style baseline: a 70-dim float32 vector.
REFERENCE_FLOAT_DIM = 70
REFERENCE_FLOAT_BITS = 32


@dataclass(frozen=True)
class QuantizerConfig:
    num_codebooks: int
    codebook_size: int
    expanded_dim: int

    def __post_init__(self):
        for name in ("num_codebooks", "codebook_size", "expanded_dim"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise InvalidInputError(f"{name} must be a positive integer, got {value!r}")
        if self.expanded_dim % self.num_codebooks != 0:
            raise InvalidInputError(
                f"expanded_dim={self.expanded_dim} is not divisible by "
                f"num_codebooks={self.num_codebooks}"
            )

    @property
    def subvector_dim(self) -> int:
        return self.expanded_dim // self.num_codebooks


@dataclass(frozen=True)
class Codebooks:
    """``entries[m, k]`` is codeword ``k`` of codebook ``m``."""

    entries: np.ndarray
    config: QuantizerConfig

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=np.float64)
        cfg = self.config
        expected = (cfg.num_codebooks, cfg.codebook_size, cfg.subvector_dim)
        if entries.shape != expected:
            raise InvalidInputError(f"codebook shape {entries.shape} != {expected}")
        if not np.all(np.isfinite(entries)):
            raise InvalidInputError("codebooks contain non-finite values")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def xavier_uniform(cls, config: QuantizerConfig, seed: int) -> "Codebooks":
        """Xavier-uniform init, treating each codebook as a K x subvector_dim weight."""
        rng = np.random.default_rng(seed)
        bound = math.sqrt(6.0 / (config.codebook_size + config.subvector_dim))
        shape = (config.num_codebooks, config.codebook_size, config.subvector_dim)
        return cls(rng.uniform(-bound, bound, size=shape), config)


@dataclass(frozen=True)
class QuantizeResult:
    quantized: np.ndarray
    combination: tuple[int, ...]


def _as_vector(x, length: int, what: str = "input") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] != length:
        raise InvalidInputError(f"{what} has shape {arr.shape}, expected ({length},)")
    return arr


def split(x, config: QuantizerConfig) -> list[np.ndarray]:
    """Cut ``x`` into ``M`` contiguous subvectors of length ``d_E / M``."""
    arr = _as_vector(x, config.expanded_dim)
    s = config.subvector_dim
    return [arr[m * s:(m + 1) * s].copy() for m in range(config.num_codebooks)]


def normalize_rows(a: np.ndarray) -> np.ndarray:
    """Unit-normalize along the last axis; rows with norm below 1e-12 become zero."""
    a = np.asarray(a, dtype=np.float64)
    norms = np.sqrt(np.sum(a * a, axis=-1, keepdims=True))
    safe = np.where(norms < NORM_EPS, 1.0, norms)
    return np.where(norms < NORM_EPS, 0.0, a / safe)


def _normalized_sq_dist(sub: np.ndarray, book: np.ndarray) -> np.ndarray:
    """Squared distance between unit-normalized ``sub`` (..., s) and ``book`` (..., K, s).

    A zero-norm operand normalizes to the zero vector, whose distance to any
    unit vector is exactly 1; those entries are set exactly rather than left
    to rounding in ``||v||^2`` so that ties fall to the smallest index.
    """
    sub_zero = np.sqrt(np.sum(sub * sub, axis=-1)) < NORM_EPS
    book_zero = np.sqrt(np.sum(book * book, axis=-1)) < NORM_EPS
    diff = normalize_rows(sub)[..., None, :] - normalize_rows(book)
    dist = np.sum(diff * diff, axis=-1)
    sub_zero = sub_zero[..., None]
    exact = np.where(sub_zero & book_zero, 0.0, 1.0)
    return np.where(sub_zero | book_zero, exact, dist)


def assign(subvector, codebook) -> tuple[int, np.ndarray]:
    """Return ``(k, codebook[k])`` minimizing normalized squared distance.

    Ties resolve to the smallest index (``np.argmin`` semantics).
    """
    book = np.asarray(codebook, dtype=np.float64)
    if book.ndim != 2 or book.shape[0] == 0:
        raise InvalidInputError("codebook must be a nonempty K x d matrix")
    x = _as_vector(subvector, book.shape[1], "subvector")
    k = int(np.argmin(_normalized_sq_dist(x, book)))
    return k, book[k].copy()


def quantize(x, books: Codebooks) -> QuantizeResult:
    parts = split(x, books.config)
    picks = [assign(sub, books.entries[m]) for m, sub in enumerate(parts)]
    return QuantizeResult(
        quantized=np.concatenate([e for _, e in picks]),
        combination=tuple(k for k, _ in picks),
    )


def assign_codes(data, books: Codebooks, chunk_rows: int | None = None) -> np.ndarray:
    """Vectorized assignment of every subvector of every row; returns ``(N, M)`` ints.

    Each row is handled independently, so the result is identical to applying
    :func:`quantize` row by row.
    """
    cfg = books.config
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != cfg.expanded_dim:
        raise InvalidInputError(
            f"feature matrix has shape {data.shape}, expected (N, {cfg.expanded_dim})"
        )
    n = data.shape[0]
    M, K, s = cfg.num_codebooks, cfg.codebook_size, cfg.subvector_dim
    codes = np.empty((n, M), dtype=np.int64)
    if n == 0:
        return codes
    if chunk_rows is None:
        chunk_rows = max(1, (1 << 22) // (M * K * s))
    for start in range(0, n, chunk_rows):
        sub = data[start:start + chunk_rows].reshape(-1, M, s)
        codes[start:start + chunk_rows] = np.argmin(_normalized_sq_dist(sub, books.entries), axis=-1)
    return codes


def reconstruct(codes, books: Codebooks) -> np.ndarray:
    """Concatenate the selected codewords for each row of ``codes``."""
    codes = np.asarray(codes, dtype=np.int64)
    cfg = books.config
    picked = books.entries[np.arange(cfg.num_codebooks)[None, :], codes]  # (N, M, s)
    return picked.reshape(codes.shape[0], cfg.expanded_dim)


def _rows_of(batch):
    if isinstance(batch, np.ndarray):
        return batch
    return getattr(batch, "data", batch)  # FeatureBatch or sequence of rows


def quantize_batch(batch, books: Codebooks) -> list[QuantizeResult]:
    """Quantize each row of ``batch`` (an array or a FeatureBatch) independently."""
    rows = _rows_of(batch)
    d = books.config.expanded_dim
    for i, row in enumerate(rows):
        if np.ndim(row) != 1 or len(row) != d:
            raise InvalidInputError(f"row {i} has shape {np.shape(row)}, expected ({d},)")
    if len(rows) == 0:
        return []
    data = np.asarray(rows, dtype=np.float64)
    codes = assign_codes(data, books)
    recon = reconstruct(codes, books)
    return [
        QuantizeResult(quantized=recon[i], combination=tuple(int(k) for k in codes[i]))
        for i in range(len(codes))
    ]


def code_bits(config: QuantizerConfig) -> tuple[float, float]:
    """Bits per codeword index and bits for a whole code: ``(log2 K, M log2 K)``."""
    per = math.log2(config.codebook_size)
    return per, config.num_codebooks * per


def bit_accounting(config: QuantizerConfig,
                   reference_dim: int = REFERENCE_FLOAT_DIM,
                   reference_float_bits: int = REFERENCE_FLOAT_BITS) -> dict:
    """Compare the PQ code size against a dense float vector of ``reference_dim``."""
    per, total = code_bits(config)
    ref_bits = reference_dim * reference_float_bits
    return {
        "num_codebooks": config.num_codebooks,
        "codebook_size": config.codebook_size,
        "expanded_dim": config.expanded_dim,
        "bits_per_code": per,
        "code_bits": total,
        "reference_float_dim": reference_dim,
        "reference_float_bits": ref_bits,
        "compression_ratio": ref_bits / total if total > 0 else math.inf,
    }


def write_codebooks(books: Codebooks, path) -> None:
    cfg = books.config
    header = CODEBOOK_MAGIC + struct.pack(
        "<IIII", CODEBOOK_VERSION, cfg.num_codebooks, cfg.codebook_size, cfg.subvector_dim
    )
    payload = np.ascontiguousarray(books.entries, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_codebooks(path) -> Codebooks:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != CODEBOOK_MAGIC:
        raise FormatError("bad codebook magic", 0)
    if len(raw) < 20:
        raise FormatError("truncated codebook header", len(raw))
    version, M, K, s = struct.unpack_from("<IIII", raw, 4)
    if version != CODEBOOK_VERSION:
        raise FormatError(f"unsupported codebook version {version}", 4)
    if M == 0 or K == 0 or s == 0:
        raise FormatError("zero codebook dimension", 8)
    count = M * K * s
    expected = 20 + 4 * count
    if len(raw) < expected:
        raise FormatError(f"truncated codebook payload: need {expected} bytes", len(raw))
    if len(raw) > expected:
        raise FormatError("trailing bytes after codebook payload", expected)
    entries = np.frombuffer(raw, dtype="<f4", count=count, offset=20).astype(np.float64)
    cfg = QuantizerConfig(M, K, M * s)
    return Codebooks(entries.reshape(M, K, s), cfg)
