"""Information content of feature populations, in bits.

Discrete codes: per-codebook empirical PMFs and their summed Shannon entropy.
Continuous features: each dimension is uniformly binned over its min-max
range, with the bin count chosen as the smallest count whose mean
quantization error (distance to bin centre) is within ``delta_fraction`` of
the range; entropies of the per-dimension bin frequencies are then summed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .datagen import as_matrix
from .errors import DataCorruptionError, InvalidInputError
from .quantizer import QuantizerConfig


@dataclass(frozen=True)
class EmpiricalPmf:
    probs: np.ndarray  # (M, K)
    sample_count: int


def _as_codes(combinations, config: QuantizerConfig) -> np.ndarray:
    codes = np.asarray([tuple(c) for c in combinations] if not isinstance(combinations, np.ndarray)
                       else combinations)
    if codes.size == 0:
        raise InvalidInputError("need at least one code combination")
    if codes.ndim != 2 or codes.shape[1] != config.num_codebooks:
        raise InvalidInputError(f"combinations must be N x {config.num_codebooks}, got {codes.shape}")
    if not np.issubdtype(codes.dtype, np.integer):
        raise DataCorruptionError("codeword indices must be integers")
    if codes.min() < 0 or codes.max() >= config.codebook_size:
        raise DataCorruptionError(f"codeword index outside [0, {config.codebook_size})")
    return codes.astype(np.int64)


def code_counts(codes: np.ndarray, num_codebooks: int, codebook_size: int) -> np.ndarray:
    """``counts[m, k]`` = number of rows with ``codes[:, m] == k``."""
    counts = np.zeros((num_codebooks, codebook_size), dtype=np.int64)
    if codes.size:
        rows = np.broadcast_to(np.arange(num_codebooks), codes.shape)
        np.add.at(counts, (rows, codes), 1)
    return counts


def empirical_pmf(combinations, config: QuantizerConfig) -> EmpiricalPmf:
    codes = _as_codes(combinations, config)
    counts = code_counts(codes, config.num_codebooks, config.codebook_size)
    n = codes.shape[0]
    return EmpiricalPmf(counts / n, n)


def entropy_bits(probs) -> np.ndarray:
    """Row-wise Shannon entropy in bits, with 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    safe = np.where(p > 0, p, 1.0)
    return -np.sum(np.where(p > 0, p * np.log2(safe), 0.0), axis=-1)


def per_codebook_entropy(pmf: EmpiricalPmf) -> np.ndarray:
    return entropy_bits(pmf.probs)


def sum_entropy(pmf: EmpiricalPmf) -> float:
    return float(np.sum(per_codebook_entropy(pmf)))


def per_class_entropy(combinations, labels, config: QuantizerConfig) -> dict[int, float]:
    codes = _as_codes(combinations, config)
    labels = np.asarray(labels)
    if labels.shape != (codes.shape[0],):
        raise InvalidInputError(f"{labels.shape[0] if labels.ndim else 0} labels for {codes.shape[0]} combinations")
    return {
        int(c): sum_entropy(empirical_pmf(codes[labels == c], config))
        for c in np.unique(labels)
    }


@dataclass(frozen=True)
class BinEdges:
    """Uniform bins over one feature dimension.

    Bin ``i`` (0-based) covers ``(edges[i], edges[i+1]]``; ``edges[0]`` itself
    belongs to bin 0.
    """

    edges: np.ndarray
    delta: float

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.float64)
        if edges.ndim != 1 or edges.size < 2:
            raise InvalidInputError("need at least two bin edges")
        if not np.all(np.diff(edges) > 0):
            raise InvalidInputError("bin edges must be strictly increasing")
        object.__setattr__(self, "edges", edges)

    @property
    def num_bins(self) -> int:
        return self.edges.size - 1

    def bin_index(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=np.float64)
        if np.any(v < self.edges[0]) or np.any(v > self.edges[-1]):
            raise InvalidInputError("value outside histogram range")
        idx = np.searchsorted(self.edges, v, side="left") - 1
        return np.clip(idx, 0, self.num_bins - 1)


@dataclass(frozen=True)
class HistogramSpec:
    dims: tuple[BinEdges, ...]

    @property
    def bin_counts(self) -> tuple[int, ...]:
        return tuple(d.num_bins for d in self.dims)

    @property
    def deltas(self) -> tuple[float, ...]:
        return tuple(d.delta for d in self.dims)


def _uniform_edges(lo: float, hi: float, bins: int) -> np.ndarray:
    if hi <= lo:
        # constant data: a unit-width bin centred on the value
        return np.linspace(lo - 0.5, lo + 0.5, bins + 1)
    edges = np.linspace(lo, hi, bins + 1)
    edges[-1] = hi
    return edges


def mean_quantization_error(values: np.ndarray, edges: np.ndarray) -> float:
    """Mean |x - centre(bin(x))| under the half-open binning rule."""
    idx = np.clip(np.searchsorted(edges, values, side="left") - 1, 0, edges.size - 2)
    centres = 0.5 * (edges[:-1] + edges[1:])
    return float(np.mean(np.abs(values - centres[idx])))


def build_histogram_spec(values, delta_fraction: float = 0.001) -> BinEdges:
    """Smallest uniform bin count meeting the mean-error threshold for one dimension.

    Grows the bin count by doubling until the threshold holds, then binary
    searches between the last failing and first passing counts; the result
    passes while one bin fewer fails.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise InvalidInputError("need at least one value")
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("values must be finite")
    lo, hi = float(v.min()), float(v.max())
    delta = delta_fraction * (hi - lo)
    if hi <= lo:
        return BinEdges(_uniform_edges(lo, hi, 1), delta)

    slack = 1e-12 * (hi - lo)  # absorbs rounding in bin centres

    def ok(b: int) -> bool:
        return mean_quantization_error(v, _uniform_edges(lo, hi, b)) <= delta + slack

    if ok(1):
        return BinEdges(_uniform_edges(lo, hi, 1), delta)
    bad, good = 1, 2
    while not ok(good):
        bad, good = good, good * 2
    while good - bad > 1:
        mid = (bad + good) // 2
        if ok(mid):
            good = mid
        else:
            bad = mid
    return BinEdges(_uniform_edges(lo, hi, good), delta)


def fit_histogram_spec(features, delta_fraction: float = 0.001) -> HistogramSpec:
    data = as_matrix(features)
    if data.ndim != 2 or data.shape[0] == 0:
        raise InvalidInputError("need a nonempty 2-D feature matrix")
    return HistogramSpec(tuple(build_histogram_spec(data[:, j], delta_fraction) for j in range(data.shape[1])))


def histogram_dim_entropies(features, spec: HistogramSpec) -> np.ndarray:
    data = as_matrix(features)
    if data.ndim != 2 or data.shape[1] != len(spec.dims):
        raise InvalidInputError(f"features have {data.shape[-1]} dims, spec covers {len(spec.dims)}")
    n = data.shape[0]
    if n == 0:
        raise InvalidInputError("need at least one sample")
    bits = np.empty(data.shape[1])
    for j, dim in enumerate(spec.dims):
        counts = np.bincount(dim.bin_index(data[:, j]), minlength=dim.num_bins)
        bits[j] = entropy_bits(counts / n)
    return bits


def histogram_entropy(features, spec: HistogramSpec) -> float:
    return float(np.sum(histogram_dim_entropies(features, spec)))


def entropy_report(combinations, config: QuantizerConfig, labels=None) -> dict:
    """JSON-ready summary of the code entropy of a population."""
    codes = _as_codes(combinations, config)
    pmf = empirical_pmf(codes, config)
    report = {
        "total_bits": sum_entropy(pmf),
        "per_codebook_bits": [float(b) for b in per_codebook_entropy(pmf)],
        "per_class_bits": {},
        "sample_count": pmf.sample_count,
    }
    if labels is not None:
        report["per_class_bits"] = {str(k): v for k, v in per_class_entropy(codes, labels, config).items()}
    return report
