"""Code-space analytics: combination distances, class distance matrices,
codeword frequency tables, and the entropy/accuracy relationship."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import stats
from scipy.spatial.distance import cdist

from .entropy import code_counts
from .errors import InvalidInputError
from .quantizer import QuantizeResult

COMBINATION_HAMMING = "combination_hamming"
QUANTIZED_EUCLIDEAN = "quantized_euclidean"


@dataclass(frozen=True)
class DistanceMatrix:
    classes: tuple[int, ...]
    values: np.ndarray
    metric: str
    samples_per_class: int


@dataclass(frozen=True)
class FrequencyTable:
    counts: np.ndarray  # (M, K) ints
    sample_count: int


def combination_of(result: QuantizeResult) -> tuple[int, ...]:
    return tuple(result.combination)


def combination_distance(a: Sequence[int], b: Sequence[int]) -> int:
    """Number of codebooks whose selected index differs."""
    if len(a) != len(b):
        raise InvalidInputError(f"combination lengths differ: {len(a)} vs {len(b)}")
    return sum(1 for x, y in zip(a, b) if x != y)


def _codes_of(results) -> np.ndarray:
    if isinstance(results, np.ndarray):
        return results.astype(np.int64)
    return np.asarray([r.combination for r in results], dtype=np.int64)


def _sample_classes(labels: np.ndarray, samples_per_class: int, seed: int) -> dict[int, np.ndarray]:
    if labels.size == 0:
        raise InvalidInputError("no classes to compare")
    if samples_per_class < 1:
        raise InvalidInputError("samples_per_class must be positive")
    rng = np.random.default_rng(seed)
    picked = {}
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if members.size > samples_per_class:
            members = np.sort(rng.choice(members, size=samples_per_class, replace=False))
        picked[int(c)] = members
    return picked


def class_distance_matrix(results, labels, metric: str = COMBINATION_HAMMING,
                          samples_per_class: int = 10000, seed: int = 0) -> DistanceMatrix:
    """Class-by-class mean pairwise distance under ``metric``.

    ``results`` is a list of QuantizeResult, or a raw array: an ``(N, M)`` code
    matrix for the Hamming metric, an ``(N, d_E)`` matrix for Euclidean.
    Members are sampled without replacement, at most ``samples_per_class``
    per class.
    """
    if metric == COMBINATION_HAMMING:
        return hamming_matrix(results, labels, samples_per_class, seed)
    if metric == QUANTIZED_EUCLIDEAN:
        return quantized_euclidean_matrix(results, labels, samples_per_class, seed)
    raise InvalidInputError(f"unknown metric {metric!r}")


def hamming_matrix(codes, labels, samples_per_class: int = 10000, seed: int = 0) -> DistanceMatrix:
    """Mean combination-Hamming distance between (and within) classes.

    Diagonal entries average over distinct unordered pairs; a class with a
    single sampled member gets 0. Computed exactly from per-class codeword
    counts: two members agree at codebook m iff they picked the same codeword.
    """
    codes = _codes_of(codes)
    labels = np.asarray(labels)
    if labels.shape[0] != codes.shape[0]:
        raise InvalidInputError("labels and codes are misaligned")
    picked = _sample_classes(labels, samples_per_class, seed)
    classes = tuple(picked)
    M = codes.shape[1]
    K = int(codes.max()) + 1
    counts = {c: code_counts(codes[idx], M, K) for c, idx in picked.items()}
    values = np.zeros((len(classes), len(classes)))
    for i, a in enumerate(classes):
        na = picked[a].size
        for j in range(i, len(classes)):
            b = classes[j]
            nb = picked[b].size
            agree = int(np.sum(counts[a] * counts[b]))
            if i == j:
                pairs = na * (na - 1)
                # ordered pairs incl. self-pairs, whose distance is 0
                values[i, i] = (na * na * M - agree) / pairs if pairs else 0.0
            else:
                values[i, j] = values[j, i] = (na * nb * M - agree) / (na * nb)
    return DistanceMatrix(classes, values, COMBINATION_HAMMING, samples_per_class)


def quantized_euclidean_matrix(quantized, labels, samples_per_class: int = 10000, seed: int = 0,
                               chunk: int = 2048) -> DistanceMatrix:
    """Mean Euclidean distance between quantized vectors of two classes."""
    q = np.asarray([r.quantized for r in quantized] if not isinstance(quantized, np.ndarray) else quantized,
                   dtype=np.float64)
    labels = np.asarray(labels)
    if labels.shape[0] != q.shape[0]:
        raise InvalidInputError("labels and vectors are misaligned")
    picked = _sample_classes(labels, samples_per_class, seed)
    classes = tuple(picked)
    values = np.zeros((len(classes), len(classes)))
    for i, a in enumerate(classes):
        qa = q[picked[a]]
        for j in range(i, len(classes)):
            qb = q[picked[classes[j]]]
            total = 0.0
            for s in range(0, qa.shape[0], chunk):
                total += float(np.sum(cdist(qa[s:s + chunk], qb)))
            if i == j:
                n = qa.shape[0]
                values[i, i] = total / (n * (n - 1)) if n > 1 else 0.0
            else:
                values[i, j] = values[j, i] = total / (qa.shape[0] * qb.shape[0])
    return DistanceMatrix(classes, values, QUANTIZED_EUCLIDEAN, samples_per_class)


def codeword_frequencies(codes, labels=None, class_filter=None, codebook_size: int | None = None) -> FrequencyTable:
    """Counts of each selected codeword per codebook, optionally for one class."""
    codes = _codes_of(codes)
    if codes.ndim != 2:
        raise InvalidInputError("codes must be N x M")
    K = codebook_size if codebook_size is not None else (int(codes.max()) + 1 if codes.size else 1)
    if class_filter is not None:
        if labels is None:
            raise InvalidInputError("class filter needs labels")
        labels = np.asarray(labels)
        if labels.shape[0] != codes.shape[0]:
            raise InvalidInputError("labels and codes are misaligned")
        codes = codes[labels == class_filter]
    elif labels is not None and np.asarray(labels).shape[0] != codes.shape[0]:
        raise InvalidInputError("labels and codes are misaligned")
    return FrequencyTable(code_counts(codes, codes.shape[1], K), int(codes.shape[0]))


@dataclass(frozen=True)
class EntropyAccuracy:
    rows: list[tuple[int, float, float]]
    spearman: float | None


def entropy_accuracy_pairs(per_class_entropy: Mapping[int, float],
                           per_class_accuracy: Mapping[int, float]) -> EntropyAccuracy:
    """Pair per-class bits with accuracy, sorted by bits, plus their Spearman rho."""
    if set(per_class_entropy) != set(per_class_accuracy):
        raise InvalidInputError("entropy and accuracy maps cover different classes")
    rows = sorted(((c, float(per_class_entropy[c]), float(per_class_accuracy[c])) for c in per_class_entropy),
                  key=lambda r: (r[1], r[0]))
    rho = None
    if len(rows) >= 2:
        bits = [r[1] for r in rows]
        acc = [r[2] for r in rows]
        if len(set(bits)) > 1 and len(set(acc)) > 1:
            rho = float(stats.spearmanr(bits, acc).statistic)
    return EntropyAccuracy(rows, rho)


def write_matrix_csv(matrix: DistanceMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class"] + list(matrix.classes))
        for c, row in zip(matrix.classes, matrix.values):
            w.writerow([c] + [repr(float(v)) for v in row])


def write_frequency_csv(table: FrequencyTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["codebook", "codeword", "count"])
        M, K = table.counts.shape
        for m in range(M):
            for k in range(K):
                w.writerow([m, k, int(table.counts[m, k])])


def write_entropy_accuracy(pairs: EntropyAccuracy, csv_path, json_path) -> None:
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "bits", "accuracy"])
        for c, bits, acc in pairs.rows:
            w.writerow([c, repr(bits), repr(acc)])
    with open(json_path, "w") as fh:
        json.dump({"spearman": pairs.spearman, "num_classes": len(pairs.rows)}, fh, indent=2, sort_keys=True)
        fh.write("\n")
