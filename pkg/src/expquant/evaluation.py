"""Unsupervised clustering evaluation and linear probing.

Clusters are matched to ground-truth classes with the Hungarian algorithm;
the matched confusion matrix then yields pixel accuracy, mIoU, and mean
class accuracy (mAcc, the unweighted mean of per-class recall).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .datagen import as_matrix
from .errors import InvalidInputError
from .training import AdamState, adam_step


@dataclass(frozen=True)
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    objectives: list[float]
    iterations: int

    def __iter__(self):
        yield self.centroids
        yield self.assignments


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = np.sum(x * x, axis=1)[:, None] + np.sum(c * c, axis=1)[None, :] - 2.0 * (x @ c.T)
    return np.maximum(d, 0.0)


def _plusplus_seed(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centres = [x[rng.integers(n)]]
    closest = np.sum((x - centres[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centres.append(x[idx])
        closest = np.minimum(closest, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centres)


def _lloyd(x: np.ndarray, centroids: np.ndarray, max_iters: int) -> KMeansResult:
    k = centroids.shape[0]
    assign = None
    objectives = []
    it = 0
    for it in range(1, max_iters + 1):
        d = _sq_dists(x, centroids)
        new_assign = np.argmin(d, axis=1)
        objectives.append(float(np.sum(d[np.arange(x.shape[0]), new_assign])))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, x)
        point_err = d[np.arange(x.shape[0]), assign]
        for j in range(k):
            if counts[j] > 0:
                centroids[j] = sums[j] / counts[j]
            else:
                far = int(np.argmax(point_err))
                centroids[j] = x[far]
                point_err[far] = 0.0
    return KMeansResult(centroids, assign, objectives, it)


def kmeans(features, k: int, max_iters: int = 100, seed: int = 0, n_init: int = 1) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeding; best of ``n_init`` restarts by objective."""
    x = as_matrix(features)
    if x.ndim != 2:
        raise InvalidInputError("features must be a 2-D matrix")
    if k < 1 or max_iters < 1 or n_init < 1:
        raise InvalidInputError("k, max_iters and n_init must be positive")
    if x.shape[0] < k:
        raise InvalidInputError(f"need at least k={k} samples, got {x.shape[0]}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        run = _lloyd(x, _plusplus_seed(x, k, rng), max_iters)
        if best is None or run.objectives[-1] < best.objectives[-1]:
            best = run
    return best


def hungarian(cost) -> np.ndarray:
    """Minimum-cost perfect assignment; ``perm[i]`` is the column for row ``i``.

    Shortest augmenting path with row/column potentials, O(n^3).
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise InvalidInputError(f"cost matrix must be square, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise InvalidInputError("cost matrix must be finite")
    n = c.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=np.int64)  # owner[j]: row (1-based) matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            reduced = c[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    perm = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        perm[owner[j] - 1] = j - 1
    return perm


@dataclass(frozen=True)
class ConfusionMatrix:
    """``counts[p, t]``: samples predicted as class index p with true class index t.

    The first ``len(classes)`` indices are real classes (labels in
    ``classes``); any further indices are padding for unmatched clusters.
    """

    counts: np.ndarray
    classes: tuple[int, ...]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    miou: float
    mean_class_accuracy: float
    per_class_accuracy: dict[int, float]
    per_class_iou: dict[int, float] = field(default_factory=dict)
    assignment: dict[int, int | None] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "miou": self.miou,
            "mean_class_accuracy": self.mean_class_accuracy,
            "per_class_accuracy": {str(k): v for k, v in sorted(self.per_class_accuracy.items())},
            "per_class_iou": {str(k): v for k, v in sorted(self.per_class_iou.items())},
            "assignment": {str(k): v for k, v in sorted(self.assignment.items())},
        }


def match_clusters(pred, truth) -> tuple[dict[int, int | None], ConfusionMatrix]:
    """Hungarian-match cluster ids to class labels, maximizing agreement.

    The co-occurrence matrix is zero-padded to square; clusters matched to a
    padding column map to None and count as errors.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise InvalidInputError(f"prediction and truth lengths differ: {pred.shape} vs {truth.shape}")
    clusters, p_idx = np.unique(pred, return_inverse=True)
    classes, t_idx = np.unique(truth, return_inverse=True)
    n = max(len(clusters), len(classes), 1)
    co = np.zeros((n, n), dtype=np.int64)
    np.add.at(co, (p_idx, t_idx), 1)
    perm = hungarian(co.max() - co)
    counts = np.zeros((n, n), dtype=np.int64)
    np.add.at(counts, (perm[p_idx], t_idx), 1)
    mapping = {
        int(cl): (int(classes[perm[i]]) if perm[i] < len(classes) else None)
        for i, cl in enumerate(clusters)
    }
    return mapping, ConfusionMatrix(counts, tuple(int(c) for c in classes))


def confusion_from_predictions(pred, truth) -> ConfusionMatrix:
    """Confusion matrix for predictions already expressed as class labels."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise InvalidInputError("prediction and truth lengths differ")
    classes = np.unique(np.concatenate([truth, pred]))
    truth_classes = np.unique(truth)
    order = list(truth_classes) + [c for c in classes if c not in set(truth_classes)]
    index = {int(c): i for i, c in enumerate(order)}
    counts = np.zeros((len(order), len(order)), dtype=np.int64)
    np.add.at(counts, ([index[int(p)] for p in pred], [index[int(t)] for t in truth]), 1)
    return ConfusionMatrix(counts, tuple(int(c) for c in order))


def metrics(cm) -> EvalReport:
    """Accuracy, mIoU, and mAcc of a confusion matrix (rows predicted, columns true)."""
    if isinstance(cm, ConfusionMatrix):
        counts, classes = cm.counts, cm.classes
    else:
        counts = np.asarray(cm)
        classes = tuple(range(counts.shape[1]))
    counts = np.asarray(counts, dtype=np.int64)
    if counts.ndim != 2 or counts.shape[0] != counts.shape[1] or counts.size == 0:
        raise InvalidInputError("confusion matrix must be a nonempty square matrix")
    total = counts.sum()
    if total == 0:
        raise InvalidInputError("confusion matrix is all zeros")
    tp = np.diag(counts)
    pred_count = counts.sum(axis=1)
    true_count = counts.sum(axis=0)
    per_acc, per_iou = {}, {}
    for i, label in enumerate(classes):
        if true_count[i] > 0:
            per_acc[label] = float(tp[i] / true_count[i])
        union = pred_count[i] + true_count[i] - tp[i]
        if union > 0:
            per_iou[label] = float(tp[i] / union)
    return EvalReport(
        accuracy=float(tp.sum() / total),
        miou=float(np.mean(list(per_iou.values()))) if per_iou else 0.0,
        mean_class_accuracy=float(np.mean(list(per_acc.values()))) if per_acc else 0.0,
        per_class_accuracy=per_acc,
        per_class_iou=per_iou,
    )


def evaluate_clustering(features, labels, k: int | None = None, seed: int = 0, max_iters: int = 100,
                        n_init: int = 1) -> EvalReport:
    """k-means -> Hungarian matching -> metrics, in one call."""
    labels = np.asarray(labels)
    k = k if k is not None else int(np.unique(labels).size)
    result = kmeans(features, k, max_iters=max_iters, seed=seed, n_init=n_init)
    mapping, cm = match_clusters(result.assignments, labels)
    report = metrics(cm)
    return EvalReport(report.accuracy, report.miou, report.mean_class_accuracy,
                      report.per_class_accuracy, report.per_class_iou, mapping)


@dataclass
class ProbeResult:
    weight: np.ndarray   # (C, D)
    bias: np.ndarray     # (C,)
    classes: tuple[int, ...]
    accuracy: float
    losses: list[float]

    def predict(self, features) -> np.ndarray:
        x = as_matrix(features)
        logits = x @ self.weight.T + self.bias
        return np.asarray(self.classes)[np.argmax(logits, axis=1)]


def probe_loss(weight: np.ndarray, bias: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean softmax cross-entropy and its gradients w.r.t. weight and bias.

    ``y`` holds class indices in ``[0, C)``.
    """
    logits = x @ weight.T + bias
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=1))
    n = x.shape[0]
    loss = float(np.mean(log_z - shifted[np.arange(n), y]))
    probs = np.exp(shifted - log_z[:, None])
    probs[np.arange(n), y] -= 1.0
    probs /= n
    return loss, probs.T @ x, probs.sum(axis=0)


def linear_probe(features, labels, lr: float = 3e-3, epochs: int = 500, seed: int = 0,
                 init_scale: float = 0.0) -> ProbeResult:
    """Full-batch Adam on a single linear softmax layer over frozen features.

    The probe starts from zeros unless ``init_scale`` is positive, in which
    case weights are drawn uniformly from ``[-init_scale, init_scale]`` with
    ``seed``. The input features are never modified.
    """
    x = np.array(as_matrix(features), dtype=np.float64)
    labels = np.asarray(labels)
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise InvalidInputError("labels must align with feature rows")
    classes, y = np.unique(labels, return_inverse=True)
    if classes.size < 2:
        raise InvalidInputError("linear probing needs at least two classes")
    if not lr > 0 or epochs < 0:
        raise InvalidInputError("lr must be positive and epochs nonnegative")
    c, d = classes.size, x.shape[1]
    weight = np.zeros((c, d))
    if init_scale > 0:
        weight = np.random.default_rng(seed).uniform(-init_scale, init_scale, size=(c, d))
    params = {"weight": weight, "bias": np.zeros(c)}
    state = AdamState()
    losses = []
    for _ in range(epochs):
        loss, gw, gb = probe_loss(params["weight"], params["bias"], x, y)
        losses.append(loss)
        adam_step(params, {"weight": gw, "bias": gb}, state, lr)
    result = ProbeResult(params["weight"], params["bias"], tuple(int(v) for v in classes), 0.0, losses)
    result.accuracy = float(np.mean(result.predict(x) == labels))
    return result


def write_confusion_csv(cm: ConfusionMatrix, path) -> None:
    n = cm.counts.shape[0]
    names = [str(c) for c in cm.classes] + [f"unmatched{i}" for i in range(n - len(cm.classes))]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["predicted\\true"] + names)
        for name, row in zip(names, cm.counts):
            w.writerow([name] + [int(v) for v in row])


def write_report_json(report: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
