"""Losses, straight-through gradient routing, Adam, and the training loop.

Per sample, with subvectors ``x^m`` and their selected codewords ``e^m``::

    codebook = (1/M) sum_m ||sg[x^m] - e^m||^2      (moves codewords)
    commit   = (1/M) sum_m ||x^m - sg[e^m]||^2      (moves the encoder)
    total    = task + lambda_codebook * codebook + lambda_commit * commit

The task loss is evaluated on the quantized output ``q``; its gradient is
copied unchanged onto the pre-quantization feature ``x``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from . import expansion
from .datagen import FeatureBatch, as_matrix
from .errors import InvalidInputError, NumericalFailure
from .expansion import ExpansionHead
from .quantizer import Codebooks, QuantizerConfig, assign_codes, reconstruct

_F32_MAX = float(np.finfo(np.float32).max)

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "task_loss", "codebook_loss", "commit_loss", "total_loss")


@dataclass(frozen=True)
class LossWeights:
    lambda_codebook: float = 1.0
    lambda_commit: float = 0.25

    def __post_init__(self):
        if not (self.lambda_codebook >= 0 and self.lambda_commit >= 0):
            raise InvalidInputError("loss weights must be nonnegative")


@dataclass(frozen=True)
class TrainConfig:
    input_dim: int
    quantizer: QuantizerConfig
    learning_rate: float = 3e-4
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidInputError(f"learning_rate must be positive, got {self.learning_rate}")
        for name in ("input_dim", "epochs", "batch_size"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise InvalidInputError(f"{name} must be a positive integer, got {value!r}")


def _pair(subvectors, selected) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(subvectors, dtype=np.float64)
    e = np.asarray(selected, dtype=np.float64)
    if x.shape != e.shape or x.ndim != 2 or x.shape[0] == 0:
        raise InvalidInputError(f"subvectors {x.shape} and codewords {e.shape} must be matching M x d arrays")
    return x, e


def codebook_loss(subvectors, selected) -> tuple[float, np.ndarray]:
    """Value and gradient w.r.t. the selected codewords (subvectors are constants)."""
    x, e = _pair(subvectors, selected)
    m = x.shape[0]
    diff = e - x
    return float(np.sum(diff * diff) / m), (2.0 / m) * diff


def commit_loss(subvectors, selected) -> tuple[float, np.ndarray]:
    """Value and gradient w.r.t. the subvectors (codewords are constants)."""
    x, e = _pair(subvectors, selected)
    m = x.shape[0]
    diff = x - e
    return float(np.sum(diff * diff) / m), (2.0 / m) * diff


def straight_through_grad(grad_q) -> np.ndarray:
    return np.array(grad_q, dtype=np.float64, copy=True)


def grad_at_x(grad_q, commit_grad, weights: LossWeights) -> np.ndarray:
    """Total gradient reaching the pre-quantization feature."""
    return straight_through_grad(grad_q) + weights.lambda_commit * np.asarray(commit_grad, dtype=np.float64)


def total_loss(task: float, codebook: float, commit: float, w: LossWeights) -> float:
    return task + w.lambda_codebook * codebook + w.lambda_commit * commit


class TaskLoss(Protocol):
    def evaluate(self, quantized: np.ndarray, backbone: np.ndarray) -> tuple[float, np.ndarray]:
        ...


def _cosine_matrix(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    norms = np.sqrt(np.sum(a * a, axis=1))
    safe = np.where(norms < 1e-12, 1.0, norms)
    hat = np.where(norms[:, None] < 1e-12, 0.0, a / safe[:, None])
    return hat @ hat.T, hat, norms


def default_task_loss(quantized, backbone) -> tuple[float, np.ndarray]:
    """Mean squared gap between the cosine-similarity matrices of two batches.

    Returns the loss and its gradient w.r.t. ``quantized``.
    """
    q = np.asarray(quantized, dtype=np.float64)
    f = np.asarray(backbone, dtype=np.float64)
    if q.ndim != 2 or f.ndim != 2:
        raise InvalidInputError("task loss expects two 2-D batches")
    n = q.shape[0]
    if f.shape[0] != n:
        raise InvalidInputError(f"batch sizes differ: {n} quantized vs {f.shape[0]} backbone")
    if n < 2:
        raise InvalidInputError("task loss needs at least two samples")
    s_f, _, _ = _cosine_matrix(f)
    s_q, q_hat, norms = _cosine_matrix(q)
    resid = s_q - s_f
    value = float(np.sum(resid * resid) / (n * n))
    g_hat = (4.0 / (n * n)) * (resid @ q_hat)
    radial = np.sum(g_hat * q_hat, axis=1, keepdims=True)
    safe = np.where(norms < 1e-12, 1.0, norms)[:, None]
    grad = np.where(norms[:, None] < 1e-12, 0.0, (g_hat - radial * q_hat) / safe)
    return value, grad


class CosineDistillationLoss:
    """Default task loss: match backbone and output cosine-similarity structure."""

    def evaluate(self, quantized, backbone):
        return default_task_loss(quantized, backbone)


class ZeroTaskLoss:
    def evaluate(self, quantized, backbone):
        q = np.asarray(quantized, dtype=np.float64)
        return 0.0, np.zeros_like(q)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float) -> tuple[dict[str, np.ndarray], AdamState]:
    """Bias-corrected Adam update applied in place to ``params``."""
    if not lr > 0:
        raise InvalidInputError("learning rate must be positive")
    if set(grads) != set(params):
        raise InvalidInputError("gradient keys do not match parameter keys")
    for name, p in params.items():
        if np.shape(grads[name]) != np.shape(p):
            raise InvalidInputError(f"gradient for {name} has shape {np.shape(grads[name])}, expected {np.shape(p)}")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name in params:
        g = np.asarray(grads[name], dtype=np.float64)
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        params[name] -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


@dataclass(frozen=True)
class StepLosses:
    step: int
    task_loss: float
    codebook_loss: float
    commit_loss: float
    total_loss: float


@dataclass
class TrainResult:
    head: ExpansionHead
    codebooks: Codebooks
    history: list[StepLosses]


@dataclass
class BatchGradients:
    losses: tuple[float, float, float, float]
    codes: np.ndarray
    head: dict[str, np.ndarray]
    codebooks: np.ndarray


def batch_gradients(head: ExpansionHead, codebooks: Codebooks, f: np.ndarray, task: TaskLoss,
                    weights: LossWeights) -> BatchGradients:
    """One forward/backward pass over a mini-batch.

    Batch losses are means of the per-sample codebook and commitment losses;
    the task loss is evaluated on the whole batch.
    """
    cfg = codebooks.config
    M, s = cfg.num_codebooks, cfg.subvector_dim
    n = f.shape[0]
    x, trace = expansion.forward(head, f)
    codes = assign_codes(x, codebooks)
    q = reconstruct(codes, codebooks)

    if n >= 2:
        task_value, grad_q = task.evaluate(q, f)
    else:
        task_value, grad_q = 0.0, np.zeros_like(q)

    diff = (x - q).reshape(n, M, s)
    pq_value = float(np.sum(diff * diff) / (M * n))
    commit_grad = (2.0 / (M * n)) * (x - q)
    grad_x = grad_at_x(grad_q, commit_grad, weights)
    head_grads, _ = expansion.backward(head, trace, grad_x)

    book_grad = np.zeros_like(codebooks.entries)
    rows = np.broadcast_to(np.arange(M), codes.shape)
    # sample-index order accumulation keeps sums deterministic
    np.add.at(book_grad, (rows, codes), (-2.0 * weights.lambda_codebook / (M * n)) * diff)

    total = total_loss(task_value, pq_value, pq_value, weights)
    return BatchGradients((task_value, pq_value, pq_value, total), codes, head_grads, book_grad)


def initial_state(cfg: TrainConfig) -> tuple[ExpansionHead, Codebooks, np.random.Generator]:
    """Initial head, codebooks and shuffling generator, all derived from ``cfg.seed``."""
    head_seq, book_seq, shuffle_seq = np.random.SeedSequence(cfg.seed & 0xFFFFFFFFFFFFFFFF).spawn(3)
    head = expansion.init_head(cfg.input_dim, cfg.quantizer.expanded_dim, head_seq)
    books = Codebooks.xavier_uniform(cfg.quantizer, book_seq)
    return head, books, np.random.default_rng(shuffle_seq)


def train(features: FeatureBatch, cfg: TrainConfig, task: TaskLoss | None = None,
          on_step: Callable[[StepLosses], None] | None = None) -> TrainResult:
    """Train the expansion head and codebooks jointly with Adam.

    Runs ``epochs * ceil(N / batch_size)`` steps over a per-epoch permutation
    drawn from ``cfg.seed``. Raises NumericalFailure on a non-finite loss,
    carrying the last finite model.
    """
    data = as_matrix(features)
    if data.ndim != 2 or data.shape[0] == 0:
        raise InvalidInputError("training needs a nonempty 2-D feature matrix")
    if data.shape[1] != cfg.input_dim:
        raise InvalidInputError(f"feature dim {data.shape[1]} != configured input_dim {cfg.input_dim}")
    task = task if task is not None else CosineDistillationLoss()

    head, books, shuffle_rng = initial_state(cfg)

    params = dict(head.params)
    params["codebooks"] = books.entries.copy()
    state = AdamState()
    history: list[StepLosses] = []
    n = data.shape[0]
    step = 0
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = data[order[start:start + cfg.batch_size]]
            head_now = ExpansionHead(cfg.input_dim, cfg.quantizer.expanded_dim,
                                     {k: params[k] for k in expansion.PARAM_NAMES})
            books_now = Codebooks(params["codebooks"], cfg.quantizer)
            with np.errstate(over="ignore", invalid="ignore"):
                out = batch_gradients(head_now, books_now, batch, task, cfg.weights)
            record = StepLosses(step, *out.losses)
            if not all(math.isfinite(v) for v in out.losses):
                raise NumericalFailure(f"non-finite loss at step {step}", step,
                                       TrainResult(head_now.copy(), Codebooks(params["codebooks"].copy(), cfg.quantizer),
                                                   list(history)))
            grads = dict(out.head)
            grads["codebooks"] = out.codebooks
            before = {k: v.copy() for k, v in params.items()}
            with np.errstate(over="ignore", invalid="ignore"):
                adam_step(params, grads, state, cfg.learning_rate)
            # Parameters are stored as float32, so anything beyond its range is a failure too.
            if not all(np.all(np.abs(v) <= _F32_MAX) for v in params.values()):
                raise NumericalFailure(f"non-finite parameters after step {step}", step,
                                       TrainResult(ExpansionHead(cfg.input_dim, cfg.quantizer.expanded_dim,
                                                                 {k: before[k] for k in expansion.PARAM_NAMES}),
                                                   Codebooks(before["codebooks"], cfg.quantizer), history))
            history.append(record)
            if on_step is not None:
                on_step(record)
            step += 1
        log.debug("epoch %d done, last total loss %.6g", epoch, history[-1].total_loss)

    head = ExpansionHead(cfg.input_dim, cfg.quantizer.expanded_dim,
                         {k: params[k] for k in expansion.PARAM_NAMES})
    return TrainResult(head, Codebooks(params["codebooks"], cfg.quantizer), history)


def evaluate_losses(head: ExpansionHead, codebooks: Codebooks, features, task: TaskLoss | None = None,
                    weights: LossWeights = LossWeights()) -> tuple[float, float, float, float]:
    """Full-batch losses of a model, without updating anything."""
    data = as_matrix(features)
    task = task if task is not None else CosineDistillationLoss()
    return batch_gradients(head, codebooks, data, task, weights).losses


def write_loss_csv(history: list[StepLosses], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOSS_COLUMNS)
        for r in history:
            writer.writerow([r.step, repr(r.task_loss), repr(r.codebook_loss),
                             repr(r.commit_loss), repr(r.total_loss)])
