"""Two-branch expansion head lifting backbone features from d_F to d_E.

Branch A is Linear(d_F, d_E) -> ReLU -> Linear(d_E, d_E); branch B is a single
Linear(d_F, d_E). The head output is the sum of both branches. The 1x1
convolutions of a per-pixel head reduce to these per-vector linear maps.

Weights are stored ``(out_features, in_features)``, so a layer computes
``W @ f + b`` for a single vector and ``F @ W.T + b`` for a batch.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError

HEAD_MAGIC = b"PQEH"
HEAD_VERSION = 1

PARAM_NAMES = ("a1_weight", "a1_bias", "a2_weight", "a2_bias", "b_weight", "b_bias")


def param_shapes(d_f: int, d_e: int) -> dict[str, tuple[int, ...]]:
    return {
        "a1_weight": (d_e, d_f),
        "a1_bias": (d_e,),
        "a2_weight": (d_e, d_e),
        "a2_bias": (d_e,),
        "b_weight": (d_e, d_f),
        "b_bias": (d_e,),
    }


@dataclass
class ExpansionHead:
    """Parameters of the expansion head, keyed by ``PARAM_NAMES``."""

    d_f: int
    d_e: int
    params: dict[str, np.ndarray]

    def __post_init__(self):
        if self.d_f < 1 or self.d_e < 1:
            raise InvalidInputError("d_F and d_E must be positive")
        shapes = param_shapes(self.d_f, self.d_e)
        if set(self.params) != set(shapes):
            raise InvalidInputError(f"head parameters must be exactly {PARAM_NAMES}")
        for name, shape in shapes.items():
            arr = np.asarray(self.params[name], dtype=np.float64)
            if arr.shape != shape:
                raise InvalidInputError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"{name} contains non-finite values")
            self.params[name] = arr

    def copy(self) -> "ExpansionHead":
        return ExpansionHead(self.d_f, self.d_e, {k: v.copy() for k, v in self.params.items()})


@dataclass(frozen=True)
class ForwardTrace:
    head_id: int
    inputs: np.ndarray      # (N, d_F)
    pre_relu: np.ndarray    # (N, d_E)
    hidden: np.ndarray      # (N, d_E), post-ReLU
    branch_a: np.ndarray    # (N, d_E)
    branch_b: np.ndarray    # (N, d_E)
    single: bool


def init_head(d_f: int, d_e: int, seed: int) -> ExpansionHead:
    """Xavier-uniform weights, zero biases."""
    if d_f < 1 or d_e < 1:
        raise InvalidInputError("d_F and d_E must be positive")
    rng = np.random.default_rng(seed)
    params = {}
    for name in PARAM_NAMES:
        shape = param_shapes(d_f, d_e)[name]
        if name.endswith("_bias"):
            params[name] = np.zeros(shape)
        else:
            fan_out, fan_in = shape
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-bound, bound, size=shape)
    return ExpansionHead(d_f, d_e, params)


def forward(head: ExpansionHead, f) -> tuple[np.ndarray, ForwardTrace]:
    """Evaluate the head on one vector ``(d_F,)`` or a batch ``(N, d_F)``."""
    arr = np.asarray(f, dtype=np.float64)
    single = arr.ndim == 1
    batch = arr[None, :] if single else arr
    if batch.ndim != 2 or batch.shape[1] != head.d_f:
        raise InvalidInputError(f"input has shape {arr.shape}, expected trailing dim {head.d_f}")
    p = head.params
    pre = batch @ p["a1_weight"].T + p["a1_bias"]
    hidden = np.maximum(pre, 0.0)
    out_a = hidden @ p["a2_weight"].T + p["a2_bias"]
    out_b = batch @ p["b_weight"].T + p["b_bias"]
    x = out_a + out_b
    trace = ForwardTrace(id(head), batch, pre, hidden, out_a, out_b, single)
    return (x[0] if single else x), trace


def backward(head: ExpansionHead, trace: ForwardTrace, grad_x) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of ``<grad_x, x>`` w.r.t. every parameter and the input.

    For a batch, parameter gradients are summed over rows in row order.
    """
    if trace.head_id != id(head):
        raise InvalidInputError("trace was produced by a different head")
    g = np.asarray(grad_x, dtype=np.float64)
    if trace.single:
        g = g[None, :] if g.ndim == 1 else g
    if g.shape != trace.branch_a.shape:
        raise InvalidInputError(f"grad_x has shape {np.shape(grad_x)}, expected {trace.branch_a.shape}")
    p = head.params
    f = trace.inputs
    g_hidden = g @ p["a2_weight"]
    g_pre = g_hidden * (trace.pre_relu > 0.0)
    grads = {
        "a2_weight": g.T @ trace.hidden,
        "a2_bias": g.sum(axis=0),
        "a1_weight": g_pre.T @ f,
        "a1_bias": g_pre.sum(axis=0),
        "b_weight": g.T @ f,
        "b_bias": g.sum(axis=0),
    }
    grad_f = g_pre @ p["a1_weight"] + g @ p["b_weight"]
    return grads, (grad_f[0] if trace.single else grad_f)


def write_head(head: ExpansionHead, path) -> None:
    chunks = [HEAD_MAGIC, struct.pack("<III", HEAD_VERSION, head.d_f, head.d_e)]
    for name in PARAM_NAMES:
        chunks.append(np.ascontiguousarray(head.params[name], dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_head(path) -> ExpansionHead:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != HEAD_MAGIC:
        raise FormatError("bad head magic", 0)
    if len(raw) < 16:
        raise FormatError("truncated head header", len(raw))
    version, d_f, d_e = struct.unpack_from("<III", raw, 4)
    if version != HEAD_VERSION:
        raise FormatError(f"unsupported head version {version}", 4)
    if d_f == 0 or d_e == 0:
        raise FormatError("zero head dimension", 8)
    offset = 16
    params = {}
    for name, shape in param_shapes(d_f, d_e).items():
        count = int(np.prod(shape))
        if len(raw) < offset + 4 * count:
            raise FormatError(f"truncated head payload in {name}", len(raw))
        params[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset += 4 * count
    if len(raw) != offset:
        raise FormatError("trailing bytes after head payload", offset)
    return ExpansionHead(d_f, d_e, params)
