"""Deterministic dense tensor primitives.

All math in the simulator funnels through these functions. Reductions run
in a fixed, documented order so that sharded executions recombine
bit-exactly with unsharded ones:

- ``matmul`` accumulates ``c[i][j] = sum_t a[i][t] * b[t][j]`` in
  ascending ``t`` order. Splitting ``b`` by columns (or ``a`` by rows)
  and concatenating the partial products is then bit-identical to the
  full product, which is what lets tensor-parallel and sequence-parallel
  executions of the same projection agree at the bit level.
- ``softmax_rows`` shifts by the row max before exponentiating, so large
  scores stay finite.
- Row reductions (``rms_norm`` means, softmax denominators) are per-row
  numpy reductions: a fixed function of the row length, hence identical
  under any batch split.

``np.einsum`` with ``optimize=False`` walks C-contiguous operands in
exactly the ascending-t order above when the output has at least two
columns. The single-column case uses an explicit loop instead, because
numpy's specialised inner-reduction kernel reorders partial sums there.
Inputs are normalised to C-contiguous before dispatch for the same
reason.

``matmul`` and the attention helpers accept an optional ``meter`` with an
``add_matmul(m, k, n)`` method; every executed matmul reports its shape
there, which is how per-device FLOP counts are measured.
"""

from __future__ import annotations

import enum
import math
from typing import Optional, Sequence

import numpy as np

from .errors import ContractViolation

_SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Precision(enum.Enum):
    """Numeric width used for weights, activations, and the KV cache."""

    F32 = "f32"
    F64 = "f64"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self is Precision.F32 else np.float64)

    @classmethod
    def parse(cls, name: str) -> "Precision":
        try:
            return cls(name)
        except ValueError:
            raise ContractViolation(f"unknown precision {name!r}") from None


def _require_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise ContractViolation(f"{op} produced non-finite values")
    return arr


def _check_operand(arr: np.ndarray, op: str) -> np.ndarray:
    if arr.ndim != 2:
        raise ContractViolation(f"{op} expects 2-d operands, got shape {arr.shape}")
    if arr.dtype not in _SUPPORTED_DTYPES:
        raise ContractViolation(f"{op} expects f32/f64 operands, got {arr.dtype}")
    return arr


def matmul(a: np.ndarray, b: np.ndarray, meter=None) -> np.ndarray:
    """Dense product with ascending inner-index accumulation.

    c[i][j] = sum over t of a[i][t] * b[t][j], accumulated in ascending t
    order for every output element. The fixed order is what makes column
    and row splits of the operands recombine bit-exactly.
    """
    _check_operand(a, "matmul")
    _check_operand(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul inner dims differ: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise ContractViolation(f"matmul operands mix dtypes: {a.dtype} vs {b.dtype}")
    if a.shape[1] == 0:
        raise ContractViolation("matmul requires a non-empty inner dimension")
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b)
    if meter is not None:
        meter.add_matmul(a.shape[0], a.shape[1], b.shape[1])
    if b.shape[1] == 1 and b.shape[0] > 1:
        # numpy's single-column kernel reorders the reduction; keep the
        # ascending-t order with an explicit accumulation loop.
        out = np.zeros((a.shape[0], 1), dtype=a.dtype)
        for t in range(b.shape[0]):
            out[:, 0] += a[:, t] * b[t, 0]
    else:
        out = np.einsum("ik,kj->ij", a, b, optimize=False)
    return _require_finite(out, "matmul")


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with shift-by-max; rows with -inf entries get 0 there."""
    if x.dtype not in _SUPPORTED_DTYPES:
        raise ContractViolation(f"softmax_rows expects f32/f64, got {x.dtype}")
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    out = e / np.sum(e, axis=-1, keepdims=True)
    return _require_finite(out, "softmax_rows")


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """y_i = gain_i * x_i / sqrt(mean(x^2) + eps), per row over the last axis."""
    if x.dtype not in _SUPPORTED_DTYPES:
        raise ContractViolation(f"rms_norm expects f32/f64, got {x.dtype}")
    if gain.shape != x.shape[-1:]:
        raise ContractViolation(f"rms_norm gain shape {gain.shape} != ({x.shape[-1]},)")
    mean_sq = np.mean(x * x, axis=-1, keepdims=True)
    denom = np.sqrt(mean_sq + x.dtype.type(eps))
    return _require_finite(gain * (x / denom), "rms_norm")


def gelu(x: np.ndarray) -> np.ndarray:
    """Gaussian error linear unit, tanh form; elementwise and deterministic."""
    c = x.dtype.type(math.sqrt(2.0 / math.pi))
    k = x.dtype.type(0.044715)
    half = x.dtype.type(0.5)
    one = x.dtype.type(1.0)
    return _require_finite(half * x * (one + np.tanh(c * (x + k * x * x * x))), "gelu")


def attend_cached(
    q: np.ndarray,
    keys: np.ndarray,
    values: np.ndarray,
    first_query_pos: int,
    meter=None,
) -> np.ndarray:
    """Single-head causal attention of query rows against a key window.

    Query row i sits at absolute position ``first_query_pos + i`` and may
    attend key positions ``j <= first_query_pos + i``. The key window must
    end exactly at the last query position, which is the invariant the
    engine maintains (new keys are staged before attending).

    Args:
        q: (m, d) query rows.
        keys / values: (T, d) key/value window, T == first_query_pos + m.
        first_query_pos: absolute position of q[0].
    """
    _check_operand(q, "attend_cached")
    _check_operand(keys, "attend_cached")
    if q.shape[0] < 1:
        raise ContractViolation("attend_cached needs at least one query row")
    if keys.shape != values.shape:
        raise ContractViolation("attend_cached key/value shapes differ")
    if q.shape[1] != keys.shape[1]:
        raise ContractViolation("attend_cached head dims differ")
    if first_query_pos < 0:
        raise ContractViolation("attend_cached first_query_pos must be >= 0")
    m, d = q.shape
    t = keys.shape[0]
    if first_query_pos + m != t:
        raise ContractViolation(
            f"attend_cached window mismatch: {first_query_pos} + {m} != {t}"
        )
    scale = q.dtype.type(1.0 / math.sqrt(d))
    scores = matmul(q, np.ascontiguousarray(keys.T), meter=meter) * scale
    qpos = first_query_pos + np.arange(m)[:, None]
    allowed = np.arange(t)[None, :] <= qpos
    scores = np.where(allowed, scores, q.dtype.type(-np.inf))
    weights = softmax_rows(scores)
    return matmul(weights, values, meter=meter)


def causal_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, meter=None) -> np.ndarray:
    """softmax(mask(q k^T / sqrt(d))) v with a causal mask, single head."""
    return attend_cached(q, k, v, 0, meter=meter)


def sinusoidal_positions(positions: Sequence[int], width: int,
                         dtype: Optional[np.dtype] = None) -> np.ndarray:
    """Additive sinusoidal position rows for the given absolute positions.

    row[2i] = sin(pos / 10000^(2i/width)), row[2i+1] = cos(same). Computed
    in f64 and cast at the end so both parallel modes see identical bits.
    """
    if width % 2 != 0:
        raise ContractViolation("sinusoidal_positions needs an even width")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 1:
        raise ContractViolation("positions must be a 1-d sequence")
    if pos.size and pos.min() < 0:
        raise ContractViolation("positions must be >= 0")
    half = np.arange(width // 2, dtype=np.float64)
    freq = np.power(10000.0, -2.0 * half / width)
    angles = pos[:, None] * freq[None, :]
    out = np.empty((pos.shape[0], width), dtype=np.float64)
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    if dtype is not None:
        out = out.astype(dtype)
    return out
