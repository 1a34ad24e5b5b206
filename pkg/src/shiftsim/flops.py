"""FLOP accounting: a measuring meter and an analytic mirror.

Each matmul costs 2*m*k*n FLOPs. :class:`FlopMeter` is the measured
route: the engine threads one meter per device through every matmul it
executes. :func:`flop_count` is the analytic route: it enumerates the
exact matmul shapes the engine runs for a given pass without executing
anything. Tests hold the two routes equal; the serving clock consumes the
measured values.

Elementwise work (norms, gelu, softmax scaling, masking) is outside the
inventory by definition; only matmuls count.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

from .errors import ContractViolation
from .model import ModelConfig


class FlopMeter:
    """Accumulates 2*m*k*n over executed matmuls."""

    __slots__ = ("flops",)

    def __init__(self) -> None:
        self.flops = 0

    def add_matmul(self, m: int, k: int, n: int) -> None:
        self.flops += 2 * m * k * n


@dataclass(frozen=True)
class PassShape:
    """Shape of one engine pass: per-request new spans and prior history."""

    spans: Tuple[int, ...]
    history: Tuple[int, ...]
    span_logits: bool = False

    def __post_init__(self):
        # empty spans = the zero-token batch, which simply counts to zero
        if len(self.spans) != len(self.history):
            raise ContractViolation("PassShape needs matching spans/history")
        if any(m < 1 for m in self.spans) or any(t < 0 for t in self.history):
            raise ContractViolation("PassShape spans must be >= 1 and history >= 0")

    @property
    def total_new_tokens(self) -> int:
        return sum(self.spans)


@dataclass(frozen=True)
class FlopCount:
    per_device: Tuple[int, ...]

    @property
    def total(self) -> int:
        return sum(self.per_device)

    @property
    def max_device(self) -> int:
        return max(self.per_device)


def shard_rows(total: int, world_size: int) -> List[int]:
    """Contiguous even token split; the remainder goes to the lowest ranks."""
    base, rem = divmod(total, world_size)
    return [base + (1 if r < rem else 0) for r in range(world_size)]


def shard_bounds(total: int, world_size: int) -> List[Tuple[int, int]]:
    sizes = shard_rows(total, world_size)
    bounds, lo = [], 0
    for s in sizes:
        bounds.append((lo, lo + s))
        lo += s
    return bounds


def _mm(m: int, k: int, n: int) -> int:
    return 2 * m * k * n


def flop_count(
    shape: PassShape,
    mode,
    config: ModelConfig,
    world_size: int,
    swiftkv_cut: Optional[int] = None,
) -> FlopCount:
    """Analytic per-device FLOPs for one pass; mirrors the engine exactly.

    ``mode`` is "tp" or "sp" (the engine's ParallelMode enum also works).
    ``swiftkv_cut`` applies the early-exit prefill structure when it cuts
    strictly below the last layer; None (or a cut at the layer count)
    means the standard structure.
    """
    mode_name = getattr(mode, "value", mode)
    if mode_name not in ("tp", "sp"):
        raise ContractViolation(f"unknown mode {mode!r}")
    p = world_size
    cfg = config
    h, d, f, v = cfg.hidden, cfg.head_dim, cfg.ffn_dim, cfg.vocab_size
    hp = cfg.n_heads // p
    big_m = shape.total_new_tokens
    windows = [t0 + m for m, t0 in zip(shape.spans, shape.history)]
    cut = swiftkv_cut if (swiftkv_cut is not None and swiftkv_cut < cfg.n_layers) else None
    if cut is not None and shape.span_logits:
        raise ContractViolation("span logits unsupported with early-exit prefill")
    n_full_layers = cfg.n_layers if cut is None else cut

    # attention cost per device is mode-invariant: owned heads x all rows
    def attn_flops(spans: Sequence[int], wins: Sequence[int]) -> int:
        return sum(hp * (_mm(m, d, w) + _mm(m, w, d)) for m, w in zip(spans, wins))

    per_device = [0] * p

    if mode_name == "tp":
        layer = (
            3 * _mm(big_m, h, h // p)
            + attn_flops(shape.spans, windows)
            + _mm(big_m, h // p, h)
            + _mm(big_m, h, f // p)
            + _mm(big_m, f // p, h)
        )
        for r in range(p):
            per_device[r] += n_full_layers * layer
    else:
        rows = shard_rows(big_m, p)
        for r in range(p):
            m_r = rows[r]
            layer = (
                3 * _mm(m_r, h, h)
                + attn_flops(shape.spans, windows)
                + _mm(m_r, h, h)
                + _mm(m_r, h, f)
                + _mm(m_r, f, h)
            )
            per_device[r] += n_full_layers * layer

    if cut is None:
        n_req = len(shape.spans)
        if mode_name == "tp":
            r_log = big_m if shape.span_logits else n_req
            for r in range(p):
                per_device[r] += _mm(r_log, h, v // p)
        else:
            bounds = shard_bounds(big_m, p)
            if shape.span_logits:
                counts = [hi - lo for lo, hi in bounds]
            else:
                ends, acc = [], 0
                for m in shape.spans:
                    acc += m
                    ends.append(acc - 1)
                counts = [sum(1 for e in ends if lo <= e < hi) for lo, hi in bounds]
            for r in range(p):
                per_device[r] += _mm(counts[r], h, v)
        return FlopCount(tuple(per_device))

    # early-exit prefill: project later-layer KV from the cut hidden state,
    # then run only the final position of each request through the tail.
    n_proj_layers = cfg.n_layers - cut
    n_req = len(shape.spans)
    if mode_name == "tp":
        per_layer_proj = 2 * _mm(big_m, h, h // p)
        tail_layer = (
            _mm(n_req, h, h // p)
            + attn_flops([1] * n_req, windows)
            + _mm(n_req, h // p, h)
            + _mm(n_req, h, f // p)
            + _mm(n_req, f // p, h)
        )
        for r in range(p):
            per_device[r] += n_proj_layers * (per_layer_proj + tail_layer)
            per_device[r] += _mm(n_req, h, v // p)
    else:
        rows = shard_rows(big_m, p)
        bounds = shard_bounds(big_m, p)
        ends, acc = [], 0
        for m in shape.spans:
            acc += m
            ends.append(acc - 1)
        # final positions stay on the main-shard rank that owns them
        tail_rows = [sum(1 for e in ends if lo <= e < hi) for lo, hi in bounds]
        for r in range(p):
            per_layer_proj = 2 * _mm(rows[r], h, h)
            tail_layer = (
                _mm(tail_rows[r], h, h)
                + attn_flops([1] * n_req, windows)
                + _mm(tail_rows[r], h, h)
                + _mm(tail_rows[r], h, f)
                + _mm(tail_rows[r], f, h)
            )
            per_device[r] += n_proj_layers * (per_layer_proj + tail_layer)
            per_device[r] += _mm(tail_rows[r], h, v)
    return FlopCount(tuple(per_device))


def swiftkv_flop_ratio(
    config: ModelConfig, prompt_len: int, cut_layer: Optional[int] = None
) -> float:
    """Prefill FLOP ratio of the early-exit path vs the standard path.

    ``cut_layer`` defaults to the halfway cut. The ratio is mode-free: both
    totals are taken on one device, where TP and SP coincide.
    """
    cut = config.n_layers // 2 if cut_layer is None else cut_layer
    shape = PassShape(spans=(prompt_len,), history=(0,))
    early = flop_count(shape, "tp", config, 1, swiftkv_cut=cut).total
    std = flop_count(shape, "tp", config, 1).total
    return early / std
