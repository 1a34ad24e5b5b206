"""Multi-device forward engine with per-pass parallel-mode selection.

Every engine pass runs one batch through the whole model in one of two
layouts over the same P devices:

- TP (tensor parallel): activations are replicated; each device computes
  its head slice of the attention projections (q/k/v by columns, output
  projection by rows), its f/P slice of the MLP, and its vocab slice of
  the embedding and output head. Two all_reduces per layer (after the
  attention output and after the MLP), one for the embedding, and one
  all_gather for the logits.
- SP (sequence parallel): the batch's new tokens are split contiguously
  across devices, each holding full weight replicas. Per layer, q/k/v are
  computed token-local over all heads, an all_to_all re-shards to (owned
  heads x all tokens) for attention against the cache, an all_to_all
  brings the attention output back token-local, and the output projection
  and MLP run locally with no reduction. Logits gather at the end.

Both layouts append identical K/V rows to the same per-device cache
blocks (device d always owns head range d), so the cache never moves when
the mode changes between passes. Replicated TP activations are computed
once by the driver since every device would hold identical bits.

Mode choice: a shift policy picks SP when the batch carries at least
token_threshold new tokens (large prefills), TP otherwise (latency-bound
decode); fixed policies pin one mode. A forced mode can be passed for
testing.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import List, Optional, Sequence as Seq, Tuple

import numpy as np

from .errors import CacheOverflow, ConfigError, ContractViolation
from .fabric import CollectiveKind, CommRecord, DeviceGroup
from .flops import FlopCount, FlopMeter, PassShape, flop_count, shard_bounds
from .kv_cache import KvCache
from .model import ModelConfig, ModelWeights, TpShard, partition_heads, tp_shard_view
from .swiftkv import SwiftKvConfig
from .tensor_core import (
    attend_cached,
    gelu,
    matmul,
    rms_norm,
    sinusoidal_positions,
)


class ParallelMode(enum.Enum):
    TP = "tp"
    SP = "sp"


class BatchKind(enum.Enum):
    PREFILL = "prefill"
    DECODE = "decode"


@dataclass
class Sequence:
    """Engine-side identity of one request: an id plus its KV cache."""

    seq_id: int
    cache: KvCache


@dataclass
class BatchItem:
    seq: Sequence
    tokens: List[int]


@dataclass
class Batch:
    kind: BatchKind
    items: List[BatchItem]
    # speculative decode passes carry a pending token plus draft per item
    speculative: bool = False

    @property
    def total_new_tokens(self) -> int:
        return sum(len(it.tokens) for it in self.items)

    def validate(self) -> None:
        if not self.items:
            raise ContractViolation("batch must contain at least one item")
        for it in self.items:
            if len(it.tokens) < 1:
                raise ContractViolation("batch item with empty span")
        if self.kind is BatchKind.DECODE and not self.speculative:
            if any(len(it.tokens) != 1 for it in self.items):
                raise ContractViolation("decode batches carry exactly 1 new token per request")
        caches = {id(it.seq.cache) for it in self.items}
        if len(caches) != len(self.items):
            raise ContractViolation("a sequence may appear at most once per batch")


@dataclass(frozen=True)
class ShiftPolicy:
    """Per-pass mode rule: SP at or above token_threshold new tokens, TP below.

    The fixed kinds pin one mode regardless of batch size; they exist so a
    serving run can be forced into a single-mode baseline.
    """

    token_threshold: Optional[int] = None
    kind: str = "shift"

    def validate(self) -> "ShiftPolicy":
        if self.kind not in ("fixed_tp", "fixed_sp", "shift"):
            raise ConfigError(f"unknown policy kind {self.kind!r}")
        if self.kind == "shift":
            if self.token_threshold is None or self.token_threshold < 1:
                raise ConfigError("shift policy needs token_threshold >= 1")
        return self

    @staticmethod
    def fixed_tp() -> "ShiftPolicy":
        return ShiftPolicy(kind="fixed_tp")

    @staticmethod
    def fixed_sp() -> "ShiftPolicy":
        return ShiftPolicy(kind="fixed_sp")


def default_token_threshold(world_size: int) -> int:
    return 4 * world_size


def choose_mode(policy: ShiftPolicy, batch: Batch) -> ParallelMode:
    """SP when the batch is at or above the token threshold, else TP."""
    policy.validate()
    if policy.kind == "fixed_tp":
        return ParallelMode.TP
    if policy.kind == "fixed_sp":
        return ParallelMode.SP
    return (
        ParallelMode.SP
        if batch.total_new_tokens >= policy.token_threshold
        else ParallelMode.TP
    )


@dataclass(frozen=True)
class CommEvent:
    """One collective in a pass; bytes is the max any device put on the wire."""

    kind: str
    bytes: float


@dataclass(frozen=True)
class StepRecord:
    step_id: int
    mode: ParallelMode
    kind: BatchKind
    new_tokens: int
    n_requests: int
    flops_per_device: Tuple[int, ...]
    comm: Tuple[CommEvent, ...]

    @property
    def flops_total(self) -> int:
        return sum(self.flops_per_device)

    @property
    def flops_max_device(self) -> int:
        return max(self.flops_per_device)

    @property
    def comm_bytes(self) -> float:
        return sum(e.bytes for e in self.comm)


@dataclass
class _FlatBatch:
    tokens: np.ndarray
    positions: np.ndarray
    bounds: List[Tuple[int, int]]
    histories: List[int]

    @property
    def total(self) -> int:
        return int(self.tokens.shape[0])


class Engine:
    """Owns the device group, weight shards, and the per-pass mode decision."""

    def __init__(
        self,
        weights: ModelWeights,
        group: DeviceGroup,
        policy: ShiftPolicy,
        swiftkv: Optional[SwiftKvConfig] = None,
    ):
        self.weights = weights
        self.config: ModelConfig = weights.config
        self.group = group
        self.policy = policy.validate()
        self.swiftkv = swiftkv if swiftkv is not None else SwiftKvConfig()
        self.world_size = group.world_size
        self.partition = partition_heads(self.config.n_heads, self.world_size)
        self.dtype = weights.precision.dtype
        self._shards: List[TpShard] = [
            tp_shard_view(weights, r, self.world_size) for r in range(self.world_size)
        ]
        if self.swiftkv.enabled:
            self.swiftkv.resolve_cut(self.config.n_layers)
        self.mode_log: List[ParallelMode] = []
        self.step_records: List[StepRecord] = []
        self._step_counter = 0

    # -- sequences -------------------------------------------------------

    def new_sequence(self, seq_id: int, capacity: Optional[int] = None) -> Sequence:
        cap = self.config.max_seq if capacity is None else capacity
        if cap > self.config.max_seq:
            raise ContractViolation(f"capacity {cap} exceeds max_seq {self.config.max_seq}")
        cache = KvCache(
            self.config.n_layers, self.partition, self.config.head_dim, cap, self.dtype
        )
        return Sequence(seq_id=seq_id, cache=cache)

    # -- stepping --------------------------------------------------------

    def step(
        self,
        batch: Batch,
        mode: Optional[ParallelMode] = None,
        span_logits: bool = False,
    ) -> Tuple[List[np.ndarray], StepRecord]:
        """Run one pass; returns per-item logits and the step record.

        Logits are the last-position row per item, or (span, V) per item
        with ``span_logits=True`` (used by speculative verification).
        """
        batch.validate()
        if mode is None:
            mode = choose_mode(self.policy, batch)
        for it in batch.items:
            need = it.seq.cache.token_count + len(it.tokens)
            if need > it.seq.cache.capacity:
                raise CacheOverflow(
                    f"sequence {it.seq.seq_id}: {need} tokens exceed capacity "
                    f"{it.seq.cache.capacity}"
                )
        use_swiftkv = (
            self.swiftkv.enabled
            and batch.kind is BatchKind.PREFILL
            and self.swiftkv.resolve_cut(self.config.n_layers) < self.config.n_layers
        )
        if use_swiftkv and span_logits:
            raise ContractViolation("span logits unsupported with early-exit prefill")
        fb = self._flatten(batch)
        self.group.begin_step(self._step_counter)
        rec_start = len(self.group.records)
        meters = [FlopMeter() for _ in range(self.world_size)]
        cut = self.swiftkv.resolve_cut(self.config.n_layers) if use_swiftkv else None
        if mode is ParallelMode.TP:
            logits = self._forward_tp(fb, batch, meters, span_logits, cut)
        else:
            logits = self._forward_sp(fb, batch, meters, span_logits, cut)
        for it in batch.items:
            it.seq.cache.commit(len(it.tokens))
        record = StepRecord(
            step_id=self._step_counter,
            mode=mode,
            kind=batch.kind,
            new_tokens=fb.total,
            n_requests=len(batch.items),
            flops_per_device=tuple(m.flops for m in meters),
            comm=self._comm_events(self.group.records[rec_start:]),
        )
        self.mode_log.append(mode)
        self.step_records.append(record)
        self._step_counter += 1
        return logits, record

    def forward_tp(self, batch: Batch, span_logits: bool = False):
        return self.step(batch, mode=ParallelMode.TP, span_logits=span_logits)

    def forward_sp(self, batch: Batch, span_logits: bool = False):
        return self.step(batch, mode=ParallelMode.SP, span_logits=span_logits)

    def pass_shape(self, batch: Batch, span_logits: bool = False) -> PassShape:
        return PassShape(
            spans=tuple(len(it.tokens) for it in batch.items),
            history=tuple(it.seq.cache.token_count for it in batch.items),
            span_logits=span_logits,
        )

    @staticmethod
    def _comm_events(records: Seq[CommRecord]) -> Tuple[CommEvent, ...]:
        by_event = {}
        for rec in records:
            cur = by_event.get(rec.event_id)
            if cur is None or rec.bytes > cur[1]:
                by_event[rec.event_id] = (rec.kind.value, rec.bytes)
        return tuple(CommEvent(kind=k, bytes=b) for k, b in
                     (by_event[e] for e in sorted(by_event)))

    def _flatten(self, batch: Batch) -> _FlatBatch:
        toks: List[int] = []
        poss: List[int] = []
        bounds: List[Tuple[int, int]] = []
        hist: List[int] = []
        v = self.config.vocab_size
        lo = 0
        for it in batch.items:
            t0 = it.seq.cache.token_count
            for off, tok in enumerate(it.tokens):
                if not 0 <= tok < v:
                    raise ContractViolation(f"token id {tok} outside vocab [0, {v})")
                toks.append(tok)
                poss.append(t0 + off)
            bounds.append((lo, lo + len(it.tokens)))
            lo += len(it.tokens)
            hist.append(t0)
        return _FlatBatch(
            tokens=np.asarray(toks, dtype=np.int64),
            positions=np.asarray(poss, dtype=np.int64),
            bounds=bounds,
            histories=hist,
        )

    # -- tensor-parallel pass -------------------------------------------

    def _forward_tp(self, fb, batch, meters, span_logits, cut):
        cfg, dt = self.config, self.dtype
        h, d, hp = cfg.hidden, cfg.head_dim, cfg.n_heads // self.world_size
        m_total = fb.total
        group = self.group

        def embed_rank(r):
            sh = self._shards[r]
            v0, v1 = sh.vocab_range
            out = np.zeros((m_total, h), dtype=dt)
            sel = (fb.tokens >= v0) & (fb.tokens < v1)
            if np.any(sel):
                out[sel] = sh.embed_rows[fb.tokens[sel] - v0]
            return out

        x = group.all_reduce_sum(group.map_ranks(embed_rank))[0]
        x = x + sinusoidal_positions(fb.positions, h, dtype=dt)

        n_full = cfg.n_layers if cut is None else cut
        for layer in range(n_full):
            lw = self.weights.layers[layer]
            xn = rms_norm(x, lw.attn_gain)

            def attn_rank(r, layer=layer, xn=xn):
                sh = self._shards[r].layers[layer]
                meter = meters[r]
                q = matmul(xn, sh.wq, meter).reshape(m_total, hp, d)
                k = matmul(xn, sh.wk, meter).reshape(m_total, hp, d)
                vv = matmul(xn, sh.wv, meter).reshape(m_total, hp, d)
                for (lo, hi), it in zip(fb.bounds, batch.items):
                    it.seq.cache.append(r, layer, k[lo:hi], vv[lo:hi])
                out = np.empty((m_total, hp, d), dtype=dt)
                for (lo, hi), t0, it in zip(fb.bounds, fb.histories, batch.items):
                    for hl in range(hp):
                        kw, vw = it.seq.cache.read_window(r, layer, hl)
                        out[lo:hi, hl] = attend_cached(q[lo:hi, hl], kw, vw, t0, meter)
                return matmul(out.reshape(m_total, hp * d), sh.wo, meter)

            x = x + group.all_reduce_sum(group.map_ranks(attn_rank))[0]
            xn2 = rms_norm(x, lw.mlp_gain)

            def mlp_rank(r, layer=layer, xn2=xn2):
                sh = self._shards[r].layers[layer]
                meter = meters[r]
                return matmul(gelu(matmul(xn2, sh.w1, meter)), sh.w2, meter)

            x = x + group.all_reduce_sum(group.map_ranks(mlp_rank))[0]

        if cut is not None:
            x = self._swiftkv_tail_tp(fb, batch, meters, x, cut)
            rows = np.arange(len(batch.items))
            xf = rms_norm(x, self.weights.final_gain)
        else:
            if span_logits:
                rows = np.arange(m_total)
            else:
                rows = np.asarray([hi - 1 for _, hi in fb.bounds])
            xf = rms_norm(x[rows], self.weights.final_gain)

        def head_rank(r):
            sh = self._shards[r]
            return np.ascontiguousarray(matmul(xf, sh.head_cols, meters[r]).T)

        logits_t = group.all_gather(group.map_ranks(head_rank))
        logits = np.ascontiguousarray(logits_t.T)
        return self._split_logits(logits, fb, batch, span_logits, tail=cut is not None)

    def _swiftkv_tail_tp(self, fb, batch, meters, x, cut):
        """Project later-layer KV from the cut hidden state, then run only
        each request's final position through the remaining layers."""
        cfg, dt = self.config, self.dtype
        h, d, hp = cfg.hidden, cfg.head_dim, cfg.n_heads // self.world_size
        m_total = fb.total
        group = self.group
        z = rms_norm(x, self.weights.layers[cut].attn_gain)
        for layer in range(cut, cfg.n_layers):

            def proj_rank(r, layer=layer):
                sh = self._shards[r].layers[layer]
                meter = meters[r]
                k = matmul(z, sh.wk, meter).reshape(m_total, hp, d)
                vv = matmul(z, sh.wv, meter).reshape(m_total, hp, d)
                for (lo, hi), it in zip(fb.bounds, batch.items):
                    it.seq.cache.append(r, layer, k[lo:hi], vv[lo:hi])

            group.map_ranks(proj_rank)

        ends = [hi - 1 for _, hi in fb.bounds]
        x_t = np.ascontiguousarray(x[ends])
        n_req = len(batch.items)
        windows = [t0 + (hi - lo) for (lo, hi), t0 in zip(fb.bounds, fb.histories)]
        for layer in range(cut, cfg.n_layers):
            lw = self.weights.layers[layer]
            xn = rms_norm(x_t, lw.attn_gain)

            def tail_attn_rank(r, layer=layer, xn=xn):
                sh = self._shards[r].layers[layer]
                meter = meters[r]
                q = matmul(xn, sh.wq, meter).reshape(n_req, hp, d)
                out = np.empty((n_req, hp, d), dtype=dt)
                for i, (it, win) in enumerate(zip(batch.items, windows)):
                    for hl in range(hp):
                        kw, vw = it.seq.cache.read_window(r, layer, hl)
                        out[i : i + 1, hl] = attend_cached(
                            q[i : i + 1, hl], kw, vw, win - 1, meter
                        )
                return matmul(out.reshape(n_req, hp * d), sh.wo, meter)

            x_t = x_t + group.all_reduce_sum(group.map_ranks(tail_attn_rank))[0]
            xn2 = rms_norm(x_t, lw.mlp_gain)

            def tail_mlp_rank(r, layer=layer, xn2=xn2):
                sh = self._shards[r].layers[layer]
                meter = meters[r]
                return matmul(gelu(matmul(xn2, sh.w1, meter)), sh.w2, meter)

            x_t = x_t + group.all_reduce_sum(group.map_ranks(tail_mlp_rank))[0]
        return x_t

    # -- sequence-parallel pass -----------------------------------------

    def _forward_sp(self, fb, batch, meters, span_logits, cut):
        cfg, dt = self.config, self.dtype
        h, d, heads = cfg.hidden, cfg.head_dim, cfg.n_heads
        hp = heads // self.world_size
        m_total = fb.total
        group = self.group
        bounds = shard_bounds(m_total, self.world_size)

        def embed_rank(r):
            lo, hi = bounds[r]
            toks = fb.tokens[lo:hi]
            return self.weights.embed[toks] + sinusoidal_positions(
                fb.positions[lo:hi], h, dtype=dt
            )

        xs = group.map_ranks(embed_rank)

        n_full = cfg.n_layers if cut is None else cut
        for layer in range(n_full):
            lw = self.weights.layers[layer]

            def qkv_rank(r, lw=lw):
                meter = meters[r]
                xn = rms_norm(xs[r], lw.attn_gain)
                rows = xn.shape[0]
                q = matmul(xn, lw.wq, meter).reshape(rows, heads, d)
                k = matmul(xn, lw.wk, meter).reshape(rows, heads, d)
                vv = matmul(xn, lw.wv, meter).reshape(rows, heads, d)
                return q, k, vv

            qkv = group.map_ranks(qkv_rank)
            q_rx = group.all_to_all([self._head_blocks(qkv[r][0]) for r in range(self.world_size)])
            k_rx = group.all_to_all([self._head_blocks(qkv[r][1]) for r in range(self.world_size)])
            v_rx = group.all_to_all([self._head_blocks(qkv[r][2]) for r in range(self.world_size)])

            def attn_rank(r, layer=layer):
                meter = meters[r]
                q_all = np.concatenate(q_rx[r], axis=0)
                k_all = np.concatenate(k_rx[r], axis=0)
                v_all = np.concatenate(v_rx[r], axis=0)
                for (lo, hi), it in zip(fb.bounds, batch.items):
                    it.seq.cache.append(r, layer, k_all[lo:hi], v_all[lo:hi])
                out = np.empty((m_total, hp, d), dtype=dt)
                for (lo, hi), t0, it in zip(fb.bounds, fb.histories, batch.items):
                    for hl in range(hp):
                        kw, vw = it.seq.cache.read_window(r, layer, hl)
                        out[lo:hi, hl] = attend_cached(q_all[lo:hi, hl], kw, vw, t0, meter)
                return out

            attn = group.map_ranks(attn_rank)
            back = group.all_to_all(
                [
                    [np.ascontiguousarray(attn[r][lo:hi]) for lo, hi in bounds]
                    for r in range(self.world_size)
                ]
            )

            def post_rank(r, lw=lw):
                meter = meters[r]
                rows = xs[r].shape[0]
                a = np.concatenate(back[r], axis=1).reshape(rows, h)
                x_new = xs[r] + matmul(a, lw.wo, meter)
                xn2 = rms_norm(x_new, lw.mlp_gain)
                return x_new + matmul(gelu(matmul(xn2, lw.w1, meter)), lw.w2, meter)

            xs = group.map_ranks(post_rank)

        if cut is not None:
            return self._swiftkv_tail_sp(fb, batch, meters, xs, bounds, cut)

        ends = [hi - 1 for _, hi in fb.bounds]

        def logits_rank(r):
            lo, hi = bounds[r]
            if span_logits:
                xf_rows = xs[r]
            else:
                local = [e - lo for e in ends if lo <= e < hi]
                xf_rows = xs[r][local]
            xf = rms_norm(xf_rows, self.weights.final_gain)
            return matmul(xf, self.weights.head, meters[r])

        logits = group.all_gather(group.map_ranks(logits_rank))
        return self._split_logits(logits, fb, batch, span_logits, tail=False)

    def _head_blocks(self, tensor: np.ndarray) -> List[np.ndarray]:
        return [
            np.ascontiguousarray(tensor[:, lo:hi, :]) for lo, hi in self.partition
        ]

    def _swiftkv_tail_sp(self, fb, batch, meters, xs, bounds, cut):
        """SP early-exit: project later-layer KV token-local and re-shard
        via all_to_all; final positions stay on the shard that owns them."""
        cfg, dt = self.config, self.dtype
        h, d, heads = cfg.hidden, cfg.head_dim, cfg.n_heads
        hp = heads // self.world_size
        group = self.group
        gain_cut = self.weights.layers[cut].attn_gain
        zs = group.map_ranks(lambda r: rms_norm(xs[r], gain_cut))
        for layer in range(cut, cfg.n_layers):
            lw = self.weights.layers[layer]

            def kv_rank(r, lw=lw):
                meter = meters[r]
                rows = zs[r].shape[0]
                k = matmul(zs[r], lw.wk, meter).reshape(rows, heads, d)
                vv = matmul(zs[r], lw.wv, meter).reshape(rows, heads, d)
                return k, vv

            kv = group.map_ranks(kv_rank)
            k_rx = group.all_to_all([self._head_blocks(kv[r][0]) for r in range(self.world_size)])
            v_rx = group.all_to_all([self._head_blocks(kv[r][1]) for r in range(self.world_size)])

            def append_rank(r, layer=layer):
                k_all = np.concatenate(k_rx[r], axis=0)
                v_all = np.concatenate(v_rx[r], axis=0)
                for (lo, hi), it in zip(fb.bounds, batch.items):
                    it.seq.cache.append(r, layer, k_all[lo:hi], v_all[lo:hi])

            group.map_ranks(append_rank)

        # final-position rows, kept on their owning shard (no re-shard)
        ends = [hi - 1 for _, hi in fb.bounds]
        windows = [t0 + (hi - lo) for (lo, hi), t0 in zip(fb.bounds, fb.histories)]
        owner_rows: List[List[int]] = []
        owner_of_end: List[int] = []
        for r, (lo, hi) in enumerate(bounds):
            owner_rows.append([e - lo for e in ends if lo <= e < hi])
        for e in ends:
            for r, (lo, hi) in enumerate(bounds):
                if lo <= e < hi:
                    owner_of_end.append(r)
                    break
        tails = [np.ascontiguousarray(xs[r][owner_rows[r]]) for r in range(self.world_size)]
        n_req = len(batch.items)

        for layer in range(cut, cfg.n_layers):
            lw = self.weights.layers[layer]

            def tail_q_rank(r, lw=lw):
                meter = meters[r]
                xn = rms_norm(tails[r], lw.attn_gain)
                return matmul(xn, lw.wq, meter).reshape(xn.shape[0], heads, d)

            qs = group.map_ranks(tail_q_rank)
            q_rx = group.all_to_all([self._head_blocks(qs[r]) for r in range(self.world_size)])

            def tail_attn_rank(r, layer=layer):
                meter = meters[r]
                q_all = np.concatenate(q_rx[r], axis=0)  # (n_req, hp, d) in item order
                out = np.empty((n_req, hp, d), dtype=dt)
                for i, (it, win) in enumerate(zip(batch.items, windows)):
                    for hl in range(hp):
                        kw, vw = it.seq.cache.read_window(r, layer, hl)
                        out[i : i + 1, hl] = attend_cached(
                            q_all[i : i + 1, hl], kw, vw, win - 1, meter
                        )
                return out

            attn = group.map_ranks(tail_attn_rank)
            tail_slices: List[Tuple[int, int]] = []
            seen = 0
            for r in range(self.world_size):
                cnt = len(owner_rows[r])
                tail_slices.append((seen, seen + cnt))
                seen += cnt
            back = group.all_to_all(
                [
                    [np.ascontiguousarray(attn[r][lo:hi]) for lo, hi in tail_slices]
                    for r in range(self.world_size)
                ]
            )

            def tail_post_rank(r, lw=lw):
                meter = meters[r]
                rows = tails[r].shape[0]
                a = np.concatenate(back[r], axis=1).reshape(rows, h)
                x_new = tails[r] + matmul(a, lw.wo, meter)
                xn2 = rms_norm(x_new, lw.mlp_gain)
                return x_new + matmul(gelu(matmul(xn2, lw.w1, meter)), lw.w2, meter)

            tails = group.map_ranks(tail_post_rank)

        def tail_logits_rank(r):
            xf = rms_norm(tails[r], self.weights.final_gain)
            return matmul(xf, self.weights.head, meters[r])

        logits = group.all_gather(group.map_ranks(tail_logits_rank))
        # gathered rows are ordered by owning rank; restore item order
        order = np.argsort(np.asarray(owner_of_end), kind="stable")
        inverse = np.empty_like(order)
        inverse[order] = np.arange(n_req)
        logits = logits[inverse]
        return [logits[i] for i in range(n_req)]

    # -- logits splitting -----------------------------------------------

    def _split_logits(self, logits, fb, batch, span_logits, tail):
        if tail:
            return [logits[i] for i in range(len(batch.items))]
        if span_logits:
            return [np.ascontiguousarray(logits[lo:hi]) for lo, hi in fb.bounds]
        return [logits[i] for i in range(len(batch.items))]
