"""Traffic generation, continuous-batching scheduler, and simulated clock.

The serving loop drives the engine over a seeded arrival trace. At every
step it admits newly arrived requests, then schedules exactly one pass:
a prefill pass batching every queued prompt if any are waiting, otherwise
a decode pass over all active requests. Prefill and decode are never
mixed, which keeps the per-pass mode choice well defined.

Time is simulated, not measured: each pass costs

    max_device_flops / device_flops_per_s
    + sum over collectives of (max_device_bytes / link_bytes_per_s
                               + collective_latency_s)

so runs are deterministic and the TP/SP trade-off (compute-bound large
batches vs latency-bound small ones) is reproducible on any machine.

A request's first output token appears when its prefill pass completes;
that moment stamps TTFT. Decode passes emit one token per request, or a
verified run of tokens when speculation is enabled.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ContractViolation
from .model import greedy_token
from .parallel_engine import (
    Batch,
    BatchItem,
    BatchKind,
    Engine,
    ParallelMode,
    ShiftPolicy,
    StepRecord,
    choose_mode,
)
from .spec_decode import SpeculationConfig, SuffixIndex, _greedy_accept, propose


# -- workload -----------------------------------------------------------


@dataclass(frozen=True)
class PhaseSpec:
    """One traffic phase: Poisson arrivals at a fixed rate for a duration."""

    duration_ms: float
    rate_per_s: float

    def validate(self) -> "PhaseSpec":
        if self.duration_ms < 0 or self.rate_per_s < 0:
            raise ConfigError("phase duration and rate must be >= 0")
        return self


@dataclass(frozen=True)
class LengthSampler:
    """Request length model preserving the prompt:output ratio.

    kind "fixed" uses the lengths as given; "lognormal" draws the prompt
    length around ``prompt_len`` (log-scale spread ``sigma``) and scales
    the output to keep the configured ratio.
    """

    kind: str = "fixed"
    prompt_len: int = 200
    output_len: int = 20
    sigma: float = 0.25

    def validate(self) -> "LengthSampler":
        if self.kind not in ("fixed", "lognormal"):
            raise ConfigError(f"unknown length sampler {self.kind!r}")
        if self.prompt_len < 1 or self.output_len < 1:
            raise ConfigError("prompt_len and output_len must be >= 1")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        return self

    def draw(self, rng: np.random.Generator) -> Tuple[int, int]:
        if self.kind == "fixed":
            return self.prompt_len, self.output_len
        prompt = max(1, int(round(self.prompt_len * math.exp(self.sigma * rng.standard_normal()))))
        output = max(1, int(round(prompt * self.output_len / self.prompt_len)))
        return prompt, output


@dataclass(frozen=True)
class TrafficProfile:
    phases: Tuple[PhaseSpec, ...]
    lengths: LengthSampler = LengthSampler()
    corpus: str = "random"

    def validate(self) -> "TrafficProfile":
        for ph in self.phases:
            ph.validate()
        self.lengths.validate()
        if self.corpus not in ("random", "repetitive"):
            raise ConfigError(f"unknown corpus {self.corpus!r}")
        return self


@dataclass(frozen=True)
class TraceEntry:
    """One line of a trace file; prompt tokens are materialized later."""

    request_id: int
    arrival_ms: int
    prompt_len: int
    output_len: int
    corpus: str

    def validate(self) -> "TraceEntry":
        if self.arrival_ms < 0:
            raise ContractViolation("arrival_ms must be >= 0")
        if self.prompt_len < 1 or self.output_len < 1:
            raise ContractViolation("prompt_len and output_len must be >= 1")
        if self.corpus not in ("random", "repetitive"):
            raise ContractViolation(f"unknown corpus {self.corpus!r}")
        return self


def generate_trace(profile: TrafficProfile, seed: int) -> List[TraceEntry]:
    """Seeded Poisson arrivals over the profile's phases, sorted by time."""
    profile.validate()
    rng = np.random.default_rng([seed, 0xA221])
    entries: List[TraceEntry] = []
    t = 0.0
    for ph in profile.phases:
        end = t + ph.duration_ms
        if ph.rate_per_s > 0:
            mean_gap_ms = 1000.0 / ph.rate_per_s
            cursor = t + rng.exponential(mean_gap_ms)
            while cursor < end:
                prompt, output = profile.lengths.draw(rng)
                entries.append(
                    TraceEntry(
                        request_id=len(entries),
                        arrival_ms=int(cursor),
                        prompt_len=prompt,
                        output_len=output,
                        corpus=profile.corpus,
                    )
                )
                cursor += rng.exponential(mean_gap_ms)
        t = end
    return entries


def materialize_prompt(entry: TraceEntry, vocab_size: int, seed: int) -> List[int]:
    """Deterministic prompt tokens for a trace entry.

    The repetitive corpus embeds a short seeded template repeated to the
    prompt length, the pattern suffix speculation thrives on.
    """
    rng = np.random.default_rng([seed, entry.request_id, 0x51])
    n = entry.prompt_len
    if entry.corpus == "random":
        return [int(x) for x in rng.integers(0, vocab_size, size=n)]
    ell = int(rng.integers(4, 13))
    template = [int(x) for x in rng.integers(0, vocab_size, size=ell)]
    reps = -(-n // ell)
    return (template * reps)[:n]


def write_trace(path: str, entries: Sequence[TraceEntry]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(
                json.dumps(
                    {
                        "arrival_ms": e.arrival_ms,
                        "prompt_len": e.prompt_len,
                        "output_len": e.output_len,
                        "corpus": e.corpus,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def read_trace(path: str) -> List[TraceEntry]:
    """Parse a JSON-lines trace; parse errors report the line number."""
    entries: List[TraceEntry] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("expected a JSON object")
                extra = set(obj) - {"arrival_ms", "prompt_len", "output_len", "corpus"}
                if extra:
                    raise ValueError(f"unknown keys {sorted(extra)}")
                entry = TraceEntry(
                    request_id=len(entries),
                    arrival_ms=int(obj["arrival_ms"]),
                    prompt_len=int(obj["prompt_len"]),
                    output_len=int(obj["output_len"]),
                    corpus=obj.get("corpus", "random"),
                ).validate()
            except (KeyError, TypeError, ValueError, ContractViolation) as exc:
                raise ContractViolation(f"{path}:{lineno}: bad trace line: {exc}") from exc
            entries.append(entry)
    entries.sort(key=lambda e: (e.arrival_ms, e.request_id))
    return [
        TraceEntry(i, e.arrival_ms, e.prompt_len, e.output_len, e.corpus)
        for i, e in enumerate(entries)
    ]


# -- cost model ---------------------------------------------------------


@dataclass(frozen=True)
class CostModel:
    """Deterministic pass-time model standing in for hardware latency."""

    device_flops_per_s: float = 1.0e10
    link_bytes_per_s: float = 1.0e9
    collective_latency_s: float = 5.0e-5

    def validate(self) -> "CostModel":
        if min(self.device_flops_per_s, self.link_bytes_per_s, self.collective_latency_s) <= 0:
            raise ConfigError("cost model parameters must be positive")
        return self

    def step_time_s(self, record: StepRecord) -> float:
        compute = record.flops_max_device / self.device_flops_per_s
        comm = sum(
            e.bytes / self.link_bytes_per_s + self.collective_latency_s
            for e in record.comm
        )
        return compute + comm


# -- requests and metrics ----------------------------------------------


class RequestState(enum.Enum):
    QUEUED = "queued"
    PREFILLING = "prefilling"
    DECODING = "decoding"
    DONE = "done"
    REJECTED = "rejected"


@dataclass
class Request:
    request_id: int
    arrival_ms: int
    prompt: List[int]
    output_budget: int
    state: RequestState = RequestState.QUEUED
    seq: object = None
    emitted: List[int] = field(default_factory=list)
    pending: Optional[int] = None
    index: Optional[SuffixIndex] = None
    first_token_ms: float = 0.0
    last_token_ms: float = 0.0

    @property
    def remaining(self) -> int:
        return self.output_budget - len(self.emitted)


@dataclass(frozen=True)
class RequestMetrics:
    request_id: int
    arrival_ms: int
    ttft_ms: float
    tpot_ms: float
    e2e_ms: float
    tokens_in: int
    tokens_out: int


@dataclass(frozen=True)
class StepLogEntry:
    step_id: int
    sim_time_ms: float
    mode: str
    batch_kind: str
    batch_tokens: int
    n_requests: int
    emitted: int
    flops: int
    bytes: float
    step_time_ms: float
    prefill_flops_saved: int


@dataclass
class ServingResult:
    metrics: List[RequestMetrics]
    steps: List[StepLogEntry]
    rejected: List[dict]
    outputs: Dict[int, List[int]]


def run_serving_loop(
    engine: Engine,
    trace: Sequence[TraceEntry],
    policy: ShiftPolicy,
    cost_model: CostModel,
    speculation: Optional[SpeculationConfig] = None,
    seed: int = 0,
) -> ServingResult:
    """Run the trace to completion on the simulated clock.

    Deterministic for a fixed (engine weights, trace, policy, cost model,
    speculation, seed). A request whose prompt plus budget cannot fit the
    model's sequence limit is rejected up front and logged; the run
    continues without it.
    """
    policy.validate()
    cost_model.validate()
    spec = (speculation or SpeculationConfig()).validate()
    cfg = engine.config

    pending_arrivals: List[Request] = []
    rejected: List[dict] = []
    for entry in sorted(trace, key=lambda e: (e.arrival_ms, e.request_id)):
        entry.validate()
        need = entry.prompt_len + entry.output_len - 1
        if entry.prompt_len > cfg.max_seq or need > cfg.max_seq:
            rejected.append(
                {
                    "request_id": entry.request_id,
                    "arrival_ms": entry.arrival_ms,
                    "error": f"needs {need} cache slots, max_seq is {cfg.max_seq}",
                }
            )
            continue
        pending_arrivals.append(
            Request(
                request_id=entry.request_id,
                arrival_ms=entry.arrival_ms,
                prompt=materialize_prompt(entry, cfg.vocab_size, seed),
                output_budget=entry.output_len,
            )
        )

    queued: List[Request] = []
    decoding: List[Request] = []
    metrics: List[RequestMetrics] = []
    steps: List[StepLogEntry] = []
    outputs: Dict[int, List[int]] = {}
    sim_ms = 0.0
    arrival_i = 0

    def admit_up_to(now_ms: float) -> None:
        nonlocal arrival_i
        while arrival_i < len(pending_arrivals) and pending_arrivals[arrival_i].arrival_ms <= now_ms:
            req = pending_arrivals[arrival_i]
            req.seq = engine.new_sequence(
                req.request_id, capacity=len(req.prompt) + req.output_budget - 1
            )
            queued.append(req)
            arrival_i += 1

    def finish(req: Request) -> None:
        req.state = RequestState.DONE
        outputs[req.request_id] = list(req.emitted)
        tokens_out = len(req.emitted)
        tpot = (
            (req.last_token_ms - req.first_token_ms) / (tokens_out - 1)
            if tokens_out > 1
            else 0.0
        )
        metrics.append(
            RequestMetrics(
                request_id=req.request_id,
                arrival_ms=req.arrival_ms,
                ttft_ms=req.first_token_ms - req.arrival_ms,
                tpot_ms=tpot,
                e2e_ms=req.last_token_ms - req.arrival_ms,
                tokens_in=len(req.prompt),
                tokens_out=tokens_out,
            )
        )

    while True:
        admit_up_to(sim_ms)
        if not queued and not decoding:
            if arrival_i >= len(pending_arrivals):
                break
            sim_ms = max(sim_ms, float(pending_arrivals[arrival_i].arrival_ms))
            continue

        if queued:
            batch_reqs = list(queued)
            queued.clear()
            for r in batch_reqs:
                r.state = RequestState.PREFILLING
            batch = Batch(
                BatchKind.PREFILL,
                [BatchItem(r.seq, list(r.prompt)) for r in batch_reqs],
            )
            mode = choose_mode(policy, batch)
            saved = 0
            if engine.swiftkv.enabled:
                shape = engine.pass_shape(batch)
                from .flops import flop_count

                cut = engine.swiftkv.resolve_cut(cfg.n_layers)
                std = flop_count(shape, mode, cfg, engine.world_size).total
                early = flop_count(
                    shape, mode, cfg, engine.world_size, swiftkv_cut=cut
                ).total
                saved = std - early
            logits, record = engine.step(batch, mode=mode)
            dt_ms = cost_model.step_time_s(record) * 1000.0
            sim_ms += dt_ms
            emitted_count = 0
            for r, lg in zip(batch_reqs, logits):
                tok = greedy_token(lg)
                r.emitted.append(tok)
                r.pending = tok
                r.first_token_ms = sim_ms
                r.last_token_ms = sim_ms
                emitted_count += 1
                if spec.enabled:
                    r.index = SuffixIndex(
                        r.prompt,
                        min_match=spec.min_match,
                        max_spec=spec.max_spec,
                        window=spec.window,
                    )
                    r.index.append(tok)
                if r.remaining == 0:
                    finish(r)
                else:
                    r.state = RequestState.DECODING
                    decoding.append(r)
            steps.append(
                StepLogEntry(
                    step_id=record.step_id,
                    sim_time_ms=sim_ms,
                    mode=record.mode.value,
                    batch_kind="prefill",
                    batch_tokens=record.new_tokens,
                    n_requests=record.n_requests,
                    emitted=emitted_count,
                    flops=record.flops_total,
                    bytes=record.comm_bytes,
                    step_time_ms=dt_ms,
                    prefill_flops_saved=saved,
                )
            )
            continue

        # decode pass over every active request
        batch_reqs = list(decoding)
        drafts: List[Tuple[int, ...]] = []
        items: List[BatchItem] = []
        for r in batch_reqs:
            if spec.enabled:
                draft = propose(r.index, limit=r.remaining - 1).tokens
            else:
                draft = ()
            drafts.append(draft)
            items.append(BatchItem(r.seq, [r.pending, *draft]))
        batch = Batch(BatchKind.DECODE, items, speculative=spec.enabled)
        mode = choose_mode(policy, batch)
        span = spec.enabled
        logits, record = engine.step(batch, mode=mode, span_logits=span)
        dt_ms = cost_model.step_time_s(record) * 1000.0
        sim_ms += dt_ms
        emitted_count = 0
        still: List[Request] = []
        for r, draft, lg in zip(batch_reqs, drafts, logits):
            if span:
                t0 = r.seq.cache.token_count - (1 + len(draft))
                out = _greedy_accept(draft, lg)
                r.seq.cache.truncate(t0 + len(out))
            else:
                out = [greedy_token(lg)]
            r.emitted.extend(out)
            r.pending = out[-1]
            r.last_token_ms = sim_ms
            emitted_count += len(out)
            if spec.enabled:
                r.index.extend(out)
            if r.remaining == 0:
                finish(r)
            else:
                still.append(r)
        decoding = still
        steps.append(
            StepLogEntry(
                step_id=record.step_id,
                sim_time_ms=sim_ms,
                mode=record.mode.value,
                batch_kind="decode",
                batch_tokens=record.new_tokens,
                n_requests=record.n_requests,
                emitted=emitted_count,
                flops=record.flops_total,
                bytes=record.comm_bytes,
                step_time_ms=dt_ms,
                prefill_flops_saved=0,
            )
        )

    metrics.sort(key=lambda m: m.request_id)
    return ServingResult(metrics=metrics, steps=steps, rejected=rejected, outputs=outputs)


# -- summaries and artifacts -------------------------------------------


def _nearest_rank(values: List[float], q: float) -> float:
    return float(np.percentile(np.asarray(values, dtype=np.float64), q, method="higher"))


def summarize(result: ServingResult) -> dict:
    """Aggregate metrics; percentiles use the nearest-rank convention."""
    ms = result.metrics
    mode_seq = [s.mode for s in result.steps]
    shifts = sum(1 for a, b in zip(mode_seq, mode_seq[1:]) if a != b)
    if not ms:
        return {
            "empty": True,
            "requests": 0,
            "rejected": len(result.rejected),
            "mode_shift_count": shifts,
            "combined_throughput_tokens_per_s": 0.0,
        }
    ttfts = [m.ttft_ms for m in ms]
    tpots = [m.tpot_ms for m in ms]
    first_arrival = min(m.arrival_ms for m in ms)
    last_done = max(m.arrival_ms + m.e2e_ms for m in ms)
    makespan_ms = last_done - first_arrival
    total_tokens = sum(m.tokens_in + m.tokens_out for m in ms)
    return {
        "empty": False,
        "requests": len(ms),
        "rejected": len(result.rejected),
        "median_ttft_ms": _nearest_rank(ttfts, 50),
        "p99_ttft_ms": _nearest_rank(ttfts, 99),
        "median_tpot_ms": _nearest_rank(tpots, 50),
        "p99_tpot_ms": _nearest_rank(tpots, 99),
        "combined_throughput_tokens_per_s": total_tokens / (makespan_ms / 1000.0),
        "mode_shift_count": shifts,
        "makespan_ms": makespan_ms,
        "tokens_in_total": sum(m.tokens_in for m in ms),
        "tokens_out_total": sum(m.tokens_out for m in ms),
        "prefill_flops_saved_total": sum(s.prefill_flops_saved for s in result.steps),
    }


METRICS_HEADER = "request_id,arrival_ms,ttft_ms,tpot_ms,e2e_ms,tokens_in,tokens_out"


def write_metrics_csv(path: str, metrics: Sequence[RequestMetrics]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(METRICS_HEADER + "\n")
        for m in metrics:
            fh.write(
                f"{m.request_id},{m.arrival_ms},{m.ttft_ms:.6f},{m.tpot_ms:.6f},"
                f"{m.e2e_ms:.6f},{m.tokens_in},{m.tokens_out}\n"
            )


def write_step_log(path: str, steps: Sequence[StepLogEntry]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in steps:
            fh.write(
                json.dumps(
                    {
                        "step_id": s.step_id,
                        "sim_time_ms": round(s.sim_time_ms, 9),
                        "mode": s.mode,
                        "batch_kind": s.batch_kind,
                        "batch_tokens": s.batch_tokens,
                        "n_requests": s.n_requests,
                        "emitted": s.emitted,
                        "flops": s.flops,
                        "bytes": s.bytes,
                        "step_time_ms": round(s.step_time_ms, 9),
                        "prefill_flops_saved": s.prefill_flops_saved,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def write_summary(path: str, summary: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
