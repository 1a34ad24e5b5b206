"""Invariant suite behind the `verify` command.

Every check returns a record {name, status, measured, detail} so the
report is machine-readable; `run_verify` aggregates them. All checks run
on the supplied configuration's model and world size, with sequence
lengths capped for speed.
"""

from __future__ import annotations

from typing import List, Optional

import numpy as np

from .config import RunConfig
from .fabric import DeviceGroup
from .flops import flop_count
from .model import forward_reference, greedy_token, init_weights, reference_greedy
from .parallel_engine import (
    Batch,
    BatchItem,
    BatchKind,
    Engine,
    ParallelMode,
    ShiftPolicy,
)
from .spec_decode import SpeculationConfig, decode_with_speculation
from .swiftkv import SwiftKvConfig
from .tensor_core import Precision


def _check(name: str, ok: bool, measured, detail: str) -> dict:
    return {
        "name": name,
        "status": "pass" if ok else "fail",
        "measured": measured,
        "detail": detail,
    }


def _seeded_prompt(rng_seed, length: int, vocab: int) -> List[int]:
    rng = np.random.default_rng(rng_seed)
    return [int(x) for x in rng.integers(0, vocab, size=length)]


def _rel_err(got: np.ndarray, want: np.ndarray) -> float:
    denom = max(float(np.max(np.abs(want))), 1e-300)
    return float(np.max(np.abs(got - want))) / denom


def _prefill(
    engine: Engine,
    prompt: List[int],
    mode: ParallelMode,
    capacity: int,
    span_logits: bool = False,
):
    seq = engine.new_sequence(0, capacity=capacity)
    batch = Batch(BatchKind.PREFILL, [BatchItem(seq, list(prompt))])
    logits, _ = engine.step(batch, mode=mode, span_logits=span_logits)
    return seq, logits[0]


def check_mode_equivalence(cfg: RunConfig, mode: ParallelMode) -> dict:
    tol = 1e-10 if cfg.precision is Precision.F64 else 1e-4
    weights = init_weights(cfg.model, cfg.seed, cfg.precision)
    n = min(48, cfg.model.max_seq)
    worst = 0.0
    for i in range(3):
        prompt = _seeded_prompt([cfg.seed, 10 + i], n, cfg.model.vocab_size)
        group = DeviceGroup(cfg.world_size, threaded=cfg.threaded)
        engine = Engine(weights, group, ShiftPolicy.fixed_tp())
        _, logits = _prefill(engine, prompt, mode, capacity=n, span_logits=True)
        ref, _ = forward_reference(weights, prompt)
        worst = max(worst, _rel_err(logits, ref))
    return _check(
        f"{mode.value}_equivalence",
        worst <= tol,
        worst,
        f"max relative logit error vs dense reference over 3 prompts (tol {tol:g})",
    )


def check_greedy_parity(cfg: RunConfig) -> dict:
    weights = init_weights(cfg.model, cfg.seed, cfg.precision)
    n, steps = min(32, cfg.model.max_seq // 2), 16
    mismatches = 0
    for i in range(2):
        prompt = _seeded_prompt([cfg.seed, 20 + i], n, cfg.model.vocab_size)
        want = reference_greedy(weights, prompt, steps)
        for mode in (ParallelMode.TP, ParallelMode.SP):
            group = DeviceGroup(cfg.world_size, threaded=cfg.threaded)
            engine = Engine(weights, group, ShiftPolicy.fixed_tp())
            seq, logits = _prefill(engine, prompt, mode, capacity=n + steps)
            got = [greedy_token(logits)]
            for _ in range(steps - 1):
                batch = Batch(BatchKind.DECODE, [BatchItem(seq, [got[-1]])])
                lg, _ = engine.step(batch, mode=mode)
                got.append(greedy_token(lg[0]))
            mismatches += sum(1 for a, b in zip(got, want) if a != b)
    return _check(
        "greedy_parity",
        mismatches == 0,
        mismatches,
        "token mismatches vs dense greedy across both modes, 2 prompts x 16 steps",
    )


def check_kv_invariance(cfg: RunConfig) -> dict:
    weights = init_weights(cfg.model, cfg.seed, cfg.precision)
    n = min(48, cfg.model.max_seq)
    prompt = _seeded_prompt([cfg.seed, 30], n, cfg.model.vocab_size)
    seqs = {}
    for mode in (ParallelMode.TP, ParallelMode.SP):
        group = DeviceGroup(cfg.world_size, threaded=cfg.threaded)
        engine = Engine(weights, group, ShiftPolicy.fixed_tp())
        seqs[mode], _ = _prefill(engine, prompt, mode, capacity=n)
    fp_tp = seqs[ParallelMode.TP].cache.fingerprint()
    fp_sp = seqs[ParallelMode.SP].cache.fingerprint()
    max_diff = 0.0
    for dev in range(cfg.world_size):
        k_tp, v_tp = seqs[ParallelMode.TP].cache.read_window(dev, 0, 0)
        k_sp, v_sp = seqs[ParallelMode.SP].cache.read_window(dev, 0, 0)
        max_diff = max(
            max_diff,
            float(np.max(np.abs(k_tp - k_sp))),
            float(np.max(np.abs(v_tp - v_sp))),
        )
    ok = fp_tp == fp_sp and max_diff == 0.0
    return _check(
        "kv_fingerprint_invariance",
        ok,
        max_diff,
        "layout fingerprints equal and layer-0 K/V bit-identical across modes",
    )


def check_mode_switch_stability(cfg: RunConfig) -> dict:
    weights = init_weights(cfg.model, cfg.seed, cfg.precision)
    n, steps = min(32, cfg.model.max_seq // 4), 24
    prompt = _seeded_prompt([cfg.seed, 40], n, cfg.model.vocab_size)
    itemsize = np.dtype(cfg.precision.dtype).itemsize
    append_bytes = 2 * cfg.model.n_layers * cfg.model.n_heads * cfg.model.head_dim * itemsize

    def run(schedule):
        group = DeviceGroup(cfg.world_size, threaded=cfg.threaded)
        engine = Engine(weights, group, ShiftPolicy.fixed_tp())
        seq, logits = _prefill(engine, prompt, ParallelMode.TP, capacity=n + steps)
        toks = [greedy_token(logits)]
        extra = 0
        prev_mode = ParallelMode.TP
        for s in range(steps - 1):
            mode = schedule(s)
            before = seq.cache.write_counter
            batch = Batch(BatchKind.DECODE, [BatchItem(seq, [toks[-1]])])
            lg, _ = engine.step(batch, mode=mode)
            if mode is not prev_mode:
                extra += (seq.cache.write_counter - before) - append_bytes
            prev_mode = mode
            toks.append(greedy_token(lg[0]))
        return toks, extra

    fixed, _ = run(lambda s: ParallelMode.TP)
    mixed, extra = run(
        lambda s: ParallelMode.SP if s % 3 == 1 else ParallelMode.TP
    )
    mismatches = sum(1 for a, b in zip(fixed, mixed) if a != b)
    ok = mismatches == 0 and extra == 0
    return _check(
        "mode_switch_stability",
        ok,
        {"token_mismatches": mismatches, "extra_switch_bytes": extra},
        "forced TP/SP/TP decode equals fixed-TP; switches move zero cache bytes",
    )


def check_comm_ratio(cfg: RunConfig) -> dict:
    weights = init_weights(cfg.model, cfg.seed, cfg.precision)
    n = min(256, cfg.model.max_seq)
    prompt = _seeded_prompt([cfg.seed, 50], n, cfg.model.vocab_size)
    per_dev = {}
    for mode in (ParallelMode.TP, ParallelMode.SP):
        group = DeviceGroup(cfg.world_size, threaded=cfg.threaded)
        engine = Engine(weights, group, ShiftPolicy.fixed_tp())
        _prefill(engine, prompt, mode, capacity=n)
        per_dev[mode] = max(group.device_bytes(d) for d in range(cfg.world_size))
    scaled = cfg.world_size * per_dev[ParallelMode.SP] / per_dev[ParallelMode.TP]
    ok = 0.8 <= scaled <= 1.25
    return _check(
        "comm_ratio",
        ok,
        scaled,
        f"P * (SP bytes / TP bytes) per device for a {n}-token prefill, band [0.8, 1.25]",
    )


def check_swiftkv_band(cfg: RunConfig) -> dict:
    model = cfg.model
    cut = model.n_layers // 2
    if cut < 1:
        return _check("swiftkv_flop_band", True, None, "skipped: single-layer model")
    weights = init_weights(model, cfg.seed, cfg.precision)
    n = min(256, model.max_seq)
    prompt = _seeded_prompt([cfg.seed, 60], n, model.vocab_size)

    def prefill_flops(swift: Optional[SwiftKvConfig], want_cut: Optional[int]):
        group = DeviceGroup(cfg.world_size, threaded=cfg.threaded)
        engine = Engine(weights, group, ShiftPolicy.fixed_tp(), swiftkv=swift)
        seq = engine.new_sequence(0, capacity=n)
        batch = Batch(BatchKind.PREFILL, [BatchItem(seq, list(prompt))])
        shape = engine.pass_shape(batch)
        _, record = engine.step(batch, mode=ParallelMode.TP)
        analytic = flop_count(
            shape, ParallelMode.TP, model, cfg.world_size, swiftkv_cut=want_cut
        )
        return record.flops_total, analytic.total

    std_meas, std_ana = prefill_flops(None, None)
    kv_meas, kv_ana = prefill_flops(SwiftKvConfig(enabled=True, cut_layer=cut), cut)
    ratio = kv_meas / std_meas
    exact = std_meas == std_ana and kv_meas == kv_ana
    in_band = 0.50 <= ratio <= 0.62 if 2 * cut == model.n_layers else True
    return _check(
        "swiftkv_flop_band",
        exact and in_band,
        ratio,
        f"early-exit / standard prefill flops at cut {cut} (counter vs analytic exact: {exact})",
    )


def check_speculation_exactness(cfg: RunConfig) -> dict:
    weights = init_weights(cfg.model, cfg.seed, cfg.precision)
    n, budget = min(40, cfg.model.max_seq // 2), 16
    spec = SpeculationConfig(
        enabled=True,
        min_match=cfg.speculation.min_match,
        max_spec=cfg.speculation.max_spec,
        window=cfg.speculation.window,
    )
    mismatches, spec_passes, plain_passes = 0, 0, 0
    for i, corpus in enumerate(("random", "repetitive")):
        rng = np.random.default_rng([cfg.seed, 70 + i])
        if corpus == "random":
            prompt = [int(x) for x in rng.integers(0, cfg.model.vocab_size, size=n)]
        else:
            tpl = [int(x) for x in rng.integers(0, cfg.model.vocab_size, size=6)]
            prompt = (tpl * (n // 6 + 1))[:n]
        want = reference_greedy(weights, prompt, budget)
        group = DeviceGroup(cfg.world_size, threaded=cfg.threaded)
        engine = Engine(weights, group, ShiftPolicy.fixed_tp())
        got, stats = decode_with_speculation(engine, prompt, budget, spec=spec)
        mismatches += sum(1 for a, b in zip(got, want) if a != b)
        mismatches += abs(len(got) - len(want))
        spec_passes += stats.target_passes
        plain_passes += budget
    return _check(
        "speculation_exactness",
        mismatches == 0,
        {"token_mismatches": mismatches, "pass_ratio": spec_passes / plain_passes},
        "speculative output token-identical to plain greedy on 2 prompts",
    )


def run_verify(cfg: RunConfig) -> dict:
    """Run every invariant check; overall status is the conjunction."""
    cfg.validate()
    checks = [
        check_mode_equivalence(cfg, ParallelMode.TP),
        check_mode_equivalence(cfg, ParallelMode.SP),
        check_greedy_parity(cfg),
        check_kv_invariance(cfg),
        check_mode_switch_stability(cfg),
        check_comm_ratio(cfg),
        check_swiftkv_band(cfg),
        check_speculation_exactness(cfg),
    ]
    ok = all(c["status"] == "pass" for c in checks)
    return {"status": "pass" if ok else "fail", "checks": checks, "config": cfg.resolved()}
