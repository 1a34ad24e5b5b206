import json
import math

import numpy as np
import pytest

from shiftsim.errors import ConfigError, ContractViolation
from shiftsim.fabric import DeviceGroup
from shiftsim.model import ModelConfig, induction_weights, init_weights
from shiftsim.parallel_engine import (
    BatchKind,
    CommEvent,
    Engine,
    ParallelMode,
    ShiftPolicy,
    StepRecord,
)
from shiftsim.serving import (
    METRICS_HEADER,
    CostModel,
    LengthSampler,
    PhaseSpec,
    RequestMetrics,
    ServingResult,
    TraceEntry,
    TrafficProfile,
    generate_trace,
    materialize_prompt,
    read_trace,
    run_serving_loop,
    summarize,
    write_metrics_csv,
    write_step_log,
    write_trace,
)
from shiftsim.spec_decode import SpeculationConfig


@pytest.fixture(scope="module")
def small_engine_weights():
    cfg = ModelConfig(n_layers=2, n_heads=4, head_dim=8, ffn_dim=64, vocab_size=64, max_seq=128)
    return init_weights(cfg, seed=3)


def small_engine(weights, policy=None):
    return Engine(weights, DeviceGroup(2), policy or ShiftPolicy(token_threshold=8))


def test_generate_trace_deterministic():
    prof = TrafficProfile(phases=(PhaseSpec(3000.0, 2.0),))
    a = generate_trace(prof, seed=4)
    b = generate_trace(prof, seed=4)
    c = generate_trace(prof, seed=5)
    assert [(e.arrival_ms, e.prompt_len) for e in a] == [(e.arrival_ms, e.prompt_len) for e in b]
    assert [e.arrival_ms for e in a] != [e.arrival_ms for e in c]
    assert all(0 <= e.arrival_ms < 3000 for e in a)


def test_generate_trace_zero_rate_is_empty():
    assert generate_trace(TrafficProfile(phases=(PhaseSpec(5000.0, 0.0),)), seed=1) == []


def test_poisson_counts_within_three_sigma():
    prof = TrafficProfile(phases=(PhaseSpec(5000.0, 1.0), PhaseSpec(5000.0, 20.0)))
    trace = generate_trace(prof, seed=7)
    low = sum(1 for e in trace if e.arrival_ms < 5000)
    burst = len(trace) - low
    assert abs(low - 5) <= 3 * math.sqrt(5)
    assert abs(burst - 100) <= 3 * math.sqrt(100)


def test_lognormal_sampler_keeps_length_ratio():
    prof = TrafficProfile(
        phases=(PhaseSpec(4000.0, 10.0),),
        lengths=LengthSampler("lognormal", prompt_len=200, output_len=20),
    )
    trace = generate_trace(prof, seed=9)
    assert len({e.prompt_len for e in trace}) > 3  # lengths actually vary
    for e in trace:
        assert e.output_len == max(1, round(e.prompt_len * 20 / 200))


def test_profile_validation():
    with pytest.raises(ConfigError):
        TrafficProfile(phases=(PhaseSpec(-1.0, 1.0),)).validate()
    with pytest.raises(ConfigError):
        TrafficProfile(phases=(), corpus="weird").validate()
    with pytest.raises(ConfigError):
        LengthSampler("gamma").validate()


def test_trace_round_trip(tmp_path):
    prof = TrafficProfile(phases=(PhaseSpec(2000.0, 3.0),))
    trace = generate_trace(prof, seed=2)
    path = str(tmp_path / "t.jsonl")
    write_trace(path, trace)
    back = read_trace(path)
    assert [(e.arrival_ms, e.prompt_len, e.output_len, e.corpus) for e in back] == [
        (e.arrival_ms, e.prompt_len, e.output_len, e.corpus) for e in trace
    ]


def test_read_trace_reports_line_number(tmp_path):
    path = str(tmp_path / "bad.jsonl")
    with open(path, "w") as fh:
        fh.write('{"arrival_ms": 1, "prompt_len": 4, "output_len": 2, "corpus": "random"}\n')
        fh.write("definitely not json\n")
    with pytest.raises(ContractViolation, match=":2:"):
        read_trace(path)
    with open(path, "w") as fh:
        fh.write('{"arrival_ms": 1, "prompt_len": 4, "output_len": 2, "mystery": 9}\n')
    with pytest.raises(ContractViolation, match=":1:"):
        read_trace(path)


def test_materialize_prompt_corpora():
    rnd = TraceEntry(0, 0, 40, 4, "random")
    rep = TraceEntry(1, 0, 40, 4, "repetitive")
    a = materialize_prompt(rnd, 64, seed=5)
    b = materialize_prompt(rnd, 64, seed=5)
    assert a == b and len(a) == 40 and all(0 <= t < 64 for t in a)
    assert materialize_prompt(TraceEntry(2, 0, 40, 4, "random"), 64, 5) != a
    p = materialize_prompt(rep, 64, seed=5)
    periods = [ell for ell in range(4, 13) if p == (p[:ell] * (40 // ell + 1))[:40]]
    assert periods  # embeds a short repeated template


def test_cost_model_step_time_formula():
    cm = CostModel(device_flops_per_s=1e9, link_bytes_per_s=1e8, collective_latency_s=1e-4)
    rec = StepRecord(
        step_id=0,
        mode=ParallelMode.TP,
        kind=BatchKind.DECODE,
        new_tokens=1,
        n_requests=1,
        flops_per_device=(2_000_000, 1_000_000),
        comm=(CommEvent("all_reduce", 5_000.0), CommEvent("all_gather", 10_000.0)),
    )
    want = 2_000_000 / 1e9 + (5_000 / 1e8 + 1e-4) + (10_000 / 1e8 + 1e-4)
    assert cm.step_time_s(rec) == pytest.approx(want, rel=1e-15)
    with pytest.raises(ConfigError):
        CostModel(device_flops_per_s=0).validate()


def test_single_request_closed_form(small_engine_weights):
    eng = Engine(small_engine_weights, DeviceGroup(2), ShiftPolicy.fixed_tp())
    cm = CostModel()
    trace = [TraceEntry(0, 100, 16, 4, "random")]
    res = run_serving_loop(eng, trace, ShiftPolicy.fixed_tp(), cm, seed=1)
    m = res.metrics[0]
    pre, decodes = res.steps[0], res.steps[1:]
    assert len(decodes) == 3  # budget minus the token the prefill emits
    assert m.ttft_ms == pytest.approx(pre.step_time_ms, abs=1e-12)
    assert m.tpot_ms == pytest.approx(
        sum(s.step_time_ms for s in decodes) / 3, abs=1e-12
    )
    assert m.e2e_ms == pytest.approx(
        pre.step_time_ms + sum(s.step_time_ms for s in decodes), abs=1e-12
    )
    assert m.tokens_out == 4 and m.tokens_in == 16


def test_conservation_and_clock(small_engine_weights):
    prof = TrafficProfile(
        phases=(PhaseSpec(1500.0, 4.0),),
        lengths=LengthSampler("fixed", prompt_len=20, output_len=5),
    )
    trace = generate_trace(prof, seed=8)
    assert trace
    eng = small_engine(small_engine_weights)
    res = run_serving_loop(eng, trace, ShiftPolicy(token_threshold=8), CostModel(), seed=8)
    assert sum(s.emitted for s in res.steps) == sum(m.tokens_out for m in res.metrics)
    times = [s.sim_time_ms for s in res.steps]
    assert all(a < b for a, b in zip(times, times[1:]))
    for m in res.metrics:
        assert m.ttft_ms <= m.e2e_ms
        assert m.tpot_ms >= 0.0
    for s in res.steps:
        if s.batch_kind == "prefill":
            assert s.emitted == s.n_requests
        else:
            assert s.emitted == s.batch_tokens == s.n_requests


def test_shift_policy_follows_per_pass_threshold(small_engine_weights):
    trace = [TraceEntry(i, 0, 20, 6, "random") for i in range(3)]
    eng = small_engine(small_engine_weights)
    res = run_serving_loop(eng, trace, ShiftPolicy(token_threshold=8), CostModel(), seed=2)
    for s in res.steps:
        assert s.mode == ("sp" if s.batch_tokens >= 8 else "tp")


def test_prefill_preempts_decode(small_engine_weights):
    # second request arrives mid-decode; the very next pass prefills it
    trace = [TraceEntry(0, 0, 30, 30, "random"), TraceEntry(1, 2, 30, 4, "random")]
    eng = small_engine(small_engine_weights)
    res = run_serving_loop(eng, trace, ShiftPolicy.fixed_tp(), CostModel(), seed=3)
    kinds = [s.batch_kind for s in res.steps]
    second_prefill = kinds.index("prefill", 1)
    assert kinds[second_prefill - 1] == "decode"
    arrival = trace[1].arrival_ms
    assert res.steps[second_prefill - 1].sim_time_ms > arrival


def test_oversized_request_rejected(small_engine_weights):
    trace = [
        TraceEntry(0, 0, 126, 4, "random"),  # 126 + 4 - 1 > 128
        TraceEntry(1, 0, 16, 4, "random"),
    ]
    eng = small_engine(small_engine_weights)
    res = run_serving_loop(eng, trace, ShiftPolicy.fixed_tp(), CostModel(), seed=4)
    assert len(res.rejected) == 1
    assert res.rejected[0]["request_id"] == 0
    assert "max_seq" in res.rejected[0]["error"]
    assert [m.request_id for m in res.metrics] == [1]
    # a prompt of exactly max_seq with budget 1 still fits
    trace2 = [TraceEntry(0, 0, 128, 1, "random")]
    eng2 = small_engine(small_engine_weights)
    res2 = run_serving_loop(eng2, trace2, ShiftPolicy.fixed_tp(), CostModel(), seed=4)
    assert not res2.rejected and res2.metrics[0].tokens_out == 1


def test_empty_trace_gives_empty_summary(small_engine_weights):
    eng = small_engine(small_engine_weights)
    res = run_serving_loop(eng, [], ShiftPolicy.fixed_tp(), CostModel(), seed=0)
    assert res.metrics == [] and res.steps == []
    s = summarize(res)
    assert s["empty"] is True
    assert s["requests"] == 0
    assert s["combined_throughput_tokens_per_s"] == 0.0


def test_summary_percentiles_nearest_rank():
    ms = [
        RequestMetrics(0, 0, 100.0, 1.0, 150.0, 10, 5),
        RequestMetrics(1, 0, 300.0, 3.0, 350.0, 10, 5),
    ]
    s = summarize(ServingResult(metrics=ms, steps=[], rejected=[], outputs={}))
    assert s["median_ttft_ms"] == 300.0  # nearest-rank, no interpolation
    assert s["p99_ttft_ms"] == 300.0
    assert s["median_tpot_ms"] == 3.0


def test_summary_throughput_over_makespan():
    ms = [
        RequestMetrics(0, 0, 10.0, 1.0, 500.0, 30, 10),
        RequestMetrics(1, 500, 10.0, 1.0, 1500.0, 30, 10),
    ]
    s = summarize(ServingResult(metrics=ms, steps=[], rejected=[], outputs={}))
    # makespan: first arrival 0 to last completion 2000 ms
    assert s["makespan_ms"] == 2000.0
    assert s["combined_throughput_tokens_per_s"] == pytest.approx(80 / 2.0)


def test_serving_determinism(small_engine_weights):
    prof = TrafficProfile(
        phases=(PhaseSpec(1000.0, 5.0),),
        lengths=LengthSampler("fixed", prompt_len=24, output_len=6),
    )
    trace = generate_trace(prof, seed=12)

    def run():
        eng = small_engine(small_engine_weights)
        return run_serving_loop(eng, trace, ShiftPolicy(token_threshold=8), CostModel(), seed=12)

    a, b = run(), run()
    assert a.metrics == b.metrics
    assert [s.sim_time_ms for s in a.steps] == [s.sim_time_ms for s in b.steps]


def test_speculation_in_serving_keeps_outputs_and_cuts_passes():
    w = induction_weights(max_seq=128)
    trace = [TraceEntry(i, i * 3, 36, 18, "repetitive") for i in range(4)]
    cm = CostModel()

    def run(enabled):
        eng = Engine(w, DeviceGroup(2), ShiftPolicy(token_threshold=8))
        return run_serving_loop(
            eng,
            trace,
            ShiftPolicy(token_threshold=8),
            cm,
            speculation=SpeculationConfig(enabled=enabled),
            seed=6,
        )

    plain, spec = run(False), run(True)
    assert plain.outputs == spec.outputs
    assert len(spec.steps) < len(plain.steps)
    assert sum(s.emitted for s in spec.steps) == sum(m.tokens_out for m in spec.metrics)


def test_metrics_csv_format(tmp_path):
    path = str(tmp_path / "m.csv")
    write_metrics_csv(
        path, [RequestMetrics(3, 120, 1.5, 0.25, 2.75, 16, 4)]
    )
    lines = open(path).read().splitlines()
    assert lines[0] == METRICS_HEADER == "request_id,arrival_ms,ttft_ms,tpot_ms,e2e_ms,tokens_in,tokens_out"
    assert lines[1] == "3,120,1.500000,0.250000,2.750000,16,4"


def test_step_log_format(tmp_path, small_engine_weights):
    eng = small_engine(small_engine_weights)
    trace = [TraceEntry(0, 0, 16, 3, "random")]
    res = run_serving_loop(eng, trace, ShiftPolicy.fixed_tp(), CostModel(), seed=1)
    path = str(tmp_path / "s.jsonl")
    write_step_log(path, res.steps)
    rows = [json.loads(line) for line in open(path)]
    assert len(rows) == len(res.steps)
    want_keys = {
        "step_id", "sim_time_ms", "mode", "batch_kind", "batch_tokens",
        "n_requests", "emitted", "flops", "bytes", "step_time_ms",
        "prefill_flops_saved",
    }
    assert set(rows[0]) == want_keys
    assert rows[0]["batch_kind"] == "prefill" and rows[0]["mode"] == "tp"


def test_swiftkv_savings_logged(small_engine_weights):
    from shiftsim.swiftkv import SwiftKvConfig

    eng = Engine(
        small_engine_weights,
        DeviceGroup(2),
        ShiftPolicy.fixed_tp(),
        swiftkv=SwiftKvConfig(enabled=True, cut_layer=1),
    )
    trace = [TraceEntry(0, 0, 32, 3, "random")]
    res = run_serving_loop(eng, trace, ShiftPolicy.fixed_tp(), CostModel(), seed=1)
    assert res.steps[0].prefill_flops_saved > 0
    assert all(s.prefill_flops_saved == 0 for s in res.steps[1:])
    assert summarize(res)["prefill_flops_saved_total"] == res.steps[0].prefill_flops_saved
