import numpy as np
import pytest

from shiftsim.errors import ConfigError, ContractViolation
from shiftsim.fabric import DeviceGroup
from shiftsim.flops import flop_count
from shiftsim.model import ModelConfig, forward_reference, greedy_token, init_weights
from shiftsim.parallel_engine import (
    Batch,
    BatchItem,
    BatchKind,
    Engine,
    ParallelMode,
    ShiftPolicy,
)
from shiftsim.swiftkv import SwiftKvConfig, prefill_swiftkv

from conftest import seeded_prompt


@pytest.fixture(scope="module")
def kv_config():
    return ModelConfig(n_layers=4, n_heads=4, head_dim=8, ffn_dim=64, vocab_size=64, max_seq=512)


@pytest.fixture(scope="module")
def kv_weights(kv_config):
    return init_weights(kv_config, seed=5)


def engine_with(weights, p, swiftkv=None):
    return Engine(weights, DeviceGroup(p), ShiftPolicy.fixed_tp(), swiftkv=swiftkv)


def test_resolve_cut():
    cfg = SwiftKvConfig(enabled=True, cut_layer=None)
    assert cfg.resolve_cut(4) == 2
    assert SwiftKvConfig(enabled=False).resolve_cut(4) == 4
    assert SwiftKvConfig(enabled=True, cut_layer=4).resolve_cut(4) == 4
    with pytest.raises(ConfigError):
        SwiftKvConfig(enabled=True, cut_layer=0).resolve_cut(4)
    with pytest.raises(ConfigError):
        SwiftKvConfig(enabled=True, cut_layer=5).resolve_cut(4)


def test_cut_at_layer_count_is_standard_path(kv_weights):
    prompt = seeded_prompt(50, 20, 64)
    eng_std = engine_with(kv_weights, 2)
    seq1 = eng_std.new_sequence(0, capacity=20)
    std, _ = eng_std.step(
        Batch(BatchKind.PREFILL, [BatchItem(seq1, list(prompt))]), mode=ParallelMode.TP
    )
    eng_deg = engine_with(kv_weights, 2, SwiftKvConfig(enabled=True, cut_layer=4))
    seq2 = eng_deg.new_sequence(0, capacity=20)
    deg, _ = eng_deg.step(
        Batch(BatchKind.PREFILL, [BatchItem(seq2, list(prompt))]), mode=ParallelMode.TP
    )
    assert std[0].tobytes() == deg[0].tobytes()


def test_prefill_swiftkv_refuses_when_disabled(kv_weights):
    eng = engine_with(kv_weights, 2)
    seq = eng.new_sequence(0, capacity=8)
    batch = Batch(BatchKind.PREFILL, [BatchItem(seq, [1, 2, 3])])
    with pytest.raises(ContractViolation):
        prefill_swiftkv(eng, batch)


def test_prefill_swiftkv_refuses_decode(kv_weights):
    eng = engine_with(kv_weights, 2, SwiftKvConfig(enabled=True, cut_layer=2))
    seq = eng.new_sequence(0, capacity=8)
    with pytest.raises(ContractViolation):
        prefill_swiftkv(eng, Batch(BatchKind.DECODE, [BatchItem(seq, [1])]))


def test_span_logits_forbidden_with_early_exit(kv_weights):
    eng = engine_with(kv_weights, 2, SwiftKvConfig(enabled=True, cut_layer=2))
    seq = eng.new_sequence(0, capacity=8)
    batch = Batch(BatchKind.PREFILL, [BatchItem(seq, [1, 2, 3])])
    with pytest.raises(ContractViolation):
        eng.step(batch, mode=ParallelMode.TP, span_logits=True)


@pytest.mark.parametrize("mode", [ParallelMode.TP, ParallelMode.SP])
@pytest.mark.parametrize("p", [1, 2])
def test_metered_flops_match_mirror_and_band(kv_weights, kv_config, mode, p):
    prompt = seeded_prompt(51, 256, 64)

    def run(swift, cut):
        eng = engine_with(kv_weights, p, swift)
        seq = eng.new_sequence(0, capacity=300)
        batch = Batch(BatchKind.PREFILL, [BatchItem(seq, list(prompt))])
        shape = eng.pass_shape(batch)
        _, rec = eng.step(batch, mode=mode)
        mirror = flop_count(shape, mode, kv_config, p, swiftkv_cut=cut)
        assert rec.flops_per_device == mirror.per_device
        return rec.flops_total

    std = run(None, None)
    early = run(SwiftKvConfig(enabled=True, cut_layer=2), 2)
    assert 0.50 <= early / std <= 0.62


def test_multi_item_sp_mirror_with_uneven_spans(kv_weights, kv_config):
    # end rows land on different owner shards; the mirror must follow them
    eng = engine_with(kv_weights, 2, SwiftKvConfig(enabled=True, cut_layer=2))
    prompts = [seeded_prompt(52, 11, 64), seeded_prompt(53, 26, 64), seeded_prompt(54, 7, 64)]
    items = [
        BatchItem(eng.new_sequence(i, capacity=44), list(p)) for i, p in enumerate(prompts)
    ]
    batch = Batch(BatchKind.PREFILL, items)
    shape = eng.pass_shape(batch)
    _, rec = eng.step(batch, mode=ParallelMode.SP)
    mirror = flop_count(shape, ParallelMode.SP, kv_config, 2, swiftkv_cut=2)
    assert rec.flops_per_device == mirror.per_device


def test_fingerprint_and_early_layers_match_standard(kv_weights):
    prompt = seeded_prompt(55, 24, 64)
    caches = {}
    for swift in (None, SwiftKvConfig(enabled=True, cut_layer=2)):
        eng = engine_with(kv_weights, 2, swift)
        seq = eng.new_sequence(0, capacity=24)
        eng.step(Batch(BatchKind.PREFILL, [BatchItem(seq, list(prompt))]), mode=ParallelMode.TP)
        caches[swift is None] = seq.cache
    std, kv = caches[True], caches[False]
    assert std.fingerprint() == kv.fingerprint()
    for dev in range(2):
        for head in range(std.heads_per_device):
            k_std, _ = std.read_window(dev, 0, head)
            k_kv, _ = kv.read_window(dev, 0, head)
            assert k_std.tobytes() == k_kv.tobytes()  # below the cut: same pass
            k_std3, _ = std.read_window(dev, 3, head)
            k_kv3, _ = kv.read_window(dev, 3, head)
            assert not np.array_equal(k_std3, k_kv3)  # above: projected entries


def test_decode_after_early_exit_prefill_is_deterministic(kv_weights):
    prompt = seeded_prompt(56, 32, 64)

    def run(mode):
        eng = engine_with(kv_weights, 2, SwiftKvConfig(enabled=True, cut_layer=2))
        seq = eng.new_sequence(0, capacity=64)
        logits, _ = prefill_swiftkv(
            eng, Batch(BatchKind.PREFILL, [BatchItem(seq, list(prompt))]), mode=mode
        )
        toks = [greedy_token(logits[0])]
        for _ in range(15):
            lg, _ = eng.step(Batch(BatchKind.DECODE, [BatchItem(seq, [toks[-1]])]), mode=mode)
            toks.append(greedy_token(lg[0]))
        return toks

    a = run(ParallelMode.TP)
    b = run(ParallelMode.TP)
    assert a == b
    c = run(ParallelMode.SP)
    assert a == c  # both modes read the same projected cache


def test_early_exit_changes_output_vs_standard(kv_weights):
    # the approximation is real: the full-model prefill logits differ
    prompt = seeded_prompt(57, 24, 64)
    eng = engine_with(kv_weights, 2, SwiftKvConfig(enabled=True, cut_layer=2))
    seq = eng.new_sequence(0, capacity=24)
    early, _ = eng.step(
        Batch(BatchKind.PREFILL, [BatchItem(seq, list(prompt))]), mode=ParallelMode.TP
    )
    want, _ = forward_reference(kv_weights, prompt)
    assert not np.allclose(early[0], want[-1])
