import numpy as np
import pytest

from shiftsim.errors import ContractViolation
from shiftsim.flops import (
    FlopCount,
    FlopMeter,
    PassShape,
    flop_count,
    shard_bounds,
    shard_rows,
)
from shiftsim.model import ModelConfig
from shiftsim.swiftkv import swiftkv_flop_ratio


def test_flop_meter_accumulates():
    m = FlopMeter()
    m.add_matmul(2, 3, 4)
    m.add_matmul(1, 1, 1)
    assert m.flops == 2 * 2 * 3 * 4 + 2


def test_pass_shape_validation():
    PassShape(spans=(3, 1), history=(0, 5))
    PassShape(spans=(), history=())  # the zero-token batch
    with pytest.raises(ContractViolation):
        PassShape(spans=(0,), history=(0,))
    with pytest.raises(ContractViolation):
        PassShape(spans=(1, 2), history=(0,))


def test_shard_rows_remainder_to_low_ranks():
    assert shard_rows(10, 4) == [3, 3, 2, 2]
    assert shard_rows(4, 4) == [1, 1, 1, 1]
    assert shard_rows(2, 4) == [1, 1, 0, 0]
    assert shard_bounds(10, 4) == [(0, 3), (3, 6), (6, 8), (8, 10)]


def hand_total(cfg: ModelConfig, spans, history):
    """Independent total-FLOP accumulation for a standard pass."""
    h, d, f, v = cfg.hidden, cfg.head_dim, cfg.ffn_dim, cfg.vocab_size
    big_m = sum(spans)
    total = 0
    for _ in range(cfg.n_layers):
        total += 3 * 2 * big_m * h * h  # qkv
        for m, t0 in zip(spans, history):
            w = t0 + m
            total += cfg.n_heads * (2 * m * d * w + 2 * m * w * d)
        total += 2 * big_m * h * h  # wo
        total += 2 * big_m * h * f + 2 * big_m * f * h  # mlp
    total += 2 * len(spans) * h * v  # final-row logits per request
    return total


@pytest.mark.parametrize("mode", ["tp", "sp"])
@pytest.mark.parametrize("p", [1, 2, 4])
def test_flop_count_total_matches_hand_formula(mode, p):
    cfg = ModelConfig(n_layers=2, n_heads=4, head_dim=8, ffn_dim=64, vocab_size=64)
    spans, history = (7, 1, 4), (0, 12, 3)
    shape = PassShape(spans=spans, history=history)
    got = flop_count(shape, mode, cfg, p)
    assert got.total == hand_total(cfg, spans, history)


def test_flop_count_tp_is_balanced():
    cfg = ModelConfig(n_layers=2, n_heads=4, head_dim=8, ffn_dim=64, vocab_size=64)
    shape = PassShape(spans=(8,), history=(0,))
    fc = flop_count(shape, "tp", cfg, 4)
    assert len(fc.per_device) == 4
    assert fc.max_device * 4 == fc.total


def test_flop_count_zero_batch():
    cfg = ModelConfig(n_layers=2, n_heads=4, head_dim=8, ffn_dim=64, vocab_size=64)
    fc = flop_count(PassShape(spans=(), history=()), "tp", cfg, 2)
    assert fc.total == 0


def test_flop_count_rejects_unknown_mode():
    cfg = ModelConfig()
    with pytest.raises(ContractViolation):
        flop_count(PassShape(spans=(1,), history=(0,)), "pp", cfg, 2)


def test_swiftkv_cut_reduces_prefill_flops():
    cfg = ModelConfig(n_layers=4, n_heads=4, head_dim=8, ffn_dim=64, vocab_size=64)
    shape = PassShape(spans=(32,), history=(0,))
    std = flop_count(shape, "tp", cfg, 2).total
    early = flop_count(shape, "tp", cfg, 2, swiftkv_cut=2).total
    assert early < std
    # a cut at the layer count is the standard structure
    assert flop_count(shape, "tp", cfg, 2, swiftkv_cut=4).total == std


def test_swiftkv_ratio_halfway_cut_bounds():
    # the halfway cut saves a bit under half: the kv projections for the
    # skipped layers and the one-row tail survive
    cfg = ModelConfig()
    ratio = swiftkv_flop_ratio(cfg, 256)
    assert 0.50 <= ratio <= 0.62
    assert ratio == pytest.approx(0.5642621750274625, abs=1e-12)


def test_swiftkv_ratio_shrinks_with_earlier_cut():
    cfg = ModelConfig()
    r1 = swiftkv_flop_ratio(cfg, 256, cut_layer=1)
    r3 = swiftkv_flop_ratio(cfg, 256, cut_layer=3)
    assert r1 < swiftkv_flop_ratio(cfg, 256) < r3


def test_flop_count_sp_splits_rows_not_width():
    # per-device flops under SP follow the token split, remainder first
    cfg = ModelConfig(n_layers=1, n_heads=2, head_dim=4, ffn_dim=16, vocab_size=32)
    shape = PassShape(spans=(5,), history=(0,))
    fc = flop_count(shape, "sp", cfg, 2)
    assert fc.per_device[0] > fc.per_device[1]
    assert fc.total == hand_total(cfg, (5,), (0,))
