import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shiftsim.errors import ConfigError, ContractViolation
from shiftsim.fabric import DeviceGroup
from shiftsim.model import induction_weights, reference_greedy
from shiftsim.parallel_engine import Engine, ParallelMode, ShiftPolicy
from shiftsim.spec_decode import (
    DraftResult,
    SpeculationConfig,
    SuffixIndex,
    decode_with_speculation,
    propose,
)

from conftest import seeded_prompt


def brute_propose(hist, min_match, max_spec, window, limit=None):
    """Independent oracle: scan every candidate end position directly."""
    n = len(hist)
    k = max_spec if limit is None else min(max_spec, limit)
    if k < 1:
        return (), 0
    best_len, best_pos = 0, -1
    for p in range(n - 1):
        if hist[p] != hist[n - 1]:
            continue
        cap = min(window, p + 1, n - 1 - p)
        ell = 0
        while ell < cap and hist[p - ell] == hist[n - 1 - ell]:
            ell += 1
        if ell >= best_len:
            best_len, best_pos = ell, p
    if best_len < min_match:
        return (), best_len
    return tuple(hist[best_pos + 1 : best_pos + 1 + k]), best_len


def make_index(hist, **kw):
    return SuffixIndex(hist, **kw)


def test_propose_pure_repetition():
    got = propose(make_index([4, 4, 4, 4], max_spec=2))
    assert got == DraftResult(tokens=(4, 4), match_len=2)


def test_propose_period_replay_runs_into_suffix():
    # the best match ends at position 1; its continuation overlaps the
    # suffix itself, which is what lets a short cycle replay
    got = propose(make_index([5, 7, 9, 5, 7], max_spec=3))
    assert got.tokens == (9, 5, 7)
    assert got.match_len == 2


def test_propose_below_min_match_is_empty():
    got = propose(make_index([2, 9, 2], min_match=2))
    assert got.tokens == ()
    assert got.match_len == 1


def test_propose_no_candidates():
    got = propose(make_index([1, 2, 3, 4]))
    assert got == DraftResult(tokens=(), match_len=0)


def test_propose_window_caps_match_length():
    hist = [1, 2, 3] * 8
    got = propose(make_index(hist, window=4, max_spec=3))
    assert got.match_len == 4


def test_propose_limit_and_empty_history():
    idx = make_index([6, 8, 6, 8])
    assert len(propose(idx, limit=1).tokens) == 1
    assert propose(idx, limit=0).tokens == ()
    with pytest.raises(ContractViolation):
        propose(make_index([]))


def test_propose_prefers_most_recent_tie():
    # two occurrences with equal match length: the later one wins, so the
    # draft continues from the more recent context
    hist = [3, 9, 1, 1, 3, 9, 2, 2, 3, 9]
    got = propose(make_index(hist, max_spec=2))
    assert got.tokens == (2, 2)


@settings(max_examples=150, deadline=None)
@given(
    hist=st.lists(st.integers(0, 4), min_size=1, max_size=40),
    min_match=st.integers(1, 3),
    max_spec=st.integers(1, 6),
    window=st.integers(1, 12),
)
def test_propose_matches_bruteforce(hist, min_match, max_spec, window):
    idx = make_index(hist, min_match=min_match, max_spec=max_spec, window=window)
    want_tokens, want_len = brute_propose(hist, min_match, max_spec, window)
    got = propose(idx)
    assert (got.tokens, got.match_len) == (want_tokens, want_len)


def test_suffix_index_incremental_matches_bulk():
    hist = seeded_prompt(60, 30, 8)
    bulk = make_index(hist)
    inc = make_index(hist[:10])
    inc.extend(hist[10:25])
    for t in hist[25:]:
        inc.append(t)
    assert list(inc.history) == list(bulk.history)
    assert propose(inc) == propose(bulk)


def test_speculation_config_validation():
    SpeculationConfig(enabled=True).validate()
    with pytest.raises(ConfigError):
        SpeculationConfig(min_match=0).validate()
    with pytest.raises(ConfigError):
        SpeculationConfig(max_spec=0).validate()
    with pytest.raises(ConfigError):
        SpeculationConfig(window=0).validate()


def offline_pass_count(prompt, plain, spec):
    """Pass-count oracle: replay accept/reject against the plain output."""
    idx = SuffixIndex(
        prompt, min_match=spec.min_match, max_spec=spec.max_spec, window=spec.window
    )
    idx.append(plain[0])
    emitted, passes = 1, 1
    while emitted < len(plain):
        remaining = len(plain) - emitted
        draft = propose(idx, limit=remaining - 1).tokens
        future = plain[emitted:]
        acc = 0
        while acc < len(draft) and draft[acc] == future[acc]:
            acc += 1
        take = acc + 1  # accepted run plus the corrected/bonus token
        idx.extend(future[:take])
        emitted += take
        passes += 1
    return passes


@pytest.mark.parametrize("corpus", ["random", "repetitive"])
def test_speculative_output_equals_plain_greedy(corpus):
    w = induction_weights(max_seq=256)
    spec = SpeculationConfig(enabled=True)
    budget = 24
    for i in range(4):
        rng = np.random.default_rng([61, i])
        if corpus == "random":
            prompt = [int(x) for x in rng.integers(0, 32, size=40)]
        else:
            tpl = [int(x) for x in rng.integers(0, 32, size=int(rng.integers(3, 8)))]
            prompt = (tpl * 20)[:40]
        plain = reference_greedy(w, prompt, budget)
        eng = Engine(w, DeviceGroup(2), ShiftPolicy.fixed_tp())
        got, stats = decode_with_speculation(eng, prompt, budget, spec=spec)
        assert got == plain
        assert stats.tokens_emitted == budget
        assert stats.target_passes == offline_pass_count(prompt, plain, spec)
        assert stats.accepted_total <= stats.drafted_total


def test_rejections_still_exact():
    # random-token prompts draft aggressively yet wrongly at times; the
    # verify pass must correct every miss
    w = induction_weights(max_seq=256)
    spec = SpeculationConfig(enabled=True, min_match=1, max_spec=6)
    prompt = [int(x) for x in np.random.default_rng(62).integers(0, 32, size=30)]
    plain = reference_greedy(w, prompt, 20)
    eng = Engine(w, DeviceGroup(2), ShiftPolicy.fixed_tp())
    got, stats = decode_with_speculation(eng, prompt, 20, spec=spec)
    assert got == plain
    assert stats.accepted_total < stats.drafted_total  # at least one miss


def test_repetitive_prompt_halves_pass_count():
    w = induction_weights(max_seq=256)
    tpl = [3, 14, 7, 9]
    prompt = (tpl * 12)[:48]
    budget = 32
    eng = Engine(w, DeviceGroup(2), ShiftPolicy.fixed_tp())
    got, stats = decode_with_speculation(
        eng, prompt, budget, spec=SpeculationConfig(enabled=True)
    )
    assert got == reference_greedy(w, prompt, budget)
    assert stats.target_passes <= budget // 2
    assert stats.accepted_len_mean >= 1.0


def test_zero_budget_runs_no_passes():
    w = induction_weights(max_seq=64)
    eng = Engine(w, DeviceGroup(2), ShiftPolicy.fixed_tp())
    got, stats = decode_with_speculation(eng, [1, 2, 3], 0)
    assert got == []
    assert stats.target_passes == 0


def test_speculation_works_in_sp_mode():
    w = induction_weights(max_seq=256)
    prompt = ([5, 11, 2] * 16)[:48]
    plain = reference_greedy(w, prompt, 16)
    eng = Engine(w, DeviceGroup(2), ShiftPolicy.fixed_sp())
    got, _ = decode_with_speculation(
        eng, prompt, 16, spec=SpeculationConfig(enabled=True), mode=ParallelMode.SP
    )
    assert got == plain


def test_cache_truncation_frees_rejected_rows():
    w = induction_weights(max_seq=256)
    prompt = [int(x) for x in np.random.default_rng(63).integers(0, 32, size=20)]
    budget = 12
    eng = Engine(w, DeviceGroup(2), ShiftPolicy.fixed_tp())
    got, stats = decode_with_speculation(
        eng, prompt, budget, spec=SpeculationConfig(enabled=True, min_match=1)
    )
    # capacity was provisioned for prompt + budget - 1 rows; finishing
    # without overflow means every rejected draft row was reclaimed
    assert len(got) == budget
