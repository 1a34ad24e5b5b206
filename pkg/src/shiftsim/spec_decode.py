"""Suffix speculation: draft tokens from the request's own history.

The drafter looks for the longest suffix of the history (capped at a
window) that also occurred earlier, and proposes the tokens that followed
the most recent earlier occurrence. Drafts are verified in one batched
engine pass that scores every draft position at once; the longest prefix
agreeing with the target's own greedy choices is accepted, plus the
target's token at the first disagreement. Rejected rows are rolled back
by truncating the cache cursor, which moves no bytes.

Output is token-identical to plain greedy decoding by construction: each
scored row sees exactly the cache window a sequential decode would have
seen (causal masking keeps later staged rows invisible), so the argmax at
every accepted position is the argmax plain decoding would have produced.

Convention: the engine's decode state is (cache, pending token) where
pending is the newest emitted token, not yet processed. A verify pass
processes [pending, *draft], so an empty draft degenerates to plain
one-token decode.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ContractViolation
from .model import greedy_token
from .parallel_engine import Batch, BatchItem, BatchKind, Engine, ParallelMode


@dataclass(frozen=True)
class SpeculationConfig:
    """Config key ``speculation``: {enabled, min_match, max_spec, window}."""

    enabled: bool = False
    min_match: int = 2
    max_spec: int = 8
    window: int = 64

    def validate(self) -> "SpeculationConfig":
        if self.min_match < 1:
            raise ConfigError("min_match must be >= 1")
        if self.max_spec < 1:
            raise ConfigError("max_spec must be >= 1")
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        return self


class SuffixIndex:
    """Append-only token history plus a postings map for match queries.

    The postings map sends each token to the ascending list of positions
    where it occurs, so candidate match endpoints are found directly
    instead of scanning the whole history.
    """

    def __init__(
        self,
        history: Iterable[int] = (),
        min_match: int = 2,
        max_spec: int = 8,
        window: int = 64,
    ):
        if min_match < 1 or max_spec < 1 or window < 1:
            raise ContractViolation("min_match, max_spec, window must be >= 1")
        self.min_match = min_match
        self.max_spec = max_spec
        self.window = window
        self._hist: List[int] = []
        self._postings: dict = {}
        self.extend(history)

    def append(self, token: int) -> None:
        self._postings.setdefault(token, []).append(len(self._hist))
        self._hist.append(int(token))

    def extend(self, tokens: Iterable[int]) -> None:
        for t in tokens:
            self.append(t)

    def __len__(self) -> int:
        return len(self._hist)

    @property
    def history(self) -> Tuple[int, ...]:
        return tuple(self._hist)


@dataclass(frozen=True)
class DraftResult:
    """Proposed continuation plus the suffix-match length it came from."""

    tokens: Tuple[int, ...]
    match_len: int

    def __post_init__(self):
        if len(self.tokens) > 0 and self.match_len < 1:
            raise ContractViolation("nonempty draft requires a positive match")


def propose(index: SuffixIndex, limit: Optional[int] = None) -> DraftResult:
    """Draft up to max_spec tokens from the best earlier suffix occurrence.

    A match of length ell pairs the history's final ell tokens with an
    earlier occurrence ending at position p; the occurrence must end
    before the suffix begins (ell <= n-1-p), though the proposed
    continuation hist[p+1:] may run into the suffix region, which is what
    lets a short period replay indefinitely. Ties on length go to the most
    recent occurrence. ``limit`` caps the draft below max_spec (used to
    avoid drafting past a request's remaining budget).
    """
    hist = index._hist
    n = len(hist)
    if n == 0:
        raise ContractViolation("propose requires nonempty history")
    k = index.max_spec if limit is None else min(index.max_spec, limit)
    if k < 1:
        return DraftResult((), 0)
    last = hist[-1]
    best_len, best_pos = 0, -1
    for p in index._postings.get(last, ()):
        if p >= n - 1:
            continue
        cap = min(index.window, p + 1, n - 1 - p)
        ell = 0
        while ell < cap and hist[p - ell] == hist[n - 1 - ell]:
            ell += 1
        if ell >= best_len:
            best_len, best_pos = ell, p
    if best_len < index.min_match:
        return DraftResult((), best_len)
    return DraftResult(tuple(hist[best_pos + 1 : best_pos + 1 + k]), best_len)


def _greedy_accept(draft: Sequence[int], rows: np.ndarray) -> List[int]:
    """Longest greedy-consistent prefix plus the target's next token."""
    emitted: List[int] = []
    for i, d in enumerate(draft):
        t = greedy_token(rows[i])
        if t != d:
            emitted.append(t)
            return emitted
        emitted.append(d)
    emitted.append(greedy_token(rows[len(draft)]))
    return emitted


def verify_and_accept(
    engine: Engine,
    seq,
    pending: int,
    draft: Sequence[int],
    mode: Optional[ParallelMode] = None,
):
    """One verification pass; returns (emitted tokens, step record).

    Emits between 1 and len(draft)+1 tokens. The cache is left holding
    exactly the context plus the accepted prefix; rejected rows are
    truncated away without moving any accepted bytes.
    """
    v = engine.config.vocab_size
    for d in draft:
        if not 0 <= d < v:
            raise ContractViolation(f"draft token id {d} outside vocab [0, {v})")
    t0 = seq.cache.token_count
    batch = Batch(
        BatchKind.DECODE,
        [BatchItem(seq, [pending, *draft])],
        speculative=True,
    )
    logits, record = engine.step(batch, mode=mode, span_logits=True)
    emitted = _greedy_accept(draft, logits[0])
    accepted = len(emitted) - 1
    seq.cache.truncate(t0 + 1 + accepted)
    return emitted, record


@dataclass
class SpecStats:
    """Pass and acceptance accounting for one speculative decode."""

    target_passes: int = 0
    tokens_emitted: int = 0
    drafted_total: int = 0
    accepted_total: int = 0
    accepted_lengths: List[int] = field(default_factory=list)

    @property
    def accepted_len_mean(self) -> float:
        if not self.accepted_lengths:
            return 0.0
        return sum(self.accepted_lengths) / len(self.accepted_lengths)


def decode_with_speculation(
    engine: Engine,
    prompt: Sequence[int],
    budget: int,
    spec: Optional[SpeculationConfig] = None,
    mode: Optional[ParallelMode] = None,
    seq_id: int = 0,
):
    """Prefill then propose/verify until the output budget is met.

    Returns (emitted tokens, SpecStats). target_passes counts every engine
    pass including the prefill; budget 0 runs no passes at all. With
    speculation disabled this is plain greedy decoding in budget passes.
    """
    if budget < 0:
        raise ContractViolation("budget must be >= 0")
    spec = (spec or SpeculationConfig(enabled=True)).validate()
    stats = SpecStats()
    if budget == 0:
        return [], stats
    seq = engine.new_sequence(seq_id, capacity=len(prompt) + budget - 1)
    logits, _ = engine.step(Batch(BatchKind.PREFILL, [BatchItem(seq, list(prompt))]), mode=mode)
    stats.target_passes += 1
    first = greedy_token(logits[0])
    emitted = [first]
    stats.tokens_emitted += 1
    index = SuffixIndex(
        prompt,
        min_match=spec.min_match,
        max_spec=spec.max_spec,
        window=spec.window,
    )
    index.append(first)
    pending = first
    while len(emitted) < budget:
        remaining = budget - len(emitted)
        if spec.enabled:
            draft = propose(index, limit=remaining - 1).tokens
        else:
            draft = ()
        out, _ = verify_and_accept(engine, seq, pending, list(draft), mode=mode)
        stats.target_passes += 1
        stats.drafted_total += len(draft)
        stats.accepted_total += len(out) - 1
        stats.accepted_lengths.append(len(out) - 1)
        emitted.extend(out)
        index.extend(out)
        stats.tokens_emitted += len(out)
        pending = out[-1]
    return emitted, stats
