"""Early-exit prefill configuration.

With early exit enabled, a prefill pass runs the full prompt through only
the first ``cut_layer`` layers. The hidden state at the cut is normalized
once and reused to project K/V for every later layer (one k and one v
matmul per layer, no attention or MLP over the prompt bulk). Only each
request's final prompt position then runs through the remaining layers to
produce the first-token logits. Decode passes are untouched and read the
same cache, so later-layer keys and values seen during decode are the
cheap projected ones rather than fully propagated ones.

The cut trades prefill compute against fidelity; with random weights the
output still changes, so equivalence tests only cover the degenerate cut
at the layer count, where the engine falls back to the standard path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .errors import ConfigError, ContractViolation
from .flops import swiftkv_flop_ratio

__all__ = ["SwiftKvConfig", "prefill_swiftkv", "swiftkv_flop_ratio"]


@dataclass(frozen=True)
class SwiftKvConfig:
    """Early-exit prefill switch; ``cut_layer=None`` means halfway down."""

    enabled: bool = False
    cut_layer: Optional[int] = None

    def resolve_cut(self, n_layers: int) -> int:
        """Effective cut layer for an ``n_layers`` model.

        A cut equal to ``n_layers`` is the degenerate no-skip case; the
        engine then takes the standard prefill path.
        """
        if not self.enabled:
            return n_layers
        cut = n_layers // 2 if self.cut_layer is None else self.cut_layer
        if not 1 <= cut <= n_layers:
            raise ConfigError(f"cut_layer {cut} outside [1, {n_layers}]")
        return cut


def prefill_swiftkv(engine, batch, mode=None):
    """Run one early-exit prefill pass; returns (per-item logits, record).

    The engine routes enabled prefill batches through the early-exit path
    on its own; this entry point exists for callers that want the route
    made explicit, and it refuses to silently fall back.
    """
    from .parallel_engine import BatchKind  # local import avoids a cycle

    if not engine.swiftkv.enabled:
        raise ContractViolation("early-exit prefill requires swiftkv enabled")
    if batch.kind is not BatchKind.PREFILL:
        raise ContractViolation("early-exit path only applies to prefill batches")
    return engine.step(batch, mode=mode)
