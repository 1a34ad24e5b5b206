"""Simulated device fabric: P ranks, mailbox transport, byte-accounted collectives.

Collectives are driven in a bulk-synchronous style: each rank's local
compute runs through :meth:`DeviceGroup.map_ranks` (serially, or on a
thread pool when ``threaded=True``), and collectives take the per-rank
operands all at once. Payloads move through per-device mailboxes and the
reduction itself is computed once, in ascending rank order, so results
are identical regardless of worker scheduling.

Per-device traffic is charged with the standard ring-model formulas:

- all_reduce:  2 * (P-1)/P * tensor_bytes      per device
- all_to_all:  (P-1)/P * total_local_bytes     per device (its own blocks)
- all_gather:  (P-1)/P * concat_bytes          per device
- broadcast:   (P-1)/P * tensor_bytes          per device (ring pipeline)

Every collective appends one :class:`CommRecord` per device to the
group's ledger, tagged with the current step id and a per-collective
event id.
"""

from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, TypeVar

import numpy as np

from .errors import ContractViolation

T = TypeVar("T")


class CollectiveKind(enum.Enum):
    ALL_REDUCE = "all_reduce"
    ALL_TO_ALL = "all_to_all"
    ALL_GATHER = "all_gather"
    BROADCAST = "broadcast"


@dataclass(frozen=True)
class CommRecord:
    """Bytes one device put on the wire for one collective."""

    kind: CollectiveKind
    device: int
    bytes: float
    step_id: int
    event_id: int


class DeviceGroup:
    """A fixed group of P simulated devices with mailbox transport."""

    def __init__(self, world_size: int, threaded: bool = False):
        if world_size < 1:
            raise ContractViolation("world_size must be >= 1")
        self.world_size = world_size
        self.threaded = threaded
        self._mailboxes: List[list] = [[] for _ in range(world_size)]
        self.records: List[CommRecord] = []
        self.step_id = 0
        self._event_counter = 0
        self._pool: Optional[ThreadPoolExecutor] = (
            ThreadPoolExecutor(max_workers=world_size) if threaded and world_size > 1 else None
        )

    # -- execution -------------------------------------------------------

    def map_ranks(self, fn: Callable[[int], T]) -> List[T]:
        """Run fn(rank) for every rank; results returned in rank order.

        Rank closures must only touch rank-local state. Collectives are
        the only cross-rank synchronisation points.
        """
        if self._pool is not None:
            return list(self._pool.map(fn, range(self.world_size)))
        return [fn(rank) for rank in range(self.world_size)]

    def begin_step(self, step_id: int) -> None:
        self.step_id = step_id

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    def __enter__(self) -> "DeviceGroup":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- mailbox transport ----------------------------------------------

    def _post(self, dst: int, src: int, payload) -> None:
        self._mailboxes[dst].append((src, payload))

    def _drain(self, dst: int) -> list:
        msgs = sorted(self._mailboxes[dst], key=lambda m: m[0])
        self._mailboxes[dst] = []
        return [payload for _, payload in msgs]

    def _charge(self, kind: CollectiveKind, bytes_per_device: Sequence[float]) -> None:
        event = self._event_counter
        self._event_counter += 1
        for device, nbytes in enumerate(bytes_per_device):
            self.records.append(
                CommRecord(kind=kind, device=device, bytes=float(nbytes),
                           step_id=self.step_id, event_id=event)
            )

    # -- collectives -----------------------------------------------------

    def all_reduce_sum(self, shards: Sequence[np.ndarray]) -> List[np.ndarray]:
        """Elementwise sum over ranks, accumulated in ascending rank order.

        Every rank receives the same summed tensor. The returned arrays
        alias one buffer; callers treat collective results as read-only.
        """
        self._check_world("all_reduce_sum", shards)
        first = shards[0]
        for r, s in enumerate(shards[1:], start=1):
            if s.shape != first.shape or s.dtype != first.dtype:
                raise ContractViolation(
                    f"all_reduce_sum shard {r} has shape {s.shape}/{s.dtype}, "
                    f"want {first.shape}/{first.dtype}"
                )
        p = self.world_size
        for src in range(p):
            self._post(0, src, shards[src])
        gathered = self._drain(0)
        total = gathered[0].copy()
        for s in gathered[1:]:
            total += s
        for dst in range(p):
            self._post(dst, 0, total)
        out = [self._drain(dst)[0] for dst in range(p)]
        per_dev = 2.0 * (p - 1) / p * first.nbytes
        self._charge(CollectiveKind.ALL_REDUCE, [per_dev] * p)
        return out

    def all_to_all(self, blocks: Sequence[Sequence[np.ndarray]]) -> List[List[np.ndarray]]:
        """Each rank scatters P blocks; rank d receives block[src][d] for all src.

        Per sending rank, the P outgoing blocks must share shape and
        dtype. Received blocks arrive ordered by source rank.
        """
        self._check_world("all_to_all", blocks)
        p = self.world_size
        for src, outgoing in enumerate(blocks):
            if len(outgoing) != p:
                raise ContractViolation(f"all_to_all rank {src} sent {len(outgoing)} blocks")
            shape0, dtype0 = outgoing[0].shape[1:], outgoing[0].dtype
            for b in outgoing[1:]:
                # leading (row) dims may differ: token shards carry remainders
                if b.shape[1:] != shape0 or b.dtype != dtype0:
                    raise ContractViolation(
                        f"all_to_all rank {src} blocks must share trailing shape/dtype"
                    )
        for src in range(p):
            for dst in range(p):
                self._post(dst, src, np.ascontiguousarray(blocks[src][dst]))
        received = [self._drain(dst) for dst in range(p)]
        per_dev = [
            (p - 1) / p * sum(b.nbytes for b in outgoing) for outgoing in blocks
        ]
        self._charge(CollectiveKind.ALL_TO_ALL, per_dev)
        return received

    def all_gather(self, shards: Sequence[np.ndarray]) -> np.ndarray:
        """Concatenate per-rank shards along axis 0; every rank gets the result."""
        self._check_world("all_gather", shards)
        p = self.world_size
        first = shards[0]
        for r, s in enumerate(shards[1:], start=1):
            if s.shape[1:] != first.shape[1:] or s.dtype != first.dtype:
                raise ContractViolation(
                    f"all_gather shard {r} not concatenable: {s.shape} vs {first.shape}"
                )
        for src in range(p):
            self._post(0, src, shards[src])
        full = np.concatenate(self._drain(0), axis=0)
        for dst in range(p):
            self._post(dst, 0, full)
        outs = [self._drain(dst)[0] for dst in range(p)]
        per_dev = (p - 1) / p * full.nbytes
        self._charge(CollectiveKind.ALL_GATHER, [per_dev] * p)
        return outs[0]

    def broadcast(self, root: int, tensor: np.ndarray) -> List[np.ndarray]:
        """Root's tensor delivered to every rank (ring pipeline cost model)."""
        if not 0 <= root < self.world_size:
            raise ContractViolation(f"broadcast root {root} out of range")
        p = self.world_size
        for dst in range(p):
            self._post(dst, root, tensor)
        out = [self._drain(dst)[0] for dst in range(p)]
        per_dev = (p - 1) / p * tensor.nbytes
        self._charge(CollectiveKind.BROADCAST, [per_dev] * p)
        return out

    # -- ledger ----------------------------------------------------------

    def ledger(self) -> Dict[int, Dict[CollectiveKind, float]]:
        """Total bytes per device, broken down by collective kind."""
        out: Dict[int, Dict[CollectiveKind, float]] = {
            d: {} for d in range(self.world_size)
        }
        for rec in self.records:
            per = out[rec.device]
            per[rec.kind] = per.get(rec.kind, 0.0) + rec.bytes
        return out

    def device_bytes(self, device: int) -> float:
        return sum(r.bytes for r in self.records if r.device == device)

    def reset_ledger(self) -> None:
        self.records = []
        self._event_counter = 0

    def _check_world(self, op: str, seq) -> None:
        if len(seq) != self.world_size:
            raise ContractViolation(
                f"{op} needs one entry per rank ({self.world_size}), got {len(seq)}"
            )
