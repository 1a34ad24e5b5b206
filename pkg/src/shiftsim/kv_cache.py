"""Mode-invariant KV cache.

One :class:`KvCache` belongs to one sequence and holds a preallocated
block per device, laid out ``(layer, local_head, token, dim)``. Device d
always owns the same contiguous head range regardless of which parallel
mode produced the entries, which is what makes switching modes between
passes a zero-copy operation: nothing is ever re-laid-out, appends are
the only writes, and rollback just lowers the token counter.

Write discipline per engine pass: every (device, layer) pair appends the
same number of rows (staged at the shared cursor), reads during the pass
see the staged rows, and :meth:`commit` advances the committed count only
once all pairs have appended. A per-device write counter tracks appended
bytes so tests can prove that mode switches and rollbacks move nothing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .errors import CacheOverflow, ContractViolation

AXIS_ORDER = "layer,head,token,dim"


@dataclass(frozen=True)
class LayoutFingerprint:
    """Structural identity of a cache layout; equal iff layouts match."""

    world_size: int
    n_layers: int
    heads_per_device: int
    head_dim: int
    head_partition: Tuple[Tuple[int, int], ...]
    token_count: int
    axis_order: str
    precision: str


class KvCache:
    """Per-sequence KV storage, sharded by head across devices."""

    def __init__(
        self,
        n_layers: int,
        head_partition: Tuple[Tuple[int, int], ...],
        head_dim: int,
        capacity: int,
        dtype: np.dtype,
    ):
        if n_layers < 1 or head_dim < 1 or capacity < 1:
            raise ContractViolation("KvCache dims must be positive")
        sizes = {hi - lo for lo, hi in head_partition}
        if len(sizes) != 1 or min(sizes) < 1:
            raise ContractViolation("head partition must give every device the same head count")
        self.n_layers = n_layers
        self.head_partition = tuple((int(lo), int(hi)) for lo, hi in head_partition)
        self.world_size = len(head_partition)
        self.heads_per_device = sizes.pop()
        self.head_dim = head_dim
        self.capacity = capacity
        self.dtype = np.dtype(dtype)
        shape = (n_layers, self.heads_per_device, capacity, head_dim)
        self._k = [np.zeros(shape, dtype=self.dtype) for _ in range(self.world_size)]
        self._v = [np.zeros(shape, dtype=self.dtype) for _ in range(self.world_size)]
        self._count = 0
        # staged-write cursor per (device, layer); == _count outside a pass
        self._cursor = np.zeros((self.world_size, n_layers), dtype=np.int64)
        self._writes = [0] * self.world_size

    # -- properties ------------------------------------------------------

    @property
    def token_count(self) -> int:
        return self._count

    @property
    def write_counter(self) -> int:
        """Total bytes ever appended, across devices."""
        return sum(self._writes)

    def fingerprint(self) -> LayoutFingerprint:
        return LayoutFingerprint(
            world_size=self.world_size,
            n_layers=self.n_layers,
            heads_per_device=self.heads_per_device,
            head_dim=self.head_dim,
            head_partition=self.head_partition,
            token_count=self._count,
            axis_order=AXIS_ORDER,
            precision="f32" if self.dtype == np.dtype(np.float32) else "f64",
        )

    # -- writes ----------------------------------------------------------

    def append(self, device: int, layer: int, k_rows: np.ndarray, v_rows: np.ndarray) -> None:
        """Stage K/V rows for one (device, layer) at the next free slots.

        k_rows/v_rows: (m, heads_per_device, head_dim), in token order.
        """
        if not 0 <= device < self.world_size or not 0 <= layer < self.n_layers:
            raise ContractViolation(f"append target ({device}, {layer}) out of range")
        if k_rows.shape != v_rows.shape:
            raise ContractViolation("append k/v shapes differ")
        m = k_rows.shape[0]
        expect = (m, self.heads_per_device, self.head_dim)
        if k_rows.shape != expect:
            raise ContractViolation(f"append rows shaped {k_rows.shape}, want {expect}")
        if k_rows.dtype != self.dtype:
            raise ContractViolation(f"append dtype {k_rows.dtype} != cache {self.dtype}")
        cur = int(self._cursor[device, layer])
        if cur + m > self.capacity:
            raise CacheOverflow(
                f"cache overflow: {cur} + {m} > capacity {self.capacity}"
            )
        self._k[device][layer, :, cur:cur + m, :] = k_rows.transpose(1, 0, 2)
        self._v[device][layer, :, cur:cur + m, :] = v_rows.transpose(1, 0, 2)
        self._cursor[device, layer] = cur + m
        self._writes[device] += k_rows.nbytes + v_rows.nbytes

    def commit(self, m: int) -> None:
        """Advance the committed token count after a pass appended m rows everywhere."""
        target = self._count + m
        if not np.all(self._cursor == target):
            raise ContractViolation(
                "commit before every (device, layer) appended the full span"
            )
        if target > self.capacity:
            raise CacheOverflow(f"commit past capacity {self.capacity}")
        self._count = target

    def truncate(self, n: int) -> None:
        """Roll back to n committed tokens. Moves no bytes."""
        if not 0 <= n <= self._count:
            raise ContractViolation(f"truncate to {n} outside [0, {self._count}]")
        self._count = n
        self._cursor[:, :] = n

    # -- reads -----------------------------------------------------------

    def read_window(self, device: int, layer: int, local_head: int) -> Tuple[np.ndarray, np.ndarray]:
        """Zero-copy (K, V) views over committed plus staged rows."""
        if not 0 <= device < self.world_size or not 0 <= layer < self.n_layers:
            raise ContractViolation(f"read target ({device}, {layer}) out of range")
        if not 0 <= local_head < self.heads_per_device:
            raise ContractViolation(f"local head {local_head} out of range")
        cur = int(self._cursor[device, layer])
        return (
            self._k[device][layer, local_head, :cur, :],
            self._v[device][layer, local_head, :cur, :],
        )

    def device_blocks(self, device: int) -> Tuple[np.ndarray, np.ndarray]:
        """Committed (K, V) blocks of one device: (layer, head, token, dim)."""
        return (
            self._k[device][:, :, : self._count, :],
            self._v[device][:, :, : self._count, :],
        )

    def device_write_counter(self, device: int) -> int:
        return self._writes[device]
