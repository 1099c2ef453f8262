"""Fixed-capacity FIFO queue of unit-norm negative embeddings.

Two instances are used during pre-training: one fed by deep projections,
one by shallow projections. Entries are stored detached; the queue never
participates in autograd.
"""

from __future__ import annotations

import logging

import torch

from .errors import CapacityError, ConfigError, NotReadyError

log = logging.getLogger(__name__)

_NORM_TOL = 1e-5


class MemoryBank:
    """Ring buffer of ``capacity`` rows of dimension ``dim``.

    ``enqueue`` overwrites the oldest rows once full; ``negatives``
    returns the live rows oldest-first. Rows whose norm is off unit by
    more than 1e-5 are renormalized on entry and counted in
    ``renormalized``.
    """

    def __init__(self, capacity: int, dim: int, dtype: torch.dtype = torch.float32):
        if capacity < 1:
            raise ConfigError(f"bank capacity must be >= 1, got {capacity}")
        if dim < 1:
            raise ConfigError(f"bank dim must be >= 1, got {dim}")
        self.capacity = capacity
        self.dim = dim
        self._entries = torch.zeros(capacity, dim, dtype=dtype)
        self._head = 0  # next slot to write
        self._filled = 0
        self.renormalized = 0

    def __len__(self) -> int:
        return self._filled

    @property
    def full(self) -> bool:
        return self._filled == self.capacity

    @property
    def entries(self) -> torch.Tensor:
        """Raw storage-order view of the live rows (no copy)."""
        return self._entries[: self._filled]

    def enqueue(self, batch: torch.Tensor) -> None:
        if batch.ndim != 2 or batch.shape[1] != self.dim:
            raise ConfigError(
                f"expected (N, {self.dim}) batch, got shape {tuple(batch.shape)}"
            )
        n = batch.shape[0]
        if n == 0:
            return
        if n > self.capacity:
            raise CapacityError(
                f"cannot enqueue {n} rows into a bank of capacity {self.capacity}"
            )
        batch = batch.detach().to(self._entries.dtype)
        norms = batch.norm(dim=1)
        off = (norms - 1.0).abs() > _NORM_TOL
        if bool(off.any()):
            count = int(off.sum())
            self.renormalized += count
            log.warning("renormalized %d off-unit rows on enqueue", count)
            batch = batch.clone()
            batch[off] = batch[off] / norms[off].clamp_min(1e-12).unsqueeze(1)
        first = min(n, self.capacity - self._head)
        self._entries[self._head : self._head + first] = batch[:first]
        if first < n:
            self._entries[: n - first] = batch[first:]
        self._head = (self._head + n) % self.capacity
        self._filled = min(self._filled + n, self.capacity)

    def negatives(self) -> torch.Tensor:
        """Snapshot of the live rows, oldest first. Detached copy."""
        if self._filled == 0:
            raise NotReadyError("memory bank is empty")
        if self._filled < self.capacity or self._head == 0:
            return self._entries[: self._filled].clone()
        return torch.cat(
            (self._entries[self._head :], self._entries[: self._head])
        ).clone()

    def state_dict(self) -> dict:
        return {
            "entries": self._entries.clone(),
            "head": self._head,
            "filled": self._filled,
            "renormalized": self.renormalized,
        }

    def load_state_dict(self, state: dict) -> None:
        entries = state["entries"]
        if tuple(entries.shape) != (self.capacity, self.dim):
            raise ConfigError(
                f"bank state shape {tuple(entries.shape)} does not match "
                f"({self.capacity}, {self.dim})"
            )
        self._entries.copy_(entries)
        self._head = int(state["head"])
        self._filled = int(state["filled"])
        self.renormalized = int(state["renormalized"])
