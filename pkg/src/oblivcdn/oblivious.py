"""Oblivious lookup and update by full linear scan.

``oget`` and ``oupdate`` touch every slot exactly once, in order, and select
with arithmetic masks instead of branches, so the slot trace is a function of
the vector length only. The optional tracer records that trace so tests can
compare it byte for byte across key positions.

``ObliviousTable`` is the vectorised form used by the trusted plane's maps:
each operation reads (and for writes, rewrites) every row of every column.
"""

from __future__ import annotations

import struct
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import ContractViolation, UnknownKey

Value = Union[int, tuple]

_READ = 0
_WRITE = 1
_SCAN = 2


class AccessTracer:
    """Records (operation, slot) pairs in the order they happen."""

    def __init__(self):
        self.events: list[tuple[int, int]] = []

    def read(self, index: int) -> None:
        self.events.append((_READ, index))

    def write(self, index: int) -> None:
        self.events.append((_WRITE, index))

    def scan(self, table_id: int, rows: int) -> None:
        self.events.append((_SCAN, (table_id << 32) | rows))

    def to_bytes(self) -> bytes:
        return b"".join(struct.pack("<BQ", op, idx) for op, idx in self.events)

    def clear(self) -> None:
        self.events.clear()


def _is_zero(d: int) -> int:
    """1 if d == 0 else 0, without a data-dependent branch (d >= 0)."""
    return (((d | -d) >> 63) & 1) ^ 1


def _select(mask: int, a: Value, b: Value) -> Value:
    """a where mask is all ones, b where mask is zero (field-wise for tuples)."""
    if isinstance(a, tuple):
        return tuple((x & mask) | (y & ~mask) for x, y in zip(a, b))
    return (a & mask) | (b & ~mask)


def _zero_like(v: Value) -> Value:
    if isinstance(v, tuple):
        return tuple(0 for _ in v)
    return 0


def oget(vector: Sequence[tuple[int, Value]], key: int, tracer: AccessTracer | None = None) -> Value:
    """Value stored under ``key``; raises UnknownKey after the full scan if absent.

    Keys must be non-negative integers below 2**63. Values are ints or tuples of
    ints of a common shape.
    """
    if not vector:
        raise UnknownKey(key)
    if not 0 <= key < 1 << 63:
        raise ContractViolation("oblivious keys must be in [0, 2**63)")
    acc = _zero_like(vector[0][1])
    found = 0
    for i, (k, v) in enumerate(vector):
        if tracer is not None:
            tracer.read(i)
        eq = _is_zero(k ^ key)
        acc = _select(-eq, v, acc)
        found |= eq
    if not found:
        raise UnknownKey(key)
    return acc


def oupdate(
    vector: list[tuple[int, Value]], key: int, value: Value, tracer: AccessTracer | None = None
) -> bool:
    """Overwrite the value under ``key`` in place; every slot is rewritten.

    Returns whether the key was present. An absent key leaves the contents
    unchanged and produces the same trace.
    """
    if not 0 <= key < 1 << 63:
        raise ContractViolation("oblivious keys must be in [0, 2**63)")
    found = 0
    for i in range(len(vector)):
        k, v = vector[i]
        if tracer is not None:
            tracer.read(i)
        eq = _is_zero(k ^ key)
        vector[i] = (k, _select(-eq, value, v))
        if tracer is not None:
            tracer.write(i)
        found |= eq
    return bool(found)


class ObliviousTable:
    """Fixed-capacity table of integer rows keyed by a non-negative integer.

    Every get, update and insert is one full pass over all rows. Empty rows hold
    key -1.
    """

    _ids = 0

    def __init__(self, columns: Sequence[str], capacity: int, tracer: AccessTracer | None = None):
        if capacity < 1:
            raise ContractViolation("table capacity must be positive")
        self.columns = tuple(columns)
        self.capacity = capacity
        self.keys = np.full(capacity, -1, dtype=np.int64)
        self.data = np.zeros((capacity, len(self.columns)), dtype=np.int64)
        self.tracer = tracer
        ObliviousTable._ids += 1
        self._table_id = ObliviousTable._ids

    def _trace(self) -> None:
        if self.tracer is not None:
            self.tracer.scan(self._table_id, self.capacity)

    def __len__(self) -> int:
        return int((self.keys >= 0).sum())

    def get(self, key: int) -> tuple[int, ...]:
        self._trace()
        hit = self.keys == key
        row = (self.data * hit[:, None]).sum(axis=0)
        if not hit.any():
            raise UnknownKey(key)
        return tuple(int(x) for x in row)

    def contains(self, key: int) -> bool:
        self._trace()
        return bool((self.keys == key).any())

    def update(self, key: int, values: Sequence[int]) -> bool:
        self._trace()
        hit = self.keys == key
        new = np.asarray(values, dtype=np.int64)
        np.copyto(self.data, new[None, :], where=hit[:, None])
        return bool(hit.any())

    def get_many(self, keys: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """One full pass per key, done together: (rows, found) with absent rows zero."""
        ks = np.asarray(keys, dtype=np.int64)
        for _ in range(ks.size):
            self._trace()
        hit = ks[:, None] == self.keys[None, :]
        found = hit.any(axis=1)
        rows = self.data[hit.argmax(axis=1)] * found[:, None]
        return rows, found

    def update_many(self, keys: Sequence[int], values: np.ndarray) -> np.ndarray:
        """``update`` for several keys in one pass; present keys must be distinct."""
        ks = np.asarray(keys, dtype=np.int64)
        vals = np.asarray(values, dtype=np.int64).reshape(ks.size, len(self.columns))
        for _ in range(ks.size):
            self._trace()
        hit = ks[:, None] == self.keys[None, :]
        per_row = hit.sum(axis=0)
        if (per_row > 1).any():
            raise ContractViolation("update_many got the same key twice")
        np.copyto(self.data, vals[hit.argmax(axis=0)], where=(per_row > 0)[:, None])
        return hit.any(axis=1)

    def insert(self, key: int, values: Sequence[int]) -> None:
        """Place a new row in the first empty slot (chosen by mask arithmetic)."""
        if key < 0:
            raise ContractViolation("table keys must be non-negative")
        self._trace()
        if (self.keys == key).any():
            raise ContractViolation(f"duplicate key {key}")
        free = self.keys < 0
        first = free & (np.cumsum(free) == 1)
        if not first.any():
            raise ContractViolation("oblivious table is full")
        new = np.asarray(values, dtype=np.int64)
        np.copyto(self.keys, key, where=first)
        np.copyto(self.data, new[None, :], where=first[:, None])

    def rows(self) -> Iterable[tuple[int, tuple[int, ...]]]:
        """Plain iteration for audits and tests; not oblivious."""
        for i in np.nonzero(self.keys >= 0)[0]:
            yield int(self.keys[i]), tuple(int(x) for x in self.data[i])

    def snapshot(self) -> tuple[np.ndarray, np.ndarray]:
        return self.keys.copy(), self.data.copy()

    def restore(self, snap: tuple[np.ndarray, np.ndarray]) -> None:
        self.keys, self.data = snap[0].copy(), snap[1].copy()
