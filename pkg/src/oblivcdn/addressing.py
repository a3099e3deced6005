"""Slot addressing for the range-ORAM trees and their stashes.

Each tree E_r has L levels; level e (1-indexed, root at e = 1) holds 2**(e-1)
buckets of Z slots. Buckets of one level are stored contiguously. The bucket a
path label l touches at level e sits at position ``l mod 2**(e-1)`` within its
level, so the labels are the bit-reversal of the conventional left-to-right leaf
order and consecutive labels hit consecutive buckets on every level.

A block's location is a single integer s over the unified domain
``[0, |S_r| + L*Z)``: values below the stash size are stash slots, the rest
address (level, offset) within the path named by the block's label.
"""

from __future__ import annotations

import hashlib

from dataclasses import dataclass
from typing import Iterator, Union

from .errors import ContractViolation


@dataclass(frozen=True)
class TreeGeometry:
    """Shape shared by every tree: L levels, Z slots per bucket, B-byte blocks."""

    levels: int
    bucket_size: int
    block_size: int

    def __post_init__(self):
        if self.levels < 1:
            raise ContractViolation("a tree needs at least one level")
        if self.bucket_size < 1:
            raise ContractViolation("bucket size must be positive")
        if self.block_size < 1:
            raise ContractViolation("block size must be positive")

    @property
    def leaves(self) -> int:
        return 1 << (self.levels - 1)

    @property
    def total_buckets(self) -> int:
        return (1 << self.levels) - 1

    @property
    def path_slots(self) -> int:
        return self.levels * self.bucket_size

    def buckets_at(self, level: int) -> int:
        check_level(level, self.levels)
        return 1 << (level - 1)

    def level_offset(self, level: int) -> int:
        """Index of the first bucket of ``level`` in the level-contiguous layout."""
        check_level(level, self.levels)
        return (1 << (level - 1)) - 1


@dataclass(frozen=True)
class StashSlot:
    index: int


@dataclass(frozen=True)
class TreeSlot:
    level: int
    offset: int


Location = Union[StashSlot, TreeSlot]


def check_level(level: int, levels: int) -> None:
    if not 1 <= level <= levels:
        raise ContractViolation(f"level {level} outside [1, {levels}]")


def index_to_location(s: int, stash_size: int, bucket_size: int, levels: int) -> Location:
    """Decode a unified block index into a stash slot or a (level, offset) pair."""
    if s < 0 or s >= stash_size + levels * bucket_size:
        raise ContractViolation(
            f"index {s} outside [0, {stash_size + levels * bucket_size})"
        )
    if s < stash_size:
        return StashSlot(s)
    rel = s - stash_size
    return TreeSlot(rel // bucket_size + 1, rel % bucket_size)


def location_to_index(loc: Location, stash_size: int, bucket_size: int, levels: int) -> int:
    if isinstance(loc, StashSlot):
        if not 0 <= loc.index < stash_size:
            raise ContractViolation(f"stash slot {loc.index} outside [0, {stash_size})")
        return loc.index
    check_level(loc.level, levels)
    if not 0 <= loc.offset < bucket_size:
        raise ContractViolation(f"offset {loc.offset} outside [0, {bucket_size})")
    return stash_size + (loc.level - 1) * bucket_size + loc.offset


def tree_index(level: int, offset: int, stash_size: int, bucket_size: int) -> int:
    return stash_size + (level - 1) * bucket_size + offset


def bucket_on_path(label: int, level: int) -> int:
    """Position within ``level`` of the bucket that path ``label`` passes through."""
    return label & ((1 << (level - 1)) - 1)


def bit_reversed_order(label: int, levels: int) -> int:
    """Reverse the L-1 bits of a leaf value.

    Maps a conventional left-to-right leaf position to the path label used by
    the layout above, and back (the map is an involution).
    """
    width = levels - 1
    if width < 0 or not 0 <= label < 1 << width:
        raise ContractViolation(f"leaf {label} outside [0, {1 << max(width, 0)})")
    out = 0
    for _ in range(width):
        out = (out << 1) | (label & 1)
        label >>= 1
    return out


def assign_range(start: int, count: int, leaves: int) -> list[int]:
    """Consecutive labels ``start, start+1, ...`` wrapping modulo the leaf count."""
    if not 0 <= start < leaves:
        raise ContractViolation(f"start label {start} outside [0, {leaves})")
    if count < 0:
        raise ContractViolation("negative range length")
    return [(start + i) % leaves for i in range(count)]


def level_window(level: int, label: int, count: int) -> tuple[int, int]:
    """Cyclic (start, length) of the buckets touched at ``level`` by ``count``
    consecutive paths beginning at ``label``."""
    width = 1 << (level - 1)
    return label % width, min(count, width)


def level_extents(level: int, label: int, count: int, levels: int) -> list[tuple[int, int]]:
    """Half-open physical bucket intervals at ``level`` covering ``count``
    consecutive paths from ``label``. At most two intervals (one on wrap)."""
    check_level(level, levels)
    if count < 1:
        raise ContractViolation("need at least one path")
    width = 1 << (level - 1)
    start, length = level_window(level, label, count)
    end = start + length
    if end <= width:
        return [(start, end)]
    return [(start, width), (0, end - width)]


def window_extents(start: int, length: int, width: int) -> list[tuple[int, int]]:
    """Physical intervals for an arbitrary cyclic window over ``width`` buckets."""
    if length < 0 or length > width or not 0 <= start < width:
        raise ContractViolation(f"window ({start}, {length}) invalid for width {width}")
    if length == 0:
        return []
    end = start + length
    if end <= width:
        return [(start, end)]
    return [(start, width), (0, end - width)]


def window_buckets(start: int, length: int, width: int) -> list[int]:
    return [(start + i) % width for i in range(length)]


def range_slots(label: int, count: int, geometry: TreeGeometry) -> Iterator[tuple[int, int, int]]:
    """Every distinct (level, bucket, offset) on ``count`` paths from ``label``.

    Canonical order: level ascending, buckets in cyclic window order, offsets
    ascending. Routing tokens and eviction plans all follow this order.
    """
    for level in range(1, geometry.levels + 1):
        width = 1 << (level - 1)
        start, length = level_window(level, label, count)
        for bucket in window_buckets(start, length, width):
            for offset in range(geometry.bucket_size):
                yield level, bucket, offset


def range_slot_count(count: int, geometry: TreeGeometry) -> int:
    """Number of distinct slots on ``count`` consecutive paths."""
    return geometry.bucket_size * sum(
        min(count, 1 << (e - 1)) for e in range(1, geometry.levels + 1)
    )


def config_digest(geometry: TreeGeometry, stash_sizes: dict[int, int]) -> bytes:
    """Digest both ends of a link compare at setup, standing in for attestation."""
    text = f"L={geometry.levels};Z={geometry.bucket_size};B={geometry.block_size};" + ";".join(
        f"S{r}={n}" for r, n in sorted(stash_sizes.items())
    )
    return hashlib.sha256(text.encode()).digest()
