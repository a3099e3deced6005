"""Trusted-plane metadata for the range-ORAM trees.

The control plane never touches block contents. It keeps, per tree E_r, a
mirror of which block id sits in every tree and stash slot (plus each block's
path label) and runs the range-ORAM bookkeeping there: range reads pick the blocks to
pull into the stash, batch evictions pack the stash back onto the scheduled
paths, and stash permutations relabel stash slots. Each of those returns a plan
that routing turns into DPF and permutation tokens.

Two oblivious maps sit above the mirrors: the video map (video -> block ranges)
and the block state map (block id -> counter, label, location).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .addressing import (
    TreeGeometry,
    assign_range,
    bucket_on_path,
    level_window,
    range_slots,
    tree_index,
    window_buckets,
)
from .crypto import Drbg
from .errors import CapacityError, ContractViolation, StashOverflowError, UnknownKey
from .oblivious import AccessTracer, ObliviousTable

DUMMY = -1
HELD = -2  # stash slot holding a dummy pulled in by a path fetch


def decompose_ranges(block_count: int, max_range: int) -> list[int]:
    """Greedy split of a video into power-of-two ranges, largest first.

    Returns the exponent r of each range; every range is at most ``max_range``
    blocks. 13 blocks with max_range 8 gives [3, 2, 0].
    """
    if block_count < 1:
        raise ContractViolation("a video needs at least one block")
    if max_range < 1 or max_range & (max_range - 1):
        raise ContractViolation("max range must be a power of two")
    top = max_range.bit_length() - 1
    out = []
    remaining = block_count
    while remaining:
        r = min(top, remaining.bit_length() - 1)
        out.append(r)
        remaining -= 1 << r
    return out


@dataclass(frozen=True)
class BlockState:
    counter: int
    label: int
    index: int


@dataclass(frozen=True)
class RangeDesc:
    bid: int
    r: int

    @property
    def count(self) -> int:
        return 1 << self.r

    def bids(self) -> range:
        return range(self.bid, self.bid + self.count)


@dataclass(frozen=True)
class VideoRecord:
    first_bid: int
    blocks: int
    nbytes: int


def _vid_key(vid: str) -> tuple[int, int]:
    d = hashlib.sha256(vid.encode()).digest()
    return int.from_bytes(d[:8], "little") >> 2, int.from_bytes(d[8:16], "little") >> 2


class VideoMap:
    """Oblivious vid -> (first block id, block count, byte length)."""

    def __init__(self, capacity: int, max_range: int, tracer: AccessTracer | None = None):
        self.max_range = max_range
        self.table = ObliviousTable(("check", "first_bid", "blocks", "nbytes"), capacity, tracer)

    def insert(self, vid: str, record: VideoRecord) -> None:
        key, check = _vid_key(vid)
        if self.table.contains(key):
            raise ContractViolation(f"video {vid!r} already uploaded")
        self.table.insert(key, (check, record.first_bid, record.blocks, record.nbytes))

    def get(self, vid: str) -> VideoRecord:
        key, check = _vid_key(vid)
        try:
            got_check, first, blocks, nbytes = self.table.get(key)
        except UnknownKey:
            raise UnknownKey(f"unknown vid {vid!r}") from None
        if got_check != check:
            raise UnknownKey(f"unknown vid {vid!r}")
        return VideoRecord(first, blocks, nbytes)

    def ranges(self, vid: str) -> list[RangeDesc]:
        rec = self.get(vid)
        return ranges_for(rec.first_bid, rec.blocks, self.max_range)

    def vids(self) -> int:
        return len(self.table)


def ranges_for(first_bid: int, blocks: int, max_range: int) -> list[RangeDesc]:
    out = []
    bid = first_bid
    for r in decompose_ranges(blocks, max_range):
        out.append(RangeDesc(bid, r))
        bid += 1 << r
    return out


class BlockStateMap:
    """Oblivious bid -> (counter, label, unified index)."""

    def __init__(self, capacity: int, tracer: AccessTracer | None = None):
        self.table = ObliviousTable(("counter", "label", "index"), capacity, tracer)

    def insert(self, bid: int, state: BlockState) -> None:
        self.table.insert(bid, (state.counter, state.label, state.index))

    def get(self, bid: int) -> BlockState:
        c, l, s = self.table.get(bid)
        return BlockState(c, l, s)

    def update(self, bid: int, state: BlockState) -> bool:
        return self.table.update(bid, (state.counter, state.label, state.index))

    def get_many(self, bids: list[int]) -> list[BlockState | None]:
        """States of several bids, None where absent; one oblivious pass per bid."""
        rows, found = self.table.get_many(bids)
        return [BlockState(int(c), int(l), int(s)) if f else None for (c, l, s), f in zip(rows.tolist(), found)]

    def update_many(self, bids: list[int], states: list[BlockState]) -> None:
        vals = np.array([(st.counter, st.label, st.index) for st in states], dtype=np.int64).reshape(-1, 3)
        self.table.update_many(bids, vals)


# ---------------------------------------------------------------------------
# plans


@dataclass(frozen=True)
class ReadEntry:
    """One block of a range read. ``source`` is its unified index before the
    read; ``dest`` the stash slot the routed copy lands in (a scratch slot
    when the block was already in the stash)."""

    bid: int
    old_label: int
    new_label: int
    source: int
    dest: int
    in_tree: bool


@dataclass(frozen=True)
class ReadRangePlan:
    r: int
    entries: tuple[ReadEntry, ...]


@dataclass(frozen=True)
class PermutePlan:
    r: int
    perm: np.ndarray  # perm[s] = new slot of whatever sits in slot s
    residents: tuple[tuple[int, int], ...]  # (old slot, bid)


@dataclass(frozen=True)
class FetchMove:
    """Path slot -> stash slot move of a batch eviction's fetch phase."""

    level: int
    bucket: int
    offset: int
    bid: int  # DUMMY for an unoccupied slot
    dest: int


@dataclass(frozen=True)
class EvictMove:
    """Stash slot -> path slot move of a batch eviction's write phase."""

    level: int
    bucket: int
    offset: int
    label: int  # a scheduled path through (level, bucket)
    bid: int  # DUMMY when the slot is refilled with fresh randomness
    source: int  # stash slot, or DUMMY


@dataclass(frozen=True)
class EvictPlan:
    r: int
    start: int
    count: int
    fetch: tuple[FetchMove, ...]
    evict: tuple[EvictMove, ...]


@dataclass(frozen=True)
class UploadEntry:
    bid: int
    label: int
    slot: int


# ---------------------------------------------------------------------------
# mirror


@dataclass
class MirrorStats:
    peak_stash: int = 0
    evictions: int = 0
    range_reads: int = 0


class MetaMirror:
    """Slot-level mirror of one tree E_r and its stash S_r."""

    def __init__(self, r: int, geometry: TreeGeometry, stash_factor: int, capacity: int):
        self.r = r
        self.geometry = geometry
        self.stash_size = stash_factor << r
        self.capacity = capacity
        L, Z = geometry.levels, geometry.bucket_size
        self.tree_bid = [np.full((1 << (e - 1), Z), DUMMY, dtype=np.int64) for e in range(1, L + 1)]
        self.tree_label = [np.zeros((1 << (e - 1), Z), dtype=np.int64) for e in range(1, L + 1)]
        self.stash_bid = np.full(self.stash_size, DUMMY, dtype=np.int64)
        self.stash_label = np.zeros(self.stash_size, dtype=np.int64)
        self.schedule = 0  # G_r: next path to evict
        self.pending = 0  # ranges read or written since their eviction
        self.live = 0
        self.stats = MirrorStats()

    @property
    def range_len(self) -> int:
        return 1 << self.r

    # -- helpers -------------------------------------------------------------

    def _free_slots(self) -> np.ndarray:
        return np.nonzero(self.stash_bid == DUMMY)[0]

    def stash_occupancy(self) -> int:
        return int((self.stash_bid >= 0).sum())

    def _need_free(self, needed: int) -> np.ndarray:
        free = self._free_slots()
        if free.size < needed:
            raise StashOverflowError(
                self.r, needed, int(free.size), self.stash_occupancy(), self.stash_size
            )
        return free

    def _track_peak(self) -> None:
        occ = self.stash_occupancy()
        if occ > self.stats.peak_stash:
            self.stats.peak_stash = occ

    def needs_eviction(self) -> bool:
        return self.pending >= 1

    # -- upload ----------------------------------------------------------------

    def upload_assign(self, first_bid: int, rng: Drbg) -> list[UploadEntry]:
        """Place a fresh range in random free stash slots with consecutive labels."""
        k = self.range_len
        if self.live + k > self.capacity:
            raise CapacityError(
                f"tree r={self.r} holds {self.live} of {self.capacity} blocks; "
                f"cannot add {k}"
            )
        free = self._need_free(k)
        start = rng.below(self.geometry.leaves)
        labels = assign_range(start, k, self.geometry.leaves)
        chosen = rng.sample([int(x) for x in free], k)
        out = []
        for i in range(k):
            bid = first_bid + i
            self.stash_bid[chosen[i]] = bid
            self.stash_label[chosen[i]] = labels[i]
            out.append(UploadEntry(bid, labels[i], chosen[i]))
        self.live += k
        self.pending += 1
        self._track_peak()
        return out

    # -- range read ------------------------------------------------------------

    def read_range(self, first_bid: int, label: int, rng: Drbg) -> ReadRangePlan:
        """Locate the 2**r blocks of a range, remap them to fresh consecutive
        paths and move the tree-resident ones into free stash slots."""
        k = self.range_len
        geo = self.geometry
        if not 0 <= label < geo.leaves:
            raise ContractViolation(f"label {label} outside [0, {geo.leaves})")
        bids = np.arange(first_bid, first_bid + k, dtype=np.int64)
        # scan the stash
        in_stash = {}
        hits = np.nonzero(np.isin(self.stash_bid, bids))[0]
        for slot in hits:
            in_stash[int(self.stash_bid[slot])] = int(slot)
        # scan the k paths
        in_tree = {}
        for e in range(1, geo.levels + 1):
            start, length = level_window(e, label, k)
            for b in window_buckets(start, length, 1 << (e - 1)):
                row = self.tree_bid[e - 1][b]
                for o in np.nonzero(np.isin(row, bids))[0]:
                    in_tree[int(row[o])] = (e, b, int(o))
        missing = [int(b) for b in bids if int(b) not in in_stash and int(b) not in in_tree]
        if missing:
            raise UnknownKey(f"blocks {missing} not on paths from {label} nor in stash r={self.r}")
        dests = self._need_free(k)[:k]
        new_start = rng.below(geo.leaves)
        new_labels = assign_range(new_start, k, geo.leaves)
        entries = []
        for i, bid in enumerate(int(b) for b in bids):
            old_label = (label + i) % geo.leaves
            dest = int(dests[i])
            if bid in in_tree:
                e, b, o = in_tree[bid]
                self.tree_bid[e - 1][b, o] = DUMMY
                self.stash_bid[dest] = bid
                self.stash_label[dest] = new_labels[i]
                source = tree_index(e, o, self.stash_size, geo.bucket_size)
                entries.append(ReadEntry(bid, old_label, new_labels[i], source, dest, True))
            else:
                slot = in_stash[bid]
                self.stash_label[slot] = new_labels[i]
                entries.append(ReadEntry(bid, old_label, new_labels[i], slot, dest, False))
        self.pending += 1
        self.stats.range_reads += 1
        self._track_peak()
        return ReadRangePlan(self.r, tuple(entries))

    # -- stash permutation -----------------------------------------------------

    def permute(self, rng: Drbg) -> PermutePlan:
        perm = rng.permutation(self.stash_size)
        residents = tuple(
            (int(s), int(self.stash_bid[s])) for s in np.nonzero(self.stash_bid >= 0)[0]
        )
        new_bid = np.full_like(self.stash_bid, DUMMY)
        new_label = np.zeros_like(self.stash_label)
        new_bid[perm] = self.stash_bid
        new_label[perm] = self.stash_label
        self.stash_bid, self.stash_label = new_bid, new_label
        return PermutePlan(self.r, perm, residents)

    # -- batch eviction --------------------------------------------------------

    def batch_evict(self) -> EvictPlan:
        """Pull every slot of the next 2**r scheduled paths into the stash, then
        pack the stash back onto those paths deepest level first."""
        geo = self.geometry
        k = self.range_len
        start = self.schedule % geo.leaves
        slots = list(range_slots(start, k, geo))
        free = self._need_free(len(slots))
        fetch = []
        for (e, b, o), dest in zip(slots, free[: len(slots)]):
            bid = int(self.tree_bid[e - 1][b, o])
            dest = int(dest)
            if bid >= 0:
                self.stash_bid[dest] = bid
                self.stash_label[dest] = self.tree_label[e - 1][b, o]
            else:
                self.stash_bid[dest] = HELD
            self.tree_bid[e - 1][b, o] = DUMMY
            fetch.append(FetchMove(e, b, o, bid, dest))
        self._track_peak()

        # greedy packing, deepest level first
        window_label = {}
        for e in range(1, geo.levels + 1):
            for t in range(k):
                window_label.setdefault((e, bucket_on_path((start + t) % geo.leaves, e)), (start + t) % geo.leaves)
        live_slots = [int(s) for s in np.nonzero(self.stash_bid >= 0)[0]]
        taken: set[int] = set()
        placed: dict[tuple[int, int, int], int] = {}
        for e in range(geo.levels, 0, -1):
            wstart, wlen = level_window(e, start, k)
            mask = (1 << (e - 1)) - 1
            buckets = window_buckets(wstart, wlen, 1 << (e - 1))
            wanted = set(buckets)
            by_bucket: dict[int, list[int]] = {b: [] for b in buckets}
            for s in live_slots:
                if s in taken:
                    continue
                b = int(self.stash_label[s]) & mask
                if b in wanted and len(by_bucket[b]) < geo.bucket_size:
                    by_bucket[b].append(s)
            for b in buckets:
                for o, s in enumerate(by_bucket[b]):
                    placed[(e, b, o)] = s
                    taken.add(s)
        evict = []
        for e, b, o in slots:
            label = window_label[(e, b)]
            s = placed.get((e, b, o))
            if s is None:
                evict.append(EvictMove(e, b, o, label, DUMMY, DUMMY))
                continue
            bid = int(self.stash_bid[s])
            evict.append(EvictMove(e, b, o, label, bid, s))
            self.tree_bid[e - 1][b, o] = bid
            self.tree_label[e - 1][b, o] = self.stash_label[s]
        for s in taken:
            self.stash_bid[s] = DUMMY
        self.stash_bid[self.stash_bid == HELD] = DUMMY
        self.schedule = (self.schedule + k) % geo.leaves
        self.pending = max(0, self.pending - 1)
        self.stats.evictions += 1
        return EvictPlan(self.r, start, k, tuple(fetch), tuple(evict))

    # -- audits ----------------------------------------------------------------

    def locate(self, bid: int) -> tuple[int, int]:
        """(label, unified index) of a live block by plain search; for audits."""
        hit = np.nonzero(self.stash_bid == bid)[0]
        if hit.size:
            return int(self.stash_label[hit[0]]), int(hit[0])
        for e in range(1, self.geometry.levels + 1):
            pos = np.argwhere(self.tree_bid[e - 1] == bid)
            if pos.size:
                b, o = int(pos[0][0]), int(pos[0][1])
                return int(self.tree_label[e - 1][b, o]), tree_index(
                    e, o, self.stash_size, self.geometry.bucket_size
                )
        raise UnknownKey(bid)

    def snapshot(self) -> dict:
        return {
            "tree_bid": [a.copy() for a in self.tree_bid],
            "tree_label": [a.copy() for a in self.tree_label],
            "stash_bid": self.stash_bid.copy(),
            "stash_label": self.stash_label.copy(),
            "schedule": self.schedule,
            "pending": self.pending,
            "live": self.live,
        }

    def restore(self, snap: dict) -> None:
        self.tree_bid = [a.copy() for a in snap["tree_bid"]]
        self.tree_label = [a.copy() for a in snap["tree_label"]]
        self.stash_bid = snap["stash_bid"].copy()
        self.stash_label = snap["stash_label"].copy()
        self.schedule = snap["schedule"]
        self.pending = snap["pending"]
        self.live = snap["live"]


def check_mirror_invariants(mirror: MetaMirror, states: BlockStateMap, bids: list[int]) -> None:
    """Every listed block is in exactly one place and agrees with its state row.

    Raises AssertionError on the first disagreement.
    """
    geo = mirror.geometry
    seen: dict[int, int] = {}
    for s in np.nonzero(mirror.stash_bid >= 0)[0]:
        seen[int(mirror.stash_bid[s])] = seen.get(int(mirror.stash_bid[s]), 0) + 1
    for e in range(1, geo.levels + 1):
        for bid in mirror.tree_bid[e - 1][mirror.tree_bid[e - 1] >= 0].ravel():
            seen[int(bid)] = seen.get(int(bid), 0) + 1
    for bid in bids:
        assert seen.get(bid, 0) == 1, f"block {bid} appears {seen.get(bid, 0)} times"
        label, index = mirror.locate(bid)
        st = states.get(bid)
        assert st.label == label, f"block {bid}: label {st.label} vs mirror {label}"
        assert st.index == index, f"block {bid}: index {st.index} vs mirror {index}"
        if index >= mirror.stash_size:
            level = (index - mirror.stash_size) // geo.bucket_size + 1
            b = bucket_on_path(label, level)
            off = (index - mirror.stash_size) % geo.bucket_size
            assert mirror.tree_bid[level - 1][b, off] == bid
    assert len(seen) == len(bids), f"mirror holds {len(seen)} blocks, expected {len(bids)}"
