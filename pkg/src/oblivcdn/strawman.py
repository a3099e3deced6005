"""Baseline planes where the trusted plane is itself the ORAM client.

Both baselines keep block contents inside the trusted plane and move whole
blocks over the intercontinental link on every access, which is the cost the
oblivcdn plane avoids.

* ``PathOramPlane``: one Path ORAM tree; every block access reads its path into
  the enclave stash, remaps the block and writes the same path back. A fetch
  ticket names one path per block, so the subscriber downloads L*Z blocks for
  each block it wants.
* ``RangeOramPlane``: the range ORAM client with one tree per range size and
  the stash held in the trusted plane. Range reads pull the whole path window,
  batch evictions read and rewrite the scheduled window. A fetch ticket names
  the window of each range.

Both reuse the edge's shadow epochs so subscriber downloads never race the
background writes.
"""

from __future__ import annotations

import copy
from typing import Generator

import numpy as np

from .addressing import bucket_on_path
from .control_plane import (
    DL_PATH_PER_BLOCK,
    DL_WINDOW,
    FetchTicket,
    PlaneBase,
    SystemConfig,
    TicketBlock,
    TicketRange,
    pad_blocks,
    window_position,
)
from .crypto import decrypt_block, encrypt_block
from .errors import CapacityError, ContractViolation, StashOverflowError, UnknownKey
from .meta_oram import DUMMY, BlockState, MetaMirror, VideoRecord, ranges_for
from .simnet import Network


class _VideoIndex:
    """Plain video directory for the baselines (their metadata is not the point of comparison)."""

    def __init__(self):
        self.records: dict[str, VideoRecord] = {}

    def get(self, vid: str) -> VideoRecord:
        if vid not in self.records:
            raise UnknownKey(f"unknown vid {vid!r}")
        return self.records[vid]


class PathOramPlane(PlaneBase):
    """Path ORAM client over the r=0 tree; the enclave stash holds plaintext."""

    R = 0

    def __init__(self, config: SystemConfig, net: Network, stash_limit: int = 512):
        super().__init__(config, net)
        geo = self.geometry
        self.videos = _VideoIndex()
        self.stash_limit = stash_limit
        self.pos: dict[int, int] = {}
        self.counter: dict[int, int] = {}
        self.loc: dict[int, tuple[int, int, int]] = {}  # bid -> (level, bucket, offset)
        self.stash: dict[int, bytes] = {}
        self.slot_bid = [np.full((1 << (e - 1), geo.bucket_size), DUMMY, dtype=np.int64) for e in range(1, geo.levels + 1)]
        self.peak_stash = 0
        self.accesses = 0

    def _snapshot(self):
        return copy.deepcopy(
            (self.videos.records, self.pos, self.counter, self.loc, self.stash, self.slot_bid,
             self.next_bid, self.plain_sizes)
        )

    def _restore(self, snap) -> None:
        (self.videos.records, self.pos, self.counter, self.loc, self.stash, self.slot_bid,
         self.next_bid, self.plain_sizes) = copy.deepcopy(snap)

    def _access(self, bid: int, data: bytes | None = None) -> Generator:
        geo = self.geometry
        Z = geo.bucket_size
        label = self.pos[bid]
        edge = self.edges[self.R]
        path = yield from edge.read_paths(self.R, label, 1)
        for e in range(1, geo.levels + 1):
            b = bucket_on_path(label, e)
            row = self.slot_bid[e - 1][b]
            for o in range(Z):
                held = int(row[o])
                if held >= 0:
                    ct = path[(e - 1) * Z + o].tobytes()
                    self.stash[held] = decrypt_block(self.keys.key(held), self.counter[held], ct)
                    del self.loc[held]
                    row[o] = DUMMY
        if data is not None:
            self.stash[bid] = data
        self.pos[bid] = self.rng.below(geo.leaves)
        self.peak_stash = max(self.peak_stash, len(self.stash))
        self.accesses += 1
        out = self._evict_path(label)
        yield from edge.write_paths(self.R, label, 1, out)

    def _evict_path(self, label: int) -> np.ndarray:
        """Greedy deepest-first refill of one path from the enclave stash."""
        geo = self.geometry
        Z, B = geo.bucket_size, geo.block_size
        out = np.empty((geo.levels * Z, B), dtype=np.uint8)
        for e in range(geo.levels, 0, -1):
            b = bucket_on_path(label, e)
            fits = [bid for bid in self.stash if bucket_on_path(self.pos[bid], e) == b][:Z]
            for o in range(Z):
                i = (e - 1) * Z + o
                if o < len(fits):
                    bid = fits[o]
                    self.counter[bid] += 1
                    ct = encrypt_block(self.keys.key(bid), self.counter[bid], self.stash.pop(bid))
                    out[i] = np.frombuffer(ct, dtype=np.uint8)
                    self.slot_bid[e - 1][b, o] = bid
                    self.loc[bid] = (e, b, o)
                else:
                    out[i] = np.frombuffer(self.rng.bytes(B), dtype=np.uint8)
        if len(self.stash) > self.stash_limit:
            raise StashOverflowError(self.R, len(self.stash), 0, len(self.stash), self.stash_limit)
        return out

    def do_upload(self, vid: str, data: bytes) -> Generator:
        if vid in self.plain_sizes:
            raise ContractViolation(f"video {vid!r} already uploaded")
        blocks = pad_blocks(data, self.geometry.block_size)
        if len(self.pos) + len(blocks) > self.config.tree_capacity:
            raise CapacityError(f"video needs {len(blocks)} blocks; {self.config.tree_capacity - len(self.pos)} left")

        def body():
            first = self.next_bid
            self.next_bid += len(blocks)
            for i, plain in enumerate(blocks):
                bid = first + i
                self.pos[bid] = self.rng.below(self.geometry.leaves)
                self.counter[bid] = 0
                yield from self._access(bid, plain)
            self.videos.records[vid] = VideoRecord(first, len(blocks), len(data))
            self.plain_sizes[vid] = len(data)

        yield from self._epoch([self.R], body)

    def prepare_fetch(self, vid: str):
        rec = self.videos.get(vid)
        Z = self.geometry.bucket_size
        bids = range(rec.first_bid, rec.first_bid + rec.blocks)
        blocks = []
        for bid in bids:
            key = self.keys.key(bid)
            c = self.counter[bid]
            if bid in self.stash:
                blocks.append(TicketBlock(c, self.pos[bid], 0, key, encrypt_block(key, c, self.stash[bid])))
            else:
                e, _, o = self.loc[bid]
                blocks.append(TicketBlock(c, self.pos[bid], (e - 1) * Z + o, key))
        ticket = FetchTicket(rec.nbytes, (TicketRange(self.R, self.edge_epoch[self.R], DL_PATH_PER_BLOCK, 0, tuple(blocks)),))

        def body():
            for bid in bids:
                yield from self._access(bid)

        return ticket, self._epoch([self.R], body)

    def do_sync(self) -> Generator:
        # every access already writes its path back
        return
        yield


class RangeOramPlane(PlaneBase):
    """Range ORAM client: trees per range size, stashes inside the trusted plane."""

    def __init__(self, config: SystemConfig, net: Network):
        super().__init__(config, net)
        geo = self.geometry
        self.videos = _VideoIndex()
        self.states: dict[int, BlockState] = {}
        self.mirrors = {r: MetaMirror(r, geo, config.stash_factor, config.tree_capacity) for r in config.rs}
        self.local = {r: np.zeros((config.stash_size(r), geo.block_size), dtype=np.uint8) for r in config.rs}

    def _snapshot(self):
        return (
            dict(self.videos.records),
            dict(self.states),
            {r: m.snapshot() for r, m in self.mirrors.items()},
            {r: a.copy() for r, a in self.local.items()},
            self.next_bid,
            dict(self.plain_sizes),
        )

    def _restore(self, snap) -> None:
        records, states, mirrors, local, self.next_bid, sizes = snap
        self.videos.records = dict(records)
        self.states = dict(states)
        for r, m in mirrors.items():
            self.mirrors[r].restore(m)
        self.local = {r: a.copy() for r, a in local.items()}
        self.plain_sizes = dict(sizes)

    def _decrypt_into(self, r: int, slot: int, bid: int, ct: np.ndarray) -> None:
        plain = decrypt_block(self.keys.key(bid), self.states[bid].counter, ct.tobytes())
        self.local[r][slot] = np.frombuffer(plain, dtype=np.uint8)

    def evict_pending(self, r: int) -> Generator:
        mirror = self.mirrors[r]
        geo = self.geometry
        S, B = self.config.stash_size(r), geo.block_size
        edge = self.edges[r]
        while mirror.needs_eviction():
            plan = mirror.batch_evict()
            window = yield from edge.read_paths(r, plan.start, plan.count)
            for i, mv in enumerate(plan.fetch):
                if mv.bid >= 0:
                    self._decrypt_into(r, mv.dest, mv.bid, window[i])
                    st = self.states[mv.bid]
                    self.states[mv.bid] = BlockState(st.counter, st.label, mv.dest)
            out = np.empty((len(plan.evict), B), dtype=np.uint8)
            for i, mv in enumerate(plan.evict):
                if mv.bid >= 0:
                    st = self.states[mv.bid]
                    c = st.counter + 1
                    ct = encrypt_block(self.keys.key(mv.bid), c, self.local[r][mv.source].tobytes())
                    out[i] = np.frombuffer(ct, dtype=np.uint8)
                    index = S + (mv.level - 1) * geo.bucket_size + mv.offset
                    self.states[mv.bid] = BlockState(c, st.label, index)
                else:
                    out[i] = np.frombuffer(self.rng.bytes(B), dtype=np.uint8)
            yield from edge.write_paths(r, plan.start, plan.count, out)

    def read_range(self, r: int, first_bid: int) -> Generator:
        geo = self.geometry
        S = self.config.stash_size(r)
        first = self.states[first_bid]
        plan = self.mirrors[r].read_range(first_bid, first.label, self.rng)
        k = len(plan.entries)
        window = yield from self.edges[r].read_paths(r, first.label, k)
        for entry in plan.entries:
            st = self.states[entry.bid]
            if entry.in_tree:
                pos = window_position(entry.old_label, entry.source, first.label, k, geo, S)
                self._decrypt_into(r, entry.dest, entry.bid, window[pos])
                self.states[entry.bid] = BlockState(st.counter, entry.new_label, entry.dest)
            else:
                self.states[entry.bid] = BlockState(st.counter, entry.new_label, st.index)
        yield from self.evict_pending(r)

    def do_upload(self, vid: str, data: bytes) -> Generator:
        if vid in self.plain_sizes:
            raise ContractViolation(f"video {vid!r} already uploaded")
        blocks = pad_blocks(data, self.geometry.block_size)
        ranges = ranges_for(self.next_bid, len(blocks), self.config.max_range)
        need: dict[int, int] = {}
        for rg in ranges:
            need[rg.r] = need.get(rg.r, 0) + rg.count
        for r, n in need.items():
            m = self.mirrors[r]
            if m.live + n > m.capacity:
                raise CapacityError(f"video needs {n} more blocks in tree r={r}; {m.capacity - m.live} left")
        rs = sorted({rg.r for rg in ranges})

        def body():
            first = self.next_bid
            self.next_bid += len(blocks)
            pos = 0
            for rg in ranges:
                for e in self.mirrors[rg.r].upload_assign(rg.bid, self.rng):
                    self.states[e.bid] = BlockState(0, e.label, e.slot)
                    self.local[rg.r][e.slot] = np.frombuffer(blocks[pos], dtype=np.uint8)
                    pos += 1
                yield from self.evict_pending(rg.r)
            self.videos.records[vid] = VideoRecord(first, len(blocks), len(data))
            self.plain_sizes[vid] = len(data)

        yield from self._epoch(rs, body)

    def prepare_fetch(self, vid: str):
        rec = self.videos.get(vid)
        ranges = ranges_for(rec.first_bid, rec.blocks, self.config.max_range)
        out = []
        for rg in ranges:
            S = self.config.stash_size(rg.r)
            blocks = []
            for bid in rg.bids():
                st = self.states[bid]
                key = self.keys.key(bid)
                if st.index < S:
                    inline = encrypt_block(key, st.counter, self.local[rg.r][st.index].tobytes())
                    blocks.append(TicketBlock(st.counter, st.label, 0, key, inline))
                else:
                    blocks.append(TicketBlock(st.counter, st.label, st.index - S, key))
            label = self.states[rg.bid].label
            out.append(TicketRange(rg.r, self.edge_epoch[rg.r], DL_WINDOW, label, tuple(blocks)))
        ticket = FetchTicket(rec.nbytes, tuple(out))
        rs = sorted({rg.r for rg in ranges})

        def body():
            for rg in ranges:
                yield from self.read_range(rg.r, rg.bid)

        return ticket, self._epoch(rs, body)

    def do_sync(self) -> Generator:
        rs = [r for r in self.config.rs if self.mirrors[r].needs_eviction()]
        if not rs:
            return

        def body():
            for r in rs:
                yield from self.evict_pending(r)

        yield from self._epoch(rs, body)
