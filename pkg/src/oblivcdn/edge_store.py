"""Untrusted edge storage for the trees E_r and stashes S_r.

The store holds ciphertext only. Trees use the level-contiguous layout, so a
window of consecutive path labels is at most two contiguous runs per level and
each run costs one seek. Every storage operation is entered in a seek ledger.

Background epochs work on a shadow copy of an r-instance while subscribers
keep reading the live copy; swapping publishes the shadow and bumps the epoch.
Reads against an old epoch fail with a retryable StaleEpochError.

Routed writes arrive as two XOR shares, one from each compute service; the
store buffers the first and applies both atomically once the second arrives.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Generator

import numpy as np

from .addressing import (
    config_digest,
    TreeGeometry,
    bucket_on_path,
    index_to_location,
    level_window,
    range_slot_count,
    window_extents,
    StashSlot,
)
from .errors import ConfigError, ContractViolation, FrameError, ProtocolError, StaleEpochError
from .simnet import Frame, Msg, Network, local

# ---------------------------------------------------------------------------
# storage


@dataclass
class SeekLedger:
    seeks: int = 0
    reads: int = 0
    writes: int = 0
    bytes_read: int = 0
    bytes_written: int = 0
    ops: list[tuple[str, int, int]] = field(default_factory=list)  # (op, r, seeks)

    def log(self, op: str, r: int, seeks: int, nbytes: int, write: bool) -> None:
        self.seeks += seeks
        if write:
            self.writes += 1
            self.bytes_written += nbytes
        else:
            self.reads += 1
            self.bytes_read += nbytes
        self.ops.append((op, r, seeks))


class TreeCopy:
    """One copy (live or shadow) of a tree and its stash."""

    def __init__(self, geometry: TreeGeometry, stash_size: int, rng: np.random.Generator | None):
        L, Z, B = geometry.levels, geometry.bucket_size, geometry.block_size
        if rng is None:
            self.levels = []
            self.stash = np.zeros((0, B), dtype=np.uint8)
            return
        self.levels = [
            rng.integers(0, 256, size=(1 << (e - 1), Z, B), dtype=np.uint8) for e in range(1, L + 1)
        ]
        self.stash = rng.integers(0, 256, size=(stash_size, B), dtype=np.uint8)

    def copy(self) -> "TreeCopy":
        out = TreeCopy.__new__(TreeCopy)
        out.levels = [a.copy() for a in self.levels]
        out.stash = self.stash.copy()
        return out


def _runs(slots: np.ndarray) -> int:
    """Number of contiguous runs in a set of slot indices."""
    if slots.size == 0:
        return 0
    s = np.unique(slots)
    return int(1 + (np.diff(s) != 1).sum())


class RInstance:
    def __init__(self, r: int, geometry: TreeGeometry, stash_size: int, rng: np.random.Generator):
        self.r = r
        self.geometry = geometry
        self.stash_size = stash_size
        self.live = TreeCopy(geometry, stash_size, rng)
        self.shadow: TreeCopy | None = None
        self.epoch = 0

    @property
    def work(self) -> TreeCopy:
        return self.shadow if self.shadow is not None else self.live


class EdgeStore:
    """All r-instances hosted by one edge server, plus the seek ledger."""

    def __init__(self, geometry: TreeGeometry, stash_sizes: dict[int, int], seed: int = 0):
        self.geometry = geometry
        rng = np.random.default_rng(seed)
        self.stash_sizes = dict(stash_sizes)
        self.instances = {r: RInstance(r, geometry, s, rng) for r, s in sorted(stash_sizes.items())}
        self.ledger = SeekLedger()
        self._pending: dict[tuple[int, int], dict[int, tuple]] = {}

    def inst(self, r: int) -> RInstance:
        if r not in self.instances:
            raise ContractViolation(f"edge does not host r={r}")
        return self.instances[r]

    def _copy(self, r: int, live: bool) -> TreeCopy:
        inst = self.inst(r)
        return inst.live if live else inst.work

    # -- tree extents ----------------------------------------------------------

    def read_extents(self, r: int, level: int, extents: list[tuple[int, int]], *, live: bool = False) -> np.ndarray:
        """Buckets of the given half-open intervals, concatenated, shape (n, Z, B)."""
        arr = self._copy(r, live).levels[level - 1]
        parts = []
        for start, end in extents:
            if not 0 <= start < end <= arr.shape[0]:
                raise ContractViolation(f"extent [{start}, {end}) outside level {level}")
            parts.append(arr[start:end])
        out = np.concatenate(parts) if parts else arr[:0]
        self.ledger.log("read_extents", r, len(extents), out.nbytes, False)
        return out

    def write_extents(self, r: int, level: int, extents: list[tuple[int, int]], buckets: np.ndarray) -> None:
        arr = self._copy(r, False).levels[level - 1]
        total = sum(end - start for start, end in extents)
        if buckets.shape != (total,) + arr.shape[1:]:
            raise ContractViolation(f"write of {buckets.shape} does not fit extents totalling {total}")
        pos = 0
        for start, end in extents:
            if not 0 <= start < end <= arr.shape[0]:
                raise ContractViolation(f"extent [{start}, {end}) outside level {level}")
            arr[start:end] = buckets[pos : pos + end - start]
            pos += end - start
        self.ledger.log("write_extents", r, len(extents), buckets.nbytes, True)

    def read_window(self, r: int, level: int, label: int, count: int, *, live: bool = False) -> np.ndarray:
        start, length = level_window(level, label, count)
        return self.read_extents(r, level, window_extents(start, length, 1 << (level - 1)), live=live)

    def write_window(self, r: int, level: int, label: int, count: int, buckets: np.ndarray) -> None:
        start, length = level_window(level, label, count)
        self.write_extents(r, level, window_extents(start, length, 1 << (level - 1)), buckets)

    def read_paths(self, r: int, label: int, count: int, *, live: bool = False) -> np.ndarray:
        """Every distinct slot of ``count`` paths in canonical order, (n, B)."""
        B = self.geometry.block_size
        parts = [
            self.read_window(r, e, label, count, live=live).reshape(-1, B)
            for e in range(1, self.geometry.levels + 1)
        ]
        return np.concatenate(parts)

    def write_paths(self, r: int, label: int, count: int, blocks: np.ndarray) -> None:
        geo = self.geometry
        expected = range_slot_count(count, geo)
        if blocks.shape != (expected, geo.block_size):
            raise ContractViolation(f"path write needs {expected} blocks, got {blocks.shape}")
        pos = 0
        for e in range(1, geo.levels + 1):
            n = min(count, 1 << (e - 1))
            chunk = blocks[pos : pos + n * geo.bucket_size].reshape(n, geo.bucket_size, geo.block_size)
            self.write_window(r, e, label, count, chunk)
            pos += n * geo.bucket_size

    def read_path_slots(self, r: int, label: int, count: int, offsets: np.ndarray) -> np.ndarray:
        """One slot per (path, level): ``offsets[i, e-1]`` in the bucket of path
        ``label + i`` at level e. Each level's window is read with its own
        seeks; only the selected slots are returned, shape (count, L, B)."""
        geo = self.geometry
        if offsets.shape != (count, geo.levels):
            raise ContractViolation("need one offset per path and level")
        if offsets.size and (offsets.min() < 0 or offsets.max() >= geo.bucket_size):
            raise ContractViolation("slot offset outside the bucket")
        out = np.empty((count, geo.levels, geo.block_size), dtype=np.uint8)
        for e in range(1, geo.levels + 1):
            window = self.read_window(r, e, label, count)
            width = 1 << (e - 1)
            start, _ = level_window(e, label, count)
            for i in range(count):
                pos = (((label + i) % width) - start) % width
                out[i, e - 1] = window[pos, offsets[i, e - 1]]
        return out

    # -- stash -----------------------------------------------------------------

    def read_stash(self, r: int, slots: np.ndarray | None = None, *, live: bool = False) -> np.ndarray:
        stash = self._copy(r, live).stash
        if slots is None:
            out = stash.copy()
            seeks = 1
        else:
            slots = np.asarray(slots, dtype=np.int64)
            if slots.size and (slots.min() < 0 or slots.max() >= stash.shape[0]):
                raise ContractViolation("stash slot out of range")
            out = stash[slots]
            seeks = _runs(slots)
        self.ledger.log("read_stash", r, seeks, out.nbytes, False)
        return out

    def write_stash(self, r: int, slots: np.ndarray | None, blocks: np.ndarray) -> None:
        stash = self._copy(r, False).stash
        if slots is None:
            if blocks.shape != stash.shape:
                raise ContractViolation("full stash write has the wrong shape")
            stash[:] = blocks
            seeks = 1
        else:
            slots = np.asarray(slots, dtype=np.int64)
            if blocks.shape != (slots.size, stash.shape[1]):
                raise ContractViolation("stash write shape mismatch")
            if slots.size and (slots.min() < 0 or slots.max() >= stash.shape[0]):
                raise ContractViolation("stash slot out of range")
            if np.unique(slots).size != slots.size:
                raise ContractViolation("duplicate stash slots in one write")
            stash[slots] = blocks
            seeks = _runs(slots)
        self.ledger.log("write_stash", r, seeks, blocks.nbytes, True)

    # -- shadow epochs -----------------------------------------------------------

    def begin_shadow(self, r: int) -> int:
        inst = self.inst(r)
        if inst.shadow is not None:
            raise ProtocolError(f"shadow for r={r} already active")
        inst.shadow = inst.live.copy()
        return inst.epoch

    def swap_shadow(self, r: int) -> int:
        inst = self.inst(r)
        if inst.shadow is None:
            raise ProtocolError(f"no shadow for r={r}")
        inst.live, inst.shadow = inst.shadow, None
        inst.epoch += 1
        return inst.epoch

    def discard_shadow(self, r: int) -> None:
        inst = self.inst(r)
        inst.shadow = None
        self._pending = {k: v for k, v in self._pending.items() if k[1] != r}

    def epoch(self, r: int) -> int:
        return self.inst(r).epoch

    # -- subscriber downloads ----------------------------------------------------

    def _check_epoch(self, r: int, epoch: int) -> None:
        if epoch != self.inst(r).epoch:
            raise StaleEpochError(f"epoch {epoch} of r={r} is no longer live (now {self.inst(r).epoch})")

    def download(self, r: int, epoch: int, locations: list[tuple[int, int]]) -> np.ndarray:
        """Blocks at (label, unified index) locations from the live copy."""
        self._check_epoch(r, epoch)
        inst = self.inst(r)
        geo = self.geometry
        out = np.empty((len(locations), geo.block_size), dtype=np.uint8)
        seeks = 0
        for i, (label, s) in enumerate(locations):
            loc = index_to_location(s, inst.stash_size, geo.bucket_size, geo.levels)
            if isinstance(loc, StashSlot):
                out[i] = inst.live.stash[loc.index]
            else:
                if not 0 <= label < geo.leaves:
                    raise ContractViolation(f"label {label} outside the tree")
                out[i] = inst.live.levels[loc.level - 1][bucket_on_path(label, loc.level), loc.offset]
            seeks += 1
        self.ledger.log("download", r, seeks, out.nbytes, False)
        return out

    def download_paths(self, r: int, epoch: int, label: int, count: int) -> np.ndarray:
        self._check_epoch(r, epoch)
        return self.read_paths(r, label, count, live=True)

    # -- share rendezvous ----------------------------------------------------------

    def combine(self, batch_id: int, r: int, party: int, target: tuple, shares: np.ndarray) -> bool:
        """Buffer one party's shares; apply the XOR once both have arrived.

        ``target`` is ("stash", slots) or ("paths", label, count). Returns True
        when this call completed the write.
        """
        if party not in (1, 2):
            raise ProtocolError(f"bad party {party}")
        key = (batch_id, r)
        slot = self._pending.setdefault(key, {})
        if party in slot:
            raise ProtocolError(f"party {party} already sent shares for batch {batch_id:#x}")
        slot[party] = (target, shares)
        if len(slot) < 2:
            return False
        (t1, s1), (t2, s2) = slot[1], slot[2]
        del self._pending[key]
        if not _same_target(t1, t2) or s1.shape != s2.shape:
            raise ProtocolError(f"share targets of batch {batch_id:#x} disagree")
        blocks = s1 ^ s2
        if t1[0] == "stash":
            self.write_stash(r, t1[1], blocks)
        else:
            self.write_paths(r, t1[1], t1[2], blocks)
        return True

    def pending_batches(self) -> int:
        return len(self._pending)


def _same_target(a: tuple, b: tuple) -> bool:
    if a[0] != b[0]:
        return False
    if a[0] == "stash":
        return np.array_equal(a[1], b[1])
    return a[1:] == b[1:]


# ---------------------------------------------------------------------------
# wire protocol


def _pack_arr(arr: np.ndarray, dtype: str) -> bytes:
    a = np.ascontiguousarray(arr, dtype=dtype)
    return struct.pack("<I", a.size) + a.tobytes()


def _unpack_arr(data: bytes, pos: int, dtype: str) -> tuple[np.ndarray, int]:
    if pos + 4 > len(data):
        raise FrameError("truncated array header")
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    width = np.dtype(dtype).itemsize
    if pos + n * width > len(data):
        raise FrameError("truncated array body")
    arr = np.frombuffer(data, dtype=dtype, count=n, offset=pos).copy()
    return arr, pos + n * width


def _blocks(data: bytes, pos: int, B: int) -> np.ndarray:
    body = data[pos:]
    if len(body) % B:
        raise FrameError("block payload is not a whole number of blocks")
    return np.frombuffer(body, dtype=np.uint8).reshape(-1, B).copy()


_STASH_ALL = 0xFFFFFFFF


class EdgeServer:
    """Network endpoint wrapping an EdgeStore."""

    def __init__(self, store: EdgeStore):
        self.store = store

    def handle(self, src: str, frame: Frame) -> Generator:
        return local(self._dispatch(frame))

    def _dispatch(self, frame: Frame) -> bytes:
        st = self.store
        if frame.mtype == Msg.ATTEST:
            mine = config_digest(st.geometry, st.stash_sizes)
            if frame.payload != mine:
                raise ConfigError("edge configuration does not match the control plane's")
            return mine
        B = st.geometry.block_size
        p = frame.payload
        t = frame.mtype
        if len(p) < 1:
            raise FrameError("empty edge request")
        r = p[0]
        if t == Msg.ES_READ_WINDOWS:
            label, count = struct.unpack_from("<II", p, 1)
            return st.read_paths(r, label, count).tobytes()
        if t == Msg.ES_WRITE_WINDOWS:
            label, count = struct.unpack_from("<II", p, 1)
            st.write_paths(r, label, count, _blocks(p, 9, B))
            return b""
        if t == Msg.ES_READ_SLOTS:
            label, count = struct.unpack_from("<II", p, 1)
            offs, _ = _unpack_arr(p, 9, "<u2")
            if offs.size != count * st.geometry.levels:
                raise FrameError("offset table size mismatch")
            return st.read_path_slots(r, label, count, offs.reshape(count, st.geometry.levels).astype(np.int64)).tobytes()
        if t == Msg.ES_READ_STASH:
            (n,) = struct.unpack_from("<I", p, 1)
            if n == _STASH_ALL:
                return st.read_stash(r).tobytes()
            slots, _ = _unpack_arr(p, 1, "<u4")
            return st.read_stash(r, slots.astype(np.int64)).tobytes()
        if t == Msg.ES_WRITE_STASH:
            (n,) = struct.unpack_from("<I", p, 1)
            if n == _STASH_ALL:
                st.write_stash(r, None, _blocks(p, 5, B).reshape(-1, B))
                return b""
            slots, pos = _unpack_arr(p, 1, "<u4")
            st.write_stash(r, slots.astype(np.int64), _blocks(p, pos, B))
            return b""
        if t == Msg.ES_COMBINE:
            party, kind = p[1], p[2]
            if kind == 0:
                slots, pos = _unpack_arr(p, 3, "<u4")
                target = ("stash", slots.astype(np.int64))
            elif kind == 1:
                label, count = struct.unpack_from("<II", p, 3)
                target = ("paths", label, count)
                pos = 11
            else:
                raise FrameError(f"bad combine target kind {kind}")
            done = st.combine(frame.batch_id, r, party, target, _blocks(p, pos, B))
            return bytes([1 if done else 0])
        if t == Msg.ES_BEGIN_SHADOW:
            return struct.pack("<I", st.begin_shadow(r))
        if t == Msg.ES_SWAP_SHADOW:
            return struct.pack("<I", st.swap_shadow(r))
        if t == Msg.ES_DISCARD_SHADOW:
            st.discard_shadow(r)
            return b""
        if t == Msg.ES_DOWNLOAD:
            (epoch,) = struct.unpack_from("<I", p, 1)
            locs, _ = _unpack_arr(p, 5, "<u4")
            pairs = [(int(locs[i]), int(locs[i + 1])) for i in range(0, locs.size, 2)]
            return st.download(r, epoch, pairs).tobytes()
        if t == Msg.ES_DOWNLOAD_PATHS:
            epoch, label, count = struct.unpack_from("<III", p, 1)
            return st.download_paths(r, epoch, label, count).tobytes()
        if t == Msg.ES_STATS:
            led = st.ledger
            return struct.pack("<QQQQQ", led.seeks, led.reads, led.writes, led.bytes_read, led.bytes_written)
        raise FrameError(f"edge does not handle message type {t:#x}")


class EdgeClient:
    """Generator stubs for talking to an edge server over the network.

    Every method returns a generator; use ``yield from`` inside a simulation
    process.
    """

    def __init__(self, net: Network, me: str, edge: str, geometry: TreeGeometry):
        self.net = net
        self.me = me
        self.edge = edge
        self.geometry = geometry

    def _call(self, mtype: Msg, payload: bytes, batch_id: int = 0, shape: tuple = ()) -> Generator:
        return self.net.call(self.me, self.edge, mtype, payload, batch_id=batch_id, shape=shape)

    def _as_blocks(self, data: bytes) -> np.ndarray:
        return np.frombuffer(data, dtype=np.uint8).reshape(-1, self.geometry.block_size).copy()

    def read_paths(self, r: int, label: int, count: int) -> Generator:
        data = yield from self._call(Msg.ES_READ_WINDOWS, struct.pack("<BII", r, label, count), shape=("paths", r, count))
        return self._as_blocks(data)

    def write_paths(self, r: int, label: int, count: int, blocks: np.ndarray) -> Generator:
        payload = struct.pack("<BII", r, label, count) + np.ascontiguousarray(blocks).tobytes()
        yield from self._call(Msg.ES_WRITE_WINDOWS, payload, shape=("paths", r, count))

    def read_path_slots(self, r: int, label: int, count: int, offsets: np.ndarray) -> Generator:
        payload = struct.pack("<BII", r, label, count) + _pack_arr(offsets.ravel(), "<u2")
        data = yield from self._call(Msg.ES_READ_SLOTS, payload, shape=("slots", r, count))
        return self._as_blocks(data).reshape(count, self.geometry.levels, self.geometry.block_size)

    def read_stash(self, r: int, slots: np.ndarray | None = None) -> Generator:
        if slots is None:
            payload = struct.pack("<BI", r, _STASH_ALL)
        else:
            payload = struct.pack("<B", r) + _pack_arr(slots, "<u4")
        data = yield from self._call(Msg.ES_READ_STASH, payload, shape=("stash", r))
        return self._as_blocks(data)

    def write_stash(self, r: int, slots: np.ndarray | None, blocks: np.ndarray) -> Generator:
        if slots is None:
            payload = struct.pack("<BI", r, _STASH_ALL)
        else:
            payload = struct.pack("<B", r) + _pack_arr(slots, "<u4")
        payload += np.ascontiguousarray(blocks).tobytes()
        yield from self._call(Msg.ES_WRITE_STASH, payload, shape=("stash", r))

    def combine_stash(self, batch_id: int, r: int, party: int, slots: np.ndarray, shares: np.ndarray) -> Generator:
        payload = struct.pack("<BBB", r, party, 0) + _pack_arr(slots, "<u4") + np.ascontiguousarray(shares).tobytes()
        data = yield from self._call(Msg.ES_COMBINE, payload, batch_id, shape=("combine", r))
        return data == b"\x01"

    def combine_paths(self, batch_id: int, r: int, party: int, label: int, count: int, shares: np.ndarray) -> Generator:
        payload = struct.pack("<BBBII", r, party, 1, label, count) + np.ascontiguousarray(shares).tobytes()
        data = yield from self._call(Msg.ES_COMBINE, payload, batch_id, shape=("combine", r))
        return data == b"\x01"

    def begin_shadow(self, r: int) -> Generator:
        data = yield from self._call(Msg.ES_BEGIN_SHADOW, bytes([r]))
        return struct.unpack("<I", data)[0]

    def swap_shadow(self, r: int) -> Generator:
        data = yield from self._call(Msg.ES_SWAP_SHADOW, bytes([r]))
        return struct.unpack("<I", data)[0]

    def discard_shadow(self, r: int) -> Generator:
        yield from self._call(Msg.ES_DISCARD_SHADOW, bytes([r]))

    def download(self, r: int, epoch: int, locations: list[tuple[int, int]]) -> Generator:
        flat = np.array([x for pair in locations for x in pair], dtype=np.int64)
        payload = struct.pack("<BI", r, epoch) + _pack_arr(flat, "<u4")
        data = yield from self._call(Msg.ES_DOWNLOAD, payload, shape=("download", r, len(locations)))
        return self._as_blocks(data)

    def download_paths(self, r: int, epoch: int, label: int, count: int) -> Generator:
        payload = struct.pack("<BIII", r, epoch, label, count)
        data = yield from self._call(Msg.ES_DOWNLOAD_PATHS, payload, shape=("download_paths", r, count))
        return self._as_blocks(data)


class LocalEdgeClient:
    """Same interface as EdgeClient, calling an EdgeStore in-process."""

    def __init__(self, store: EdgeStore):
        self.store = store
        self.geometry = store.geometry

    def read_paths(self, r, label, count):
        return local(self.store.read_paths(r, label, count))

    def write_paths(self, r, label, count, blocks):
        return local(self.store.write_paths(r, label, count, blocks))

    def read_path_slots(self, r, label, count, offsets):
        return local(self.store.read_path_slots(r, label, count, offsets))

    def read_stash(self, r, slots=None):
        return local(self.store.read_stash(r, slots))

    def write_stash(self, r, slots, blocks):
        return local(self.store.write_stash(r, slots, blocks))

    def combine_stash(self, batch_id, r, party, slots, shares):
        return local(self.store.combine(batch_id, r, party, ("stash", np.asarray(slots, dtype=np.int64)), shares))

    def combine_paths(self, batch_id, r, party, label, count, shares):
        return local(self.store.combine(batch_id, r, party, ("paths", label, count), shares))

    def begin_shadow(self, r):
        return local(self.store.begin_shadow(r))

    def swap_shadow(self, r):
        return local(self.store.swap_shadow(r))

    def discard_shadow(self, r):
        return local(self.store.discard_shadow(r))

    def download(self, r, epoch, locations):
        return local(self.store.download(r, epoch, locations))

    def download_paths(self, r, epoch, label, count):
        return local(self.store.download_paths(r, epoch, label, count))
