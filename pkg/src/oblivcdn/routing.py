"""Routing protocols that move ciphertext between edge slots.

Four protocols, each split into a generation step run by the trusted plane and
an execution step run by each compute service on its leg of the tokens:

* block range retrieval: DPF selection of one slot per level along each path of
  a range, XOR-combined of both parties' shares into a stash slot;
* stash permutation: the stash is re-encrypted and shuffled by two chained
  permutations, one per party, so neither learns the composition;
* path range retrieval: the same two-leg shuffle, from every slot of the
  scheduled eviction paths into free stash slots;
* private range eviction: DPF selection from the stash of each block placed on
  the scheduled paths.

Token batches serialise to a fixed header followed by fixed-width records,
so the size of a batch depends only on public parameters.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Generator, Protocol

import numpy as np

from .addressing import TreeGeometry, range_slot_count
from .crypto import (
    DpfKey,
    DpfKeyBatch,
    Drbg,
    KeyRing,
    domain_bits_for,
    dpf_eval_full_batch,
    dpf_eval_points_batch,
    dpf_gen_batch,
    share_mask,
)
from .errors import ContractViolation, FrameError, ProtocolError
from .meta_oram import DUMMY, BlockState, BlockStateMap, EvictPlan, PermutePlan, ReadRangePlan
from .simnet import local

TOKEN_VERSION = 1
HEADER = struct.Struct("<BBBBBIIQII")

# key used for padding lookups that must not hit any real block
ABSENT_BID = (1 << 62) + 1


class Proto(IntEnum):
    BLOCK_RANGE_RET = 1
    PER_RE_FUNC = 2
    PATH_RANGE_RET = 3
    PRI_RANGE_EVICT = 4


def make_batch_id(epoch: int, r: int, proto: int, seq: int) -> int:
    return ((epoch & 0xFFFFFF) << 40) | ((r & 0xFF) << 32) | ((proto & 0xFF) << 24) | (seq & 0xFFFFFF)


def split_batch_id(batch_id: int) -> tuple[int, int, int, int]:
    return batch_id >> 40, (batch_id >> 32) & 0xFF, (batch_id >> 24) & 0xFF, batch_id & 0xFFFFFF


def record_dtype(proto: int, block_size: int, key_size: int) -> np.dtype:
    if proto == Proto.BLOCK_RANGE_RET:
        fields = [("key", f"V{key_size}"), ("mask", "u1", (block_size,)), ("label", "<u4"), ("offset", "<u2"), ("dest", "<u4")]
    elif proto in (Proto.PER_RE_FUNC, Proto.PATH_RANGE_RET):
        fields = [("dest", "<u4"), ("mask", "u1", (block_size,))]
    elif proto == Proto.PRI_RANGE_EVICT:
        fields = [("key", f"V{key_size}"), ("mask", "u1", (block_size,)), ("label", "<u4"), ("index", "<u4")]
    else:
        raise FrameError(f"unknown protocol id {proto}")
    return np.dtype(fields)


@dataclass
class TokenBatch:
    """One party's leg of a routing protocol instance."""

    proto: int
    party: int
    r: int
    batch_id: int
    domain_bits: int
    block_size: int
    label: int  # first path label of the range or eviction window
    window: int  # number of consecutive paths
    records: np.ndarray

    @property
    def count(self) -> int:
        return int(self.records.shape[0])

    def to_bytes(self) -> bytes:
        head = HEADER.pack(
            TOKEN_VERSION, self.proto, self.party, self.r, self.domain_bits,
            self.count, self.block_size, self.batch_id, self.label, self.window,
        )
        return head + self.records.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "TokenBatch":
        if len(data) < HEADER.size:
            raise FrameError("truncated token batch header")
        version, proto, party, r, nbits, count, bsize, batch_id, label, window = HEADER.unpack_from(data, 0)
        if version != TOKEN_VERSION:
            raise FrameError(f"unsupported token version {version}")
        if party not in (1, 2):
            raise FrameError(f"bad party {party}")
        dtype = record_dtype(proto, bsize, DpfKey.encoded_size(nbits))
        if len(data) != HEADER.size + count * dtype.itemsize:
            raise FrameError("token batch length does not match its header")
        records = np.frombuffer(data, dtype=dtype, count=count, offset=HEADER.size).copy()
        return cls(proto, party, r, batch_id, nbits, bsize, label, window, records)

    def mask_bytes(self) -> int:
        return self.count * self.block_size

    def keys(self) -> list[DpfKey]:
        return [DpfKey.from_bytes(bytes(k)) for k in self.records["key"]]

    def key_batch(self) -> DpfKeyBatch:
        """All record keys parsed at once; the layout is checked row by row."""
        raw = np.frombuffer(self.records["key"].tobytes(), dtype=np.uint8)
        batch = DpfKeyBatch.from_bytes_array(raw.reshape(self.count, DpfKey.encoded_size(self.domain_bits)))
        if self.count and (batch.domain_bits != self.domain_bits or (batch.party != self.party).any()):
            raise FrameError("token keys do not match the batch header")
        return batch


def _new_records(proto: int, count: int, block_size: int, domain_bits: int) -> np.ndarray:
    return np.zeros(count, dtype=record_dtype(proto, block_size, DpfKey.encoded_size(domain_bits)))


# ---------------------------------------------------------------------------
# trusted-side generation


@dataclass
class RoutingContext:
    """What token generation needs from the trusted plane."""

    geometry: TreeGeometry
    states: BlockStateMap
    keys: KeyRing
    rng: Drbg
    stash_factor: int

    def stash_size(self, r: int) -> int:
        return self.stash_factor << r

    def lookup(self, bid: int) -> BlockState:
        return self.states.get(bid)

    def lookup_slots(self, bids: list[int]) -> list[BlockState | None]:
        """One state-map pass per slot; dummy slots (negative bid) look up a key
        that is never present, so every slot costs the same."""
        keys = [b if b >= 0 else ABSENT_BID for b in bids]
        found = self.states.get_many(keys)
        for b, st in zip(bids, found):
            if b >= 0 and st is None:
                raise ContractViolation(f"block {b} has no state")
        return found

    def update_slots(self, bids: list[int], states: list[BlockState | None]) -> None:
        keys = [b if b >= 0 else ABSENT_BID for b in bids]
        pad = BlockState(0, 0, 0)
        self.states.update_many(keys, [st if st is not None else pad for st in states])

    def shares(self, bid: int, counter: int) -> tuple[bytes, bytes]:
        return share_mask(self.keys.key(bid), counter, counter + 1, self.geometry.block_size, self.rng)

    def random_shares(self) -> tuple[bytes, bytes]:
        B = self.geometry.block_size
        return self.rng.bytes(B), self.rng.bytes(B)


def _fill_mask(records: np.ndarray, i: int, mask: bytes) -> None:
    records["mask"][i] = np.frombuffer(mask, dtype=np.uint8)


def _fill_keys(recs: list[np.ndarray], points: list[int], nbits: int, rng: Drbg) -> None:
    if not points:
        return
    for rec, batch in zip(recs, dpf_gen_batch(points, nbits, rng)):
        rec["key"] = batch.to_bytes_array().view(rec.dtype["key"]).reshape(-1)


def gen_block_range_ret(ctx: RoutingContext, plan: ReadRangePlan, batch_id: int) -> tuple[TokenBatch, TokenBatch]:
    """Tokens that copy each tree-resident block of a range into its stash slot.

    Blocks already in the stash get a token of the same shape whose DPF point
    lies in the stash region; every level evaluates to zero there, so the
    scratch destination only receives fresh randomness.
    """
    geo = ctx.geometry
    S = ctx.stash_size(plan.r)
    Z = geo.bucket_size
    nbits = domain_bits_for(S + geo.path_slots)
    count = len(plan.entries)
    recs = [_new_records(Proto.BLOCK_RANGE_RET, count, geo.block_size, nbits) for _ in range(2)]
    first_label = plan.entries[0].old_label
    bids = [e.bid for e in plan.entries]
    states = ctx.lookup_slots(bids)
    points, updated = [], []
    for i, (entry, st) in enumerate(zip(plan.entries, states)):
        if entry.in_tree:
            if st.index < S:
                raise ContractViolation(f"block {entry.bid} is not in the tree")
            point = st.index
            offset = (st.index - S) % Z
            m1, m2 = ctx.shares(entry.bid, st.counter)
            updated.append(BlockState(st.counter + 1, entry.new_label, entry.dest))
        else:
            point = ctx.rng.below(S)
            offset = ctx.rng.below(Z)
            m1, m2 = ctx.random_shares()
            updated.append(BlockState(st.counter, entry.new_label, st.index))
        points.append(point)
        for rec, mask in ((recs[0], m1), (recs[1], m2)):
            _fill_mask(rec, i, mask)
            rec["label"][i] = entry.old_label
            rec["offset"][i] = offset
            rec["dest"][i] = entry.dest
    ctx.update_slots(bids, updated)
    _fill_keys(recs, points, nbits, ctx.rng)
    return tuple(
        TokenBatch(Proto.BLOCK_RANGE_RET, p + 1, plan.r, batch_id, nbits, geo.block_size, first_label, count, recs[p])
        for p in range(2)
    )


def _two_leg(
    ctx: RoutingContext, dests: np.ndarray, masks: list[tuple[bytes, bytes]]
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Split the move ``source i -> dests[i]`` into two permutations.

    Leg one maps source i to intermediate w1[i]; leg two maps intermediate j to
    its final slot. Each leg carries its own mask share, indexed by the
    position that leg sees.
    """
    n = len(masks)
    w1 = ctx.rng.permutation(n)
    inv = np.empty(n, dtype=np.int64)
    inv[w1] = np.arange(n)
    B = ctx.geometry.block_size
    m1 = np.frombuffer(b"".join(m[0] for m in masks), dtype=np.uint8).reshape(n, B)
    m2 = np.frombuffer(b"".join(m[1] for m in masks), dtype=np.uint8).reshape(n, B)
    leg2_dest = np.asarray(dests, dtype=np.int64)[inv]
    leg2_mask = m2[inv]
    return w1, m1, leg2_dest, leg2_mask


def _reencrypt_moves(ctx: RoutingContext, bids: list[int], dests: list[int]) -> list[tuple[bytes, bytes]]:
    """Mask shares for moving slot i (holding bids[i], or a dummy) to dests[i];
    real blocks advance their counter and take the new index."""
    states = ctx.lookup_slots(bids)
    masks, updated = [], []
    for bid, st, dest in zip(bids, states, dests):
        if bid >= 0:
            masks.append(ctx.shares(bid, st.counter))
            updated.append(BlockState(st.counter + 1, st.label, int(dest)))
        else:
            masks.append(ctx.random_shares())
            updated.append(None)
    ctx.update_slots(bids, updated)
    return masks


def gen_per_re_func(ctx: RoutingContext, plan: PermutePlan, batch_id: int) -> tuple[TokenBatch, TokenBatch]:
    """Re-encrypt every stash slot and move slot s to ``plan.perm[s]``."""
    geo = ctx.geometry
    S = ctx.stash_size(plan.r)
    resident = dict(plan.residents)
    bids = [resident.get(s, DUMMY) for s in range(S)]
    masks = _reencrypt_moves(ctx, bids, [int(d) for d in plan.perm])
    w1, m1, d2, m2 = _two_leg(ctx, plan.perm, masks)
    out = []
    for party, dest, mask in ((1, w1, m1), (2, d2, m2)):
        rec = _new_records(Proto.PER_RE_FUNC, S, geo.block_size, 0)
        rec["dest"] = dest
        rec["mask"] = mask
        out.append(TokenBatch(Proto.PER_RE_FUNC, party, plan.r, batch_id, 0, geo.block_size, 0, 0, rec))
    return tuple(out)


def gen_path_range_ret(ctx: RoutingContext, plan: EvictPlan, batch_id: int) -> tuple[TokenBatch, TokenBatch]:
    """Shuffle every path slot of the eviction window into free stash slots."""
    geo = ctx.geometry
    dests = [mv.dest for mv in plan.fetch]
    masks = _reencrypt_moves(ctx, [mv.bid for mv in plan.fetch], dests)
    n = len(plan.fetch)
    w1, m1, d2, m2 = _two_leg(ctx, np.array(dests), masks)
    out = []
    for party, dest, mask in ((1, w1, m1), (2, d2, m2)):
        rec = _new_records(Proto.PATH_RANGE_RET, n, geo.block_size, 0)
        rec["dest"] = dest
        rec["mask"] = mask
        out.append(
            TokenBatch(Proto.PATH_RANGE_RET, party, plan.r, batch_id, 0, geo.block_size, plan.start, plan.count, rec)
        )
    return tuple(out)


def gen_pri_range_evict(ctx: RoutingContext, plan: EvictPlan, batch_id: int) -> tuple[TokenBatch, TokenBatch]:
    """DPF tokens selecting, for every path slot of the window, its new block."""
    geo = ctx.geometry
    S = ctx.stash_size(plan.r)
    nbits = domain_bits_for(S)
    n = len(plan.evict)
    recs = [_new_records(Proto.PRI_RANGE_EVICT, n, geo.block_size, nbits) for _ in range(2)]
    bids = [mv.bid for mv in plan.evict]
    indices = [S + (mv.level - 1) * geo.bucket_size + mv.offset for mv in plan.evict]
    masks = _reencrypt_moves(ctx, bids, indices)
    points = [mv.source if mv.bid >= 0 else 0 for mv in plan.evict]
    for i, (mv, (m1, m2)) in enumerate(zip(plan.evict, masks)):
        for rec, mask in ((recs[0], m1), (recs[1], m2)):
            _fill_mask(rec, i, mask)
            rec["label"][i] = mv.label
            rec["index"][i] = indices[i]
    _fill_keys(recs, points, nbits, ctx.rng)
    return tuple(
        TokenBatch(Proto.PRI_RANGE_EVICT, p + 1, plan.r, batch_id, nbits, geo.block_size, plan.start, plan.count, recs[p])
        for p in range(2)
    )


# ---------------------------------------------------------------------------
# untrusted-side execution: pure cores


def xor_select(bits: np.ndarray, blocks: np.ndarray) -> np.ndarray:
    """Row i of the result is the XOR of the blocks whose bit in row i is set.

    Blocks are taken eight at a time: the 256 XOR combinations of each group
    are tabulated once and every row picks its combination by one byte.
    """
    k, n = bits.shape
    if blocks.shape[0] != n:
        raise ContractViolation("selection width does not match block count")
    B = blocks.shape[1]
    pad = (-n) % 8
    if pad:
        bits = np.concatenate([bits, np.zeros((k, pad), dtype=bits.dtype)], axis=1)
        blocks = np.concatenate([blocks, np.zeros((pad, B), dtype=blocks.dtype)])
    wide = blocks.view(np.uint64) if B % 8 == 0 else blocks
    codes = np.packbits(bits.astype(np.uint8), axis=1, bitorder="little")
    out = np.zeros((k, wide.shape[1]), dtype=wide.dtype)
    table = np.zeros((256, wide.shape[1]), dtype=wide.dtype)
    for g in range(codes.shape[1]):
        group = wide[8 * g : 8 * g + 8]
        for j in range(8):
            np.bitwise_xor(table[: 1 << j], group[j], out=table[1 << j : 2 << j])
        out ^= table[codes[:, g]]
    return out.view(np.uint8).reshape(k, B)


def brr_shares(batch: TokenBatch, path_blocks: np.ndarray, geometry: TreeGeometry, stash_size: int) -> np.ndarray:
    """Share of each token: XOR over levels of (DPF bit at that level's slot) * block, plus mask.

    ``path_blocks[i, e-1]`` is the block at the token's offset on level e.
    """
    L, Z, B = geometry.levels, geometry.bucket_size, geometry.block_size
    k = batch.count
    if k == 0:
        return np.zeros((0, B), dtype=np.uint8)
    offsets = batch.records["offset"].astype(np.int64)
    pts = stash_size + np.arange(L)[None, :] * Z + offsets[:, None]
    bits = dpf_eval_points_batch(batch.key_batch(), pts)
    # bit -> 0x00 or 0xFF byte mask; AND then fold the levels with XOR
    sel = path_blocks & (np.uint8(0) - bits)[:, :, None]
    wide = sel.view(np.uint64) if B % 8 == 0 else sel
    acc = np.bitwise_xor.reduce(wide, axis=1).view(np.uint8).reshape(k, B)
    return acc ^ batch.records["mask"]


def perm_leg(batch: TokenBatch, blocks: np.ndarray, n_out: int) -> np.ndarray:
    """Mask each incoming block and place it at its record's destination."""
    if blocks.shape[0] != batch.count:
        raise ProtocolError(f"leg expects {batch.count} blocks, got {blocks.shape[0]}")
    dest = batch.records["dest"].astype(np.int64)
    if dest.size and (dest.min() < 0 or dest.max() >= n_out or np.unique(dest).size != dest.size):
        raise ProtocolError("permutation leg destinations are not distinct slots")
    out = np.empty((n_out, blocks.shape[1]), dtype=np.uint8)
    out[dest] = blocks ^ batch.records["mask"]
    return out


def pre_shares(batch: TokenBatch, stash: np.ndarray) -> np.ndarray:
    """Share of each eviction token: full-domain DPF selection over the stash, plus mask."""
    S = stash.shape[0]
    if batch.count == 0:
        return np.zeros((0, stash.shape[1]), dtype=np.uint8)
    bits = dpf_eval_full_batch(batch.key_batch())[:, :S]
    return xor_select(bits, stash) ^ batch.records["mask"]


# ---------------------------------------------------------------------------
# untrusted-side execution: I/O wrappers


class PeerChannel(Protocol):
    def send(self, batch_id: int, blocks: np.ndarray) -> Generator: ...

    def receive(self, batch_id: int, expected: int) -> Generator: ...


class LocalPeer:
    """In-memory CS1 -> CS2 stream for running both legs in one process."""

    def __init__(self):
        self.streams: dict[int, np.ndarray] = {}

    def send(self, batch_id, blocks):
        self.streams[batch_id] = blocks.copy()
        return local(None)

    def receive(self, batch_id, expected):
        if batch_id not in self.streams:
            raise ProtocolError(f"no peer stream for batch {batch_id:#x}")
        blocks = self.streams.pop(batch_id)
        if blocks.shape[0] != expected:
            raise ProtocolError(f"peer stream carried {blocks.shape[0]} blocks, expected {expected}")
        return local(blocks)


@dataclass
class ExecStats:
    blocks_read: int = 0
    blocks_written: int = 0
    peer_blocks: int = 0


def _check_leg(batch: TokenBatch, proto: int, party: int) -> None:
    if batch.proto != proto:
        raise ProtocolError(f"batch is protocol {batch.proto}, expected {proto}")
    if batch.party != party:
        raise ProtocolError(f"leg {batch.party} delivered to party {party}")


def exec_block_range_ret(party: int, batch: TokenBatch, edge, geometry: TreeGeometry, stash_size: int) -> Generator:
    _check_leg(batch, Proto.BLOCK_RANGE_RET, party)
    labels = batch.records["label"].astype(np.int64)
    expect = (batch.label + np.arange(batch.count)) % geometry.leaves
    if not np.array_equal(labels, expect):
        raise ProtocolError("range tokens must name consecutive paths")
    offsets = np.repeat(batch.records["offset"].astype(np.int64)[:, None], geometry.levels, axis=1)
    blocks = yield from edge.read_path_slots(batch.r, batch.label, batch.count, offsets)
    shares = brr_shares(batch, blocks, geometry, stash_size)
    dests = batch.records["dest"].astype(np.int64)
    yield from edge.combine_stash(batch.batch_id, batch.r, party, dests, shares)
    return ExecStats(blocks_read=batch.count * geometry.levels, blocks_written=batch.count)


def exec_per_re_func(party: int, batch: TokenBatch, edge, peer: PeerChannel, stash_size: int) -> Generator:
    _check_leg(batch, Proto.PER_RE_FUNC, party)
    if batch.count != stash_size:
        raise ProtocolError(f"stash permutation covers {batch.count} slots, stash has {stash_size}")
    if party == 1:
        stash = yield from edge.read_stash(batch.r)
        inter = perm_leg(batch, stash, stash_size)
        yield from peer.send(batch.batch_id, inter)
        return ExecStats(blocks_read=stash_size, peer_blocks=stash_size)
    inter = yield from peer.receive(batch.batch_id, stash_size)
    out = perm_leg(batch, inter, stash_size)
    yield from edge.write_stash(batch.r, None, out)
    return ExecStats(blocks_written=stash_size)


def exec_path_range_ret(party: int, batch: TokenBatch, edge, peer: PeerChannel, geometry: TreeGeometry, stash_size: int) -> Generator:
    _check_leg(batch, Proto.PATH_RANGE_RET, party)
    n = range_slot_count(batch.window, geometry)
    if batch.count != n:
        raise ProtocolError(f"path fetch of {batch.window} paths needs {n} records, got {batch.count}")
    if party == 1:
        blocks = yield from edge.read_paths(batch.r, batch.label, batch.window)
        inter = perm_leg(batch, blocks, n)
        yield from peer.send(batch.batch_id, inter)
        return ExecStats(blocks_read=n, peer_blocks=n)
    inter = yield from peer.receive(batch.batch_id, n)
    dest = batch.records["dest"].astype(np.int64)
    if dest.min() < 0 or dest.max() >= stash_size:
        raise ProtocolError("path fetch destination outside the stash")
    blocks = inter ^ batch.records["mask"]
    yield from edge.write_stash(batch.r, dest, blocks)
    return ExecStats(blocks_written=n)


def exec_pri_range_evict(party: int, batch: TokenBatch, edge, geometry: TreeGeometry, stash_size: int) -> Generator:
    _check_leg(batch, Proto.PRI_RANGE_EVICT, party)
    n = range_slot_count(batch.window, geometry)
    if batch.count != n:
        raise ProtocolError(f"eviction of {batch.window} paths needs {n} records, got {batch.count}")
    stash = yield from edge.read_stash(batch.r)
    shares = pre_shares(batch, stash)
    yield from edge.combine_paths(batch.batch_id, batch.r, party, batch.label, batch.window, shares)
    return ExecStats(blocks_read=stash_size, blocks_written=n)


def execute(party: int, batch: TokenBatch, edge, peer: PeerChannel, geometry: TreeGeometry, stash_size: int) -> Generator:
    """Dispatch a leg to its protocol's executor."""
    if batch.proto == Proto.BLOCK_RANGE_RET:
        return exec_block_range_ret(party, batch, edge, geometry, stash_size)
    if batch.proto == Proto.PER_RE_FUNC:
        return exec_per_re_func(party, batch, edge, peer, stash_size)
    if batch.proto == Proto.PATH_RANGE_RET:
        return exec_path_range_ret(party, batch, edge, peer, geometry, stash_size)
    if batch.proto == Proto.PRI_RANGE_EVICT:
        return exec_pri_range_evict(party, batch, edge, geometry, stash_size)
    raise ProtocolError(f"unknown protocol {batch.proto}")
