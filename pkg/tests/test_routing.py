import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from oblivcdn.addressing import TreeGeometry, bucket_on_path, range_slot_count, range_slots, tree_index
from oblivcdn.crypto import Drbg, KeyRing, decrypt_block, dpf_eval, encrypt_block
from oblivcdn.edge_store import EdgeStore, LocalEdgeClient
from oblivcdn.errors import FrameError, ProtocolError
from oblivcdn.meta_oram import (
    DUMMY,
    BlockState,
    BlockStateMap,
    EvictMove,
    EvictPlan,
    FetchMove,
    MetaMirror,
    PermutePlan,
    ReadEntry,
    ReadRangePlan,
)
from oblivcdn.routing import (
    LocalPeer,
    Proto,
    RoutingContext,
    TokenBatch,
    brr_shares,
    execute,
    gen_block_range_ret,
    gen_path_range_ret,
    gen_per_re_func,
    gen_pri_range_evict,
    make_batch_id,
    split_batch_id,
    xor_select,
)
from oblivcdn.simnet import run_local

B = 32


class Rig:
    """Trusted plane, one edge and both compute-service legs in one process,
    plus a plaintext oracle holding every block's bytes."""

    def __init__(self, L=5, v=40, rs=(0, 1, 2), seed=1):
        self.geo = TreeGeometry(L, 4, B)
        self.v = v
        self.rng = Drbg(seed)
        self.keys = KeyRing(bytes(16))
        self.states = BlockStateMap(512)
        self.mirrors = {r: MetaMirror(r, self.geo, v, self.geo.leaves) for r in rs}
        self.edge = EdgeStore(self.geo, {r: v << r for r in rs}, seed=seed)
        self.client = LocalEdgeClient(self.edge)
        self.ctx = RoutingContext(self.geo, self.states, self.keys, self.rng, v)
        self.plain: dict[int, bytes] = {}
        self.tree_of: dict[int, int] = {}
        self.seq = 0
        self.next_bid = 0

    def run(self, pair, r):
        self.seq += 1
        peer = LocalPeer()
        stats = []
        for party, batch in ((1, pair[0]), (2, pair[1])):
            wire = TokenBatch.from_bytes(batch.to_bytes())
            stats.append(run_local(execute(party, wire, self.client, peer, self.geo, self.v << r)))
        return stats

    def bid_id(self, r, proto):
        self.seq += 1
        return make_batch_id(0, r, proto, self.seq)

    def upload(self, r):
        first = self.next_bid
        for e in self.mirrors[r].upload_assign(first, self.rng):
            pt = self.rng.bytes(B)
            self.plain[e.bid], self.tree_of[e.bid] = pt, r
            self.states.insert(e.bid, BlockState(0, e.label, e.slot))
            ct = np.frombuffer(encrypt_block(self.keys.key(e.bid), 0, pt), dtype=np.uint8)[None]
            self.edge.write_stash(r, np.array([e.slot]), ct)
        self.next_bid += 1 << r
        return first

    def evict(self, r):
        m = self.mirrors[r]
        while m.needs_eviction():
            plan = m.batch_evict()
            self.run(gen_path_range_ret(self.ctx, plan, self.bid_id(r, Proto.PATH_RANGE_RET)), r)
            self.check()
            self.run(gen_pri_range_evict(self.ctx, plan, self.bid_id(r, Proto.PRI_RANGE_EVICT)), r)
            self.check()

    def read(self, first):
        r = self.tree_of[first]
        m = self.mirrors[r]
        plan = m.read_range(first, self.states.get(first).label, self.rng)
        self.run(gen_block_range_ret(self.ctx, plan, self.bid_id(r, Proto.BLOCK_RANGE_RET)), r)
        self.check()
        self.run(gen_per_re_func(self.ctx, m.permute(self.rng), self.bid_id(r, Proto.PER_RE_FUNC)), r)
        self.check()

    def decrypt(self, bid):
        st = self.states.get(bid)
        ct = self.edge.download(self.tree_of[bid], 0, [(st.label, st.index)])[0].tobytes()
        return decrypt_block(self.keys.key(bid), st.counter, ct)

    def check(self):
        for bid, pt in self.plain.items():
            assert self.decrypt(bid) == pt, bid
        assert self.edge.pending_batches() == 0


# -- walkthroughs on the 3-level tree (|S|=6, Z=4) --------------------------------


def _small(S=6):
    geo = TreeGeometry(3, 4, B)
    states = BlockStateMap(16)
    ctx = RoutingContext(geo, states, KeyRing(b"w" * 16), Drbg(42), S)
    edge = EdgeStore(geo, {0: S}, seed=5)
    return geo, states, ctx, edge


def test_brr_walkthrough_points_and_reencryption():
    geo, states, ctx, edge = _small()
    label, counter, pt = 2, 3, bytes(range(B))
    key = ctx.keys.key(0)
    states.insert(0, BlockState(counter, label, 11))
    blocks = edge.read_paths(0, label, 1)
    blocks[1 * 4 + 1] = np.frombuffer(encrypt_block(key, counter, pt), dtype=np.uint8)  # level 2, offset 1
    edge.write_paths(0, label, 1, blocks)
    plan = ReadRangePlan(0, (ReadEntry(0, label, 1, 11, 4, True),))
    k1, k2 = gen_block_range_ret(ctx, plan, make_batch_id(0, 0, Proto.BLOCK_RANGE_RET, 1))
    assert k1.count == k2.count == 1
    assert int(k1.records["offset"][0]) == 1
    key1, key2 = k1.keys()[0], k2.keys()[0]
    joint = [dpf_eval(key1, x) ^ dpf_eval(key2, x) for x in (7, 11, 15)]
    assert joint == [0, 1, 0]
    peer, client = LocalPeer(), LocalEdgeClient(edge)
    for party, b in ((1, k1), (2, k2)):
        run_local(execute(party, b, client, peer, geo, 6))
    assert states.get(0) == BlockState(counter + 1, 1, 4)
    assert decrypt_block(key, counter + 1, edge.read_stash(0, np.array([4]))[0].tobytes()) == pt


def test_brr_token_count_and_read_width():
    rig = Rig()
    first = rig.upload(2)
    rig.evict(2)
    plan = rig.mirrors[2].read_range(first, rig.states.get(first).label, rig.rng)
    pair = gen_block_range_ret(rig.ctx, plan, rig.bid_id(2, Proto.BLOCK_RANGE_RET))
    assert pair[0].count == pair[1].count == 4
    stats = rig.run(pair, 2)
    L = rig.geo.levels
    assert [s.blocks_read for s in stats] == [4 * L, 4 * L]
    assert [s.blocks_written for s in stats] == [4, 4]
    rig.check()


def test_brr_read_set_independent_of_target_level():
    # two blocks at the same offset but different levels of one path: identical CS reads
    ops = []
    for level in (1, 3):
        geo, states, ctx, edge = _small()
        states.insert(0, BlockState(0, 2, tree_index(level, 2, 6, 4)))
        plan = ReadRangePlan(0, (ReadEntry(0, 2, 0, tree_index(level, 2, 6, 4), 1, True),))
        k1, k2 = gen_block_range_ret(ctx, plan, 1)
        peer, client = LocalPeer(), LocalEdgeClient(edge)
        for party, b in ((1, k1), (2, k2)):
            run_local(execute(party, b, client, peer, geo, 6))
        ops.append(edge.ledger.ops)
        assert len(k1.to_bytes()) == len(k2.to_bytes())
    assert ops[0] == ops[1]


def test_brr_single_share_looks_uniform():
    counts = np.zeros(256)
    for trial in range(1000):
        geo, states, ctx, edge = _small()
        ctx.rng = Drbg(trial)
        states.insert(0, BlockState(0, 2, 11))
        plan = ReadRangePlan(0, (ReadEntry(0, 2, 1, 11, 4, True),))
        k1, _ = gen_block_range_ret(ctx, plan, 1)
        path = np.full((1, geo.levels, B), 0xAA, dtype=np.uint8)  # the same block every trial
        share = brr_shares(k1, path, geo, 6)
        counts += np.bincount(share.ravel(), minlength=256)
    assert chisquare(counts).pvalue > 1e-3


def test_per_re_func_permutes_and_reencrypts():
    rig = Rig(rs=(0,), v=8, L=4)
    firsts = [rig.upload(0) for _ in range(5)]
    m = rig.mirrors[0]
    m.pending = 0  # keep everything in the stash
    before = {b: rig.states.get(b) for b in firsts}
    plan = m.permute(rig.rng)
    pair = gen_per_re_func(rig.ctx, plan, rig.bid_id(0, Proto.PER_RE_FUNC))
    assert pair[0].count == 8
    leg1, leg2 = pair
    w1 = leg1.records["dest"].astype(int)
    # leg two maps intermediate position j to its final slot
    assert all(leg2.records["dest"][w1[s]] == plan.perm[s] for s in range(8))
    stats = rig.run(pair, 0)
    assert stats[0].peer_blocks == 8
    for b in firsts:
        after = rig.states.get(b)
        assert after.counter == before[b].counter + 1
        assert after.index == plan.perm[before[b].index]
    rig.check()


def test_per_re_func_single_slot_stash():
    geo = TreeGeometry(2, 1, B)
    states = BlockStateMap(4)
    ctx = RoutingContext(geo, states, KeyRing(b"s" * 16), Drbg(3), 1)
    edge = EdgeStore(geo, {0: 1}, seed=1)
    pt = b"x" * B
    states.insert(0, BlockState(0, 0, 0))
    edge.write_stash(0, np.array([0]), np.frombuffer(encrypt_block(ctx.keys.key(0), 0, pt), dtype=np.uint8)[None])
    plan = PermutePlan(0, np.array([0]), ((0, 0),))
    k1, k2 = gen_per_re_func(ctx, plan, 1)
    peer, client = LocalPeer(), LocalEdgeClient(edge)
    for party, b in ((1, k1), (2, k2)):
        run_local(execute(party, b, client, peer, geo, 1))
    assert decrypt_block(ctx.keys.key(0), 1, edge.read_stash(0)[0].tobytes()) == pt


def test_per_re_func_first_leg_independent_of_the_permutation():
    # with pi fixed to the identity, where slot 0 goes in leg one must still be uniform
    counts = np.zeros(8)
    geo = TreeGeometry(3, 4, 8)
    for trial in range(800):
        ctx = RoutingContext(geo, BlockStateMap(4), KeyRing(b"i" * 16), Drbg(trial), 8)
        k1, _ = gen_per_re_func(ctx, PermutePlan(0, np.arange(8), ()), 1)
        counts[int(k1.records["dest"][0])] += 1
    assert chisquare(counts).pvalue > 1e-3


def test_path_range_ret_walkthrough_tree_block_to_stash():
    S = 16
    geo, states, ctx, edge = _small(S)
    label, pt = 1, b"p" * B
    src = tree_index(2, 0, S, 4)
    states.insert(0, BlockState(2, label, src))
    blocks = edge.read_paths(0, label, 1)
    blocks[4] = np.frombuffer(encrypt_block(ctx.keys.key(0), 2, pt), dtype=np.uint8)
    edge.write_paths(0, label, 1, blocks)
    slots = list(range_slots(label, 1, geo))
    dests = list(range(3, 3 + len(slots)))
    fetch = tuple(FetchMove(e, b, o, 0 if (e, o) == (2, 0) else DUMMY, d) for (e, b, o), d in zip(slots, dests))
    plan = EvictPlan(0, label, 1, fetch, ())
    k1, k2 = gen_path_range_ret(ctx, plan, 1)
    assert k1.count == range_slot_count(1, geo) == geo.levels * geo.bucket_size
    peer, client = LocalPeer(), LocalEdgeClient(edge)
    for party, b in ((1, k1), (2, k2)):
        run_local(execute(party, b, client, peer, geo, S))
    st = states.get(0)
    assert st.index == dests[4] and st.counter == 3
    assert decrypt_block(ctx.keys.key(0), 3, edge.read_stash(0, np.array([st.index]))[0].tobytes()) == pt


def test_pri_range_evict_walkthrough_stash_block_to_slot_14():
    geo, states, ctx, edge = _small()
    label, s, pt = 3, 2, b"e" * B
    states.insert(0, BlockState(5, label, s))
    edge.write_stash(0, np.array([s]), np.frombuffer(encrypt_block(ctx.keys.key(0), 5, pt), dtype=np.uint8)[None])
    target = (3, bucket_on_path(label, 3), 0)  # unified index 14
    assert tree_index(3, 0, 6, 4) == 14
    moves = tuple(
        EvictMove(e, b, o, label, 0 if (e, b, o) == target else DUMMY, s if (e, b, o) == target else DUMMY)
        for e, b, o in range_slots(label, 1, geo)
    )
    k1, k2 = gen_pri_range_evict(ctx, EvictPlan(0, label, 1, (), moves), 1)
    peer, client = LocalPeer(), LocalEdgeClient(edge)
    for party, b in ((1, k1), (2, k2)):
        run_local(execute(party, b, client, peer, geo, 6))
    assert states.get(0) == BlockState(6, label, 14)
    got = edge.download(0, 0, [(label, 14)])[0].tobytes()
    assert decrypt_block(ctx.keys.key(0), 6, got) == pt


def test_all_dummy_eviction_refreshes_paths_and_keeps_blocks():
    rig = Rig(rs=(1,))
    first = rig.upload(1)
    m = rig.mirrors[1]
    m.pending = 0
    before = rig.edge.read_paths(1, 0, 2).copy()
    plan = m.batch_evict()
    # nothing live sits on the first window unless its labels land there; force an empty stash view
    rig.run(gen_path_range_ret(rig.ctx, plan, 1), 1)
    rig.run(gen_pri_range_evict(rig.ctx, plan, 2), 1)
    after = rig.edge.read_paths(1, 0, 2)
    assert not np.array_equal(before, after)
    rig.check()
    assert first in rig.plain


def test_joint_correctness_long_run():
    rig = Rig()
    firsts = []
    for i in range(9):
        r = i % 3
        firsts.append(rig.upload(r))
        rig.evict(r)
    for i in range(30):
        first = firsts[rig.rng.below(len(firsts))]
        rig.read(first)
        rig.evict(rig.tree_of[first])
    rig.check()


@settings(max_examples=15)
@given(st.lists(st.integers(0, 100), min_size=1, max_size=12), st.integers(0, 1000))
def test_joint_correctness_property(ops, seed):
    rig = Rig(L=4, v=32, rs=(0, 1), seed=seed)
    firsts = []
    for x in ops:
        if not firsts or x < 35:
            r = x % 2
            if rig.mirrors[r].live + (1 << r) > rig.mirrors[r].capacity:
                continue
            firsts.append(rig.upload(r))
            rig.evict(r)
        else:
            first = firsts[x % len(firsts)]
            rig.read(first)
            rig.evict(rig.tree_of[first])
    rig.check()


# -- cores and wire format --------------------------------------------------------------


@given(st.integers(1, 40), st.integers(1, 20), st.integers(1, 33), st.integers(0, 100))
def test_xor_select_matches_naive(k, n, Bsz, seed):
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2, size=(k, n), dtype=np.uint8)
    blocks = rng.integers(0, 256, size=(n, Bsz), dtype=np.uint8)
    expect = np.zeros((k, Bsz), dtype=np.uint8)
    for i in range(k):
        for j in range(n):
            if bits[i, j]:
                expect[i] ^= blocks[j]
    assert np.array_equal(xor_select(bits, blocks), expect)


def test_batch_id_round_trip():
    bid = make_batch_id(7, 3, Proto.PRI_RANGE_EVICT, 99)
    assert split_batch_id(bid) == (7, 3, int(Proto.PRI_RANGE_EVICT), 99)


def test_token_batch_wire_checks():
    rig = Rig(rs=(0,))
    rig.upload(0)
    plan = rig.mirrors[0].batch_evict()
    k1, k2 = gen_pri_range_evict(rig.ctx, plan, 5)
    raw = k1.to_bytes()
    again = TokenBatch.from_bytes(raw)
    assert again.count == k1.count and again.batch_id == 5
    assert k1.mask_bytes() == k1.count * B
    with pytest.raises(FrameError):
        TokenBatch.from_bytes(raw[:-1])
    with pytest.raises(FrameError):
        TokenBatch.from_bytes(b"\x09" + raw[1:])
    with pytest.raises(ProtocolError):
        run_local(execute(2, k1, rig.client, LocalPeer(), rig.geo, 40))


def test_second_leg_without_stream_fails():
    rig = Rig(rs=(0,), v=8, L=3)
    rig.upload(0)
    k1, k2 = gen_per_re_func(rig.ctx, rig.mirrors[0].permute(rig.rng), 9)
    with pytest.raises(ProtocolError):
        run_local(execute(2, k2, rig.client, LocalPeer(), rig.geo, 8))
