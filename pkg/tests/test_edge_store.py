import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oblivcdn.addressing import TreeGeometry, bucket_on_path, config_digest, range_slot_count, tree_index
from oblivcdn.edge_store import EdgeServer, EdgeStore
from oblivcdn.errors import ConfigError, ContractViolation, FrameError, ProtocolError, StaleEpochError
from oblivcdn.simnet import Frame, Msg, run_local


def _store(L=5, Z=4, B=16, stashes=None):
    return EdgeStore(TreeGeometry(L, Z, B), stashes or {0: 8, 1: 16, 2: 32}, seed=3)


def _blocks(n, B, fill):
    return np.full((n, B), fill, dtype=np.uint8)


def test_one_extent_costs_one_seek():
    st_ = EdgeStore(TreeGeometry(3, 4, 2048), {0: 4}, seed=0)
    out = st_.read_extents(0, 3, [(0, 3)])
    assert out.shape == (3, 4, 2048)
    assert out.reshape(-1, 2048).shape[0] == 12
    assert st_.ledger.seeks == 1 and st_.ledger.bytes_read == 24576


def test_two_extents_cost_two_seeks():
    s = _store()
    s.read_extents(0, 5, [(0, 2), (5, 7)])
    assert s.ledger.seeks == 2


def test_write_then_read_extent():
    s = _store()
    data = _blocks(3 * 4, 16, 7).reshape(3, 4, 16)
    s.write_extents(1, 4, [(2, 5)], data)
    assert s.ledger.bytes_written == 3 * 4 * 16
    assert np.array_equal(s.read_extents(1, 4, [(2, 5)]), data)
    with pytest.raises(ContractViolation):
        s.read_extents(1, 4, [(6, 9)])
    with pytest.raises(ContractViolation):
        s.write_extents(1, 4, [(2, 5)], data[:2])


@pytest.mark.parametrize("r", [0, 1, 2])
def test_full_range_read_and_evict_write_seek_bound(r):
    s = _store()
    L = s.geometry.levels
    for label in range(s.geometry.leaves):
        before = s.ledger.seeks
        blocks = s.read_paths(r, label, 1 << r)
        assert s.ledger.seeks - before <= 2 * L
        assert blocks.shape[0] == range_slot_count(1 << r, s.geometry)
        before = s.ledger.seeks
        s.write_paths(r, label, 1 << r, blocks)
        assert s.ledger.seeks - before <= 2 * L


def test_paths_round_trip_and_slot_reads():
    s = _store()
    geo = s.geometry
    count = 4
    n = range_slot_count(count, geo)
    data = np.arange(n * 16, dtype=np.uint32).astype(np.uint8).reshape(n, 16)
    s.write_paths(2, 14, count, data)
    assert np.array_equal(s.read_paths(2, 14, count), data)
    offsets = np.array([[i % 4] * geo.levels for i in range(count)])
    got = s.read_path_slots(2, 14, count, offsets)
    for i in range(count):
        for e in range(1, geo.levels + 1):
            bucket = bucket_on_path((14 + i) % geo.leaves, e)
            assert np.array_equal(got[i, e - 1], s.inst(2).live.levels[e - 1][bucket, i % 4])
    with pytest.raises(ContractViolation):
        s.write_paths(2, 14, count, data[:-1])
    with pytest.raises(ContractViolation):
        s.read_path_slots(2, 14, count, offsets + 4)


def test_stash_slots():
    s = _store()
    s.write_stash(0, np.array([0]), _blocks(1, 16, 9))
    assert np.array_equal(s.read_stash(0, np.array([0])), _blocks(1, 16, 9))
    assert s.read_stash(1).shape == (16, 16)
    before = s.ledger.seeks
    s.read_stash(1, np.array([1, 2, 3, 9]))
    assert s.ledger.seeks - before == 2
    with pytest.raises(ContractViolation):
        s.write_stash(0, np.array([1, 1]), _blocks(2, 16, 0))
    with pytest.raises(ContractViolation):
        s.read_stash(0, np.array([8]))
    with pytest.raises(ContractViolation):
        s.read_stash(5)


def test_download_resolves_unified_index():
    s = _store(stashes={0: 8})
    geo = s.geometry
    s.write_stash(0, np.array([5]), _blocks(1, 16, 1))
    label = 9
    blocks = s.read_paths(0, label, 1)
    blocks[1 * 4 + 2] = 2  # level 2, offset 2
    s.write_paths(0, label, 1, blocks)
    got = s.download(0, 0, [(0, 5), (label, tree_index(2, 2, 8, geo.bucket_size))])
    assert got[0].tolist() == [1] * 16 and got[1].tolist() == [2] * 16


def test_shadow_isolation_and_swap():
    s = _store()
    old = s.read_stash(0, live=True).copy()
    epoch = s.begin_shadow(0)
    s.write_stash(0, None, _blocks(8, 16, 0xAB))
    assert np.array_equal(s.read_stash(0, live=True), old)
    assert np.array_equal(s.download(0, epoch, [(0, 3)])[0], old[3])
    with pytest.raises(ProtocolError):
        s.begin_shadow(0)
    assert s.swap_shadow(0) == epoch + 1
    assert s.read_stash(0, live=True)[0].tolist() == [0xAB] * 16
    with pytest.raises(StaleEpochError):
        s.download(0, epoch, [(0, 3)])


def test_discard_shadow_keeps_live():
    s = _store()
    old = s.read_stash(0, live=True).copy()
    s.begin_shadow(0)
    s.write_stash(0, None, _blocks(8, 16, 1))
    s.discard_shadow(0)
    assert np.array_equal(s.read_stash(0), old)
    with pytest.raises(ProtocolError):
        s.swap_shadow(0)


def test_readers_during_epoch_see_frozen_tree():
    s = _store()
    frozen = s.read_paths(1, 3, 2, live=True).copy()
    epoch = s.begin_shadow(1)
    for fill in range(5):
        s.write_paths(1, 3, 2, _blocks(frozen.shape[0], 16, fill))
        assert np.array_equal(s.download_paths(1, epoch, 3, 2), frozen)
    s.swap_shadow(1)
    assert s.download_paths(1, epoch + 1, 3, 2)[0].tolist() == [4] * 16


def test_combine_applies_xor_once_both_arrive():
    s = _store()
    a, b = _blocks(2, 16, 0x0F), _blocks(2, 16, 0xF0)
    slots = np.array([1, 4])
    assert s.combine(77, 0, 1, ("stash", slots), a) is False
    assert s.pending_batches() == 1
    assert s.combine(77, 0, 2, ("stash", slots), b) is True
    assert s.read_stash(0, slots).tolist() == [[0xFF] * 16] * 2
    assert s.pending_batches() == 0


def test_combine_rejects_duplicates_and_mismatches():
    s = _store()
    s.combine(1, 0, 1, ("stash", np.array([1])), _blocks(1, 16, 0))
    with pytest.raises(ProtocolError):
        s.combine(1, 0, 1, ("stash", np.array([1])), _blocks(1, 16, 0))
    with pytest.raises(ProtocolError):
        s.combine(1, 0, 2, ("stash", np.array([2])), _blocks(1, 16, 0))
    with pytest.raises(ProtocolError):
        s.combine(2, 0, 3, ("stash", np.array([1])), _blocks(1, 16, 0))


@given(st.lists(st.tuples(st.booleans(), st.integers(0, 15), st.integers(0, 255)), max_size=30))
def test_readback_matches_plaintext_oracle(ops):
    s = _store(L=5, stashes={0: 8})
    geo = s.geometry
    oracle = {label: s.read_paths(0, label, 1).copy() for label in range(geo.leaves)}
    for write, label, fill in ops:
        if write:
            blocks = _blocks(geo.path_slots, 16, fill)
            s.write_paths(0, label, 1, blocks)
            # every path sharing a bucket sees the write
            for other in range(geo.leaves):
                for e in range(1, geo.levels + 1):
                    if bucket_on_path(other, e) == bucket_on_path(label, e):
                        oracle[other][(e - 1) * 4 : e * 4] = fill
        else:
            assert np.array_equal(s.read_paths(0, label, 1), oracle[label])


# -- server endpoint ---------------------------------------------------------------


def _call(server, mtype, payload, batch_id=0):
    return run_local(server.handle("cp", Frame(mtype, batch_id, payload)))


def test_server_attest_and_stats():
    s = _store()
    srv = EdgeServer(s)
    digest = config_digest(s.geometry, s.stash_sizes)
    assert _call(srv, Msg.ATTEST, digest) == digest
    with pytest.raises(ConfigError):
        _call(srv, Msg.ATTEST, b"x" * 32)
    assert struct.unpack("<QQQQQ", _call(srv, Msg.ES_STATS, b"\x00")) == (0, 0, 0, 0, 0)


def test_server_rejects_bad_frames():
    srv = EdgeServer(_store())
    with pytest.raises(FrameError):
        _call(srv, Msg.ES_READ_WINDOWS, b"")
    with pytest.raises(FrameError):
        _call(srv, Msg.ES_WRITE_STASH, b"\x00" + struct.pack("<I", 1) + struct.pack("<I", 0) + b"abc")
    with pytest.raises(FrameError):
        _call(srv, Msg.ATTEST + 0x70, b"\x00")


def test_server_window_round_trip():
    s = _store()
    srv = EdgeServer(s)
    n = range_slot_count(2, s.geometry)
    blocks = _blocks(n, 16, 0x33)
    _call(srv, Msg.ES_WRITE_WINDOWS, bytes([1]) + struct.pack("<II", 6, 2) + blocks.tobytes())
    got = _call(srv, Msg.ES_READ_WINDOWS, bytes([1]) + struct.pack("<II", 6, 2))
    assert got == blocks.tobytes()
