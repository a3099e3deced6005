import struct

import numpy as np
import pytest

from oblivcdn.compute_service import PEER_TIMEOUT, ComputeService, decode_ack
from oblivcdn.control_plane import SystemConfig
from oblivcdn.deployment import build
from oblivcdn.errors import ConfigError, DuplicateBatch, FrameError, ProtocolError, RemoteError
from oblivcdn.routing import Proto, TokenBatch, make_batch_id
from oblivcdn.simnet import Frame, Msg, is_remote, run_local

CONFIG = SystemConfig(levels=5, bucket_size=4, block_size=32, max_range=2, stash_factor=24, seed=3)


@pytest.fixture()
def rig():
    """A deployment whose compute-service endpoints log every token batch they receive."""
    d = build(CONFIG)
    log: dict[str, list[bytes]] = {}
    for name in CONFIG.cs_names:
        inner = d.net.handlers[name]

        def spy(src, frame, inner=inner, name=name):
            if frame.mtype == Msg.CS_TOKENS:
                log.setdefault(name, []).append(frame.payload)
            return (yield from inner(src, frame))

        d.net.handlers[name] = spy
    d.upload("v", bytes(range(96)))
    d.fetch("v")
    return d, log


def _call(d, dst, mtype, payload, batch_id=0):
    return d.net.run(d.net.call("cp", dst, mtype, payload, batch_id=batch_id))


def _legs(log, proto, r=None):
    """The logged (leg 1, leg 2) batches of a protocol, oldest first."""
    one = [TokenBatch.from_bytes(p) for p in log[CONFIG.cs_names[0]]]
    two = [TokenBatch.from_bytes(p) for p in log[CONFIG.cs_names[1]]]
    pairs = [(a, b) for a, b in zip(one, two) if a.proto == proto and (r is None or a.r == r)]
    assert pairs, f"no logged batch for protocol {proto}"
    return pairs


def _fresh(batch, seq):
    batch.batch_id = make_batch_id(999, batch.r, batch.proto, seq)
    return batch


def test_every_batch_executes_once_on_each_party(rig):
    d, log = rig
    cs1, cs2 = d.services
    assert cs1.stats.batches == len(log[cs1.name]) == cs2.stats.batches
    assert cs1.stats.rejected == 0 and cs1.attested and cs2.attested
    assert set(cs1.stats.protocols) == set(Proto)


def test_replayed_batch_is_refused(rig):
    d, log = rig
    cs1 = d.services[0]
    before = d.store_for(0).ledger.bytes_written
    with pytest.raises(RemoteError) as info:
        _call(d, cs1.name, Msg.CS_TOKENS, log[cs1.name][0])
    assert is_remote(info.value, DuplicateBatch)
    assert cs1.stats.rejected == 1
    assert d.store_for(0).ledger.bytes_written == before


def test_leg_sent_to_wrong_party_is_refused(rig):
    d, log = rig
    with pytest.raises(RemoteError) as info:
        _call(d, CONFIG.cs_names[1], Msg.CS_TOKENS, log[CONFIG.cs_names[0]][0])
    assert is_remote(info.value, ProtocolError)
    assert d.services[1].stats.rejected == 0


def test_unknown_tree_is_refused(rig):
    d, log = rig
    b = TokenBatch.from_bytes(log[CONFIG.cs_names[0]][0])
    b.r = 7
    with pytest.raises(RemoteError) as info:
        _call(d, CONFIG.cs_names[0], Msg.CS_TOKENS, _fresh(b, 3).to_bytes())
    assert is_remote(info.value, ProtocolError)


def test_second_leg_without_stream_times_out_and_leaves_edge_untouched(rig):
    d, log = rig
    _, leg2 = _legs(log, Proto.PER_RE_FUNC, r=0)[0]
    store = d.store_for(0)
    stash = store.read_stash(0).copy()
    writes = store.ledger.bytes_written
    t0 = d.net.now
    with pytest.raises(RemoteError) as info:
        _call(d, CONFIG.cs_names[1], Msg.CS_TOKENS, _fresh(leg2, 1).to_bytes())
    assert is_remote(info.value, ProtocolError) and "timed out" in info.value.message
    assert d.net.now - t0 >= PEER_TIMEOUT
    assert np.array_equal(store.read_stash(0), stash)
    assert store.ledger.bytes_written == writes and store.pending_batches() == 0


def test_short_stream_is_rejected_before_any_write(rig):
    d, log = rig
    _, leg2 = _legs(log, Proto.PER_RE_FUNC, r=0)[0]
    leg2 = _fresh(leg2, 2)
    store = d.store_for(0)
    stash = store.read_stash(0).copy()
    short = np.zeros((leg2.count - 1, CONFIG.block_size), dtype=np.uint8)
    stream = struct.pack("<I", short.shape[0]) + short.tobytes()
    net = d.net
    with pytest.raises(RemoteError) as info:
        net.run(net.parallel(
            net.call("cp", CONFIG.cs_names[1], Msg.CS_TOKENS, leg2.to_bytes(), batch_id=leg2.batch_id),
            net.call(CONFIG.cs_names[0], CONFIG.cs_names[1], Msg.CS_PEER_STREAM, stream, batch_id=leg2.batch_id),
        ))
    assert is_remote(info.value, ProtocolError) and "expected" in info.value.message
    assert np.array_equal(store.read_stash(0), stash)


def test_stream_framing_checks(rig):
    d, _ = rig
    c1, c2 = CONFIG.cs_names
    two = np.zeros((2, CONFIG.block_size), dtype=np.uint8).tobytes()
    with pytest.raises(RemoteError) as info:
        _call(d, c2, Msg.CS_PEER_STREAM, struct.pack("<I", 3) + two, batch_id=5)
    assert is_remote(info.value, ProtocolError)
    with pytest.raises(RemoteError) as info:
        _call(d, c2, Msg.CS_PEER_STREAM, b"\x01", batch_id=5)
    assert is_remote(info.value, FrameError)
    with pytest.raises(RemoteError) as info:
        _call(d, c1, Msg.CS_PEER_STREAM, struct.pack("<I", 2) + two, batch_id=5)
    assert is_remote(info.value, ProtocolError)
    _call(d, c2, Msg.CS_PEER_STREAM, struct.pack("<I", 2) + two, batch_id=6)
    with pytest.raises(RemoteError) as info:
        _call(d, c2, Msg.CS_PEER_STREAM, struct.pack("<I", 2) + two, batch_id=6)
    assert is_remote(info.value, DuplicateBatch)


def test_permutation_stream_carries_one_stash(rig):
    d, log = rig
    c1, c2 = CONFIG.cs_names
    for r in CONFIG.rs:
        leg1, leg2 = (_fresh(b, 10 + r) for b in _legs(log, Proto.PER_RE_FUNC, r=r)[0])
        mark = len(d.net.trace)
        acks = d.net.run(d.net.parallel(
            d.net.call("cp", c1, Msg.CS_TOKENS, leg1.to_bytes()),
            d.net.call("cp", c2, Msg.CS_TOKENS, leg2.to_bytes()),
        ))
        streams = [ev for ev in d.net.trace[mark:] if ev.mtype == Msg.CS_PEER_STREAM]
        S = CONFIG.stash_size(r)
        assert [(ev.src, ev.dst, ev.shape) for ev in streams] == [(c1, c2, ("stream", S))]
        assert streams[0].nbytes > S * CONFIG.block_size
        one, two = (decode_ack(a) for a in acks)
        assert (one.blocks_read, one.peer_blocks, two.blocks_written) == (S, S, S)


def test_batches_for_different_trees_run_concurrently(rig):
    d, log = rig
    c1, c2 = CONFIG.cs_names
    pairs = [tuple(_fresh(b, 20 + r) for b in _legs(log, Proto.PER_RE_FUNC, r=r)[0]) for r in CONFIG.rs]

    def run(group):
        t0 = d.net.now
        calls = []
        for leg1, leg2 in group:
            calls += [d.net.call("cp", c1, Msg.CS_TOKENS, leg1.to_bytes()), d.net.call("cp", c2, Msg.CS_TOKENS, leg2.to_bytes())]
        d.net.run(d.net.parallel(*calls))
        return d.net.now - t0

    alone = run([pairs[0]])
    pairs = [tuple(_fresh(b, 30 + b.r) for b in p) for p in pairs]
    together = run(pairs)
    assert together < len(pairs) * alone


def test_attestation_mismatch_is_a_config_error(rig):
    d, _ = rig
    cs = d.services[0]
    assert _call(d, cs.name, Msg.ATTEST, cs.digest(CONFIG.rs)) == cs.digest(CONFIG.rs)
    with pytest.raises(RemoteError) as info:
        _call(d, cs.name, Msg.ATTEST, cs.digest([0]))
    assert "does not match" in info.value.message
    with pytest.raises(ConfigError):
        run_local(cs.handle("cp", Frame(Msg.ATTEST, 0, b"\x00" * 32)))


def test_unknown_message_and_bad_party(rig):
    d, _ = rig
    with pytest.raises(RemoteError) as info:
        _call(d, CONFIG.cs_names[0], Msg.ES_STATS, b"")
    assert is_remote(info.value, FrameError)
    with pytest.raises(ValueError):
        ComputeService(3, "x", d.net, CONFIG.geometry, 24, {}, "y")
    with pytest.raises(FrameError):
        decode_ack(b"\x00")
