"""Compute service daemon: executes one party's leg of each routing protocol.

A service only ever sees its own leg. It refuses replayed batch ids, runs at
most one batch per (r, protocol) at a time, and in the two-leg shuffles the
second party waits for the first party's complete, length-checked stream
before it writes anything to the edge.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Generator

import numpy as np
import simpy

from .addressing import TreeGeometry, config_digest
from .edge_store import EdgeClient
from .errors import ConfigError, DuplicateBatch, FrameError, ProtocolError
from .routing import ExecStats, TokenBatch, execute
from .simnet import Frame, Msg, Network

ACK = struct.Struct("<QQQ")
PEER_TIMEOUT = 60.0  # virtual seconds a second leg waits for its stream


@dataclass
class ServiceStats:
    batches: int = 0
    rejected: int = 0
    blocks_read: int = 0
    blocks_written: int = 0
    peer_blocks: int = 0
    protocols: dict[int, int] = field(default_factory=dict)


class NetPeer:
    """CS1 -> CS2 block stream over the network, with a mailbox on the receiver."""

    def __init__(self, service: "ComputeService"):
        self.service = service

    def send(self, batch_id: int, blocks: np.ndarray) -> Generator:
        s = self.service
        payload = struct.pack("<I", blocks.shape[0]) + np.ascontiguousarray(blocks).tobytes()
        yield from s.net.call(s.name, s.peer, Msg.CS_PEER_STREAM, payload, batch_id=batch_id, shape=("stream", blocks.shape[0]))

    def receive(self, batch_id: int, expected: int) -> Generator:
        s = self.service
        ev = s._mailbox_event(batch_id)
        timeout = s.net.env.timeout(PEER_TIMEOUT)
        yield ev | timeout
        if not ev.triggered:
            s._mail.pop(batch_id, None)
            raise ProtocolError(f"peer stream for batch {batch_id:#x} timed out")
        blocks = s._mail.pop(batch_id).value
        if blocks.shape[0] != expected:
            raise ProtocolError(f"peer stream carried {blocks.shape[0]} blocks, expected {expected}")
        return blocks


class ComputeService:
    """Network endpoint for compute service ``party`` (1 or 2)."""

    def __init__(
        self,
        party: int,
        name: str,
        net: Network,
        geometry: TreeGeometry,
        stash_factor: int,
        edges: dict[int, str],
        peer: str,
    ):
        if party not in (1, 2):
            raise ValueError("party must be 1 or 2")
        self.party = party
        self.name = name
        self.net = net
        self.geometry = geometry
        self.stash_factor = stash_factor
        self.edges = {r: EdgeClient(net, name, e, geometry) for r, e in edges.items()}
        self.peer = peer
        self.stats = ServiceStats()
        self._seen: set[int] = set()
        self._locks: dict[tuple[int, int], simpy.Resource] = {}
        self._mail: dict[int, simpy.Event] = {}
        self.channel = NetPeer(self)
        self.attested = False

    def _mailbox_event(self, batch_id: int) -> simpy.Event:
        if batch_id not in self._mail:
            self._mail[batch_id] = self.net.env.event()
        return self._mail[batch_id]

    def digest(self, rs) -> bytes:
        return config_digest(self.geometry, {r: self.stash_factor << r for r in rs})

    def handle(self, src: str, frame: Frame) -> Generator:
        if frame.mtype == Msg.ATTEST:
            if frame.payload != self.digest(sorted(self.edges)):
                raise ConfigError(f"{self.name} configuration does not match the control plane's")
            self.attested = True
            return frame.payload
        if frame.mtype == Msg.CS_TOKENS:
            return (yield from self.handle_batch(frame.payload))
        if frame.mtype == Msg.CS_PEER_STREAM:
            return self._accept_stream(frame)
        raise FrameError(f"compute service does not handle message type {frame.mtype:#x}")

    def _accept_stream(self, frame: Frame) -> bytes:
        if self.party != 2:
            raise ProtocolError("only the second party accepts peer streams")
        p = frame.payload
        if len(p) < 4:
            raise FrameError("truncated peer stream")
        (n,) = struct.unpack_from("<I", p, 0)
        B = self.geometry.block_size
        if len(p) != 4 + n * B:
            raise ProtocolError(f"peer stream declared {n} blocks but carried {(len(p) - 4) / B:g}")
        blocks = np.frombuffer(p, dtype=np.uint8, offset=4).reshape(n, B).copy()
        ev = self._mailbox_event(frame.batch_id)
        if ev.triggered:
            raise DuplicateBatch(f"second stream for batch {frame.batch_id:#x}")
        ev.succeed(blocks)
        return b""

    def handle_batch(self, payload: bytes) -> Generator:
        batch = TokenBatch.from_bytes(payload)
        if batch.party != self.party:
            raise ProtocolError(f"leg {batch.party} sent to party {self.party}")
        if batch.batch_id in self._seen:
            self.stats.rejected += 1
            raise DuplicateBatch(f"batch {batch.batch_id:#x} already executed")
        if batch.r not in self.edges:
            raise ProtocolError(f"no edge configured for r={batch.r}")
        self._seen.add(batch.batch_id)
        lock = self._locks.setdefault((batch.r, batch.proto), simpy.Resource(self.net.env, capacity=1))
        with lock.request() as req:
            yield req
            result: ExecStats = yield from execute(
                self.party,
                batch,
                self.edges[batch.r],
                self.channel,
                self.geometry,
                self.stash_factor << batch.r,
            )
        st = self.stats
        st.batches += 1
        st.blocks_read += result.blocks_read
        st.blocks_written += result.blocks_written
        st.peer_blocks += result.peer_blocks
        st.protocols[batch.proto] = st.protocols.get(batch.proto, 0) + 1
        return ACK.pack(result.blocks_read, result.blocks_written, result.peer_blocks)


def decode_ack(data: bytes) -> ExecStats:
    if len(data) != ACK.size:
        raise FrameError("malformed batch acknowledgement")
    return ExecStats(*ACK.unpack(data))
