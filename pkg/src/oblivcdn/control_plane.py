"""Trusted control plane and subscriber client.

The control plane owns the video map, the block state map and the per-r
mirrors. Uploads place encrypted ranges in stash slots and evict; a fetch
answers the subscriber with a ticket (one intercontinental round trip), then
runs the background cycle: a range read, a stash permutation and the batch
evictions for every range, all on shadow copies that are published together
when the cycle ends.

Every background cycle is an epoch. If any step fails, the shadows are
discarded and the trusted state is rolled back to its snapshot, so the live
copies and the maps stay consistent.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Generator

import numpy as np
import simpy

from .addressing import TreeGeometry, range_slot_count
from .compute_service import decode_ack
from .crypto import Drbg, KeyRing, decrypt_block, encrypt_block, prf_mask
from .edge_store import EdgeClient
from .errors import (
    CapacityError,
    ConfigError,
    ContractViolation,
    EpochAborted,
    FrameError,
    OblivCdnError,
    RemoteError,
    StaleEpochError,
    StashOverflowError,
    UnknownKey,
)
from .meta_oram import (
    BlockState,
    BlockStateMap,
    MetaMirror,
    RangeDesc,
    VideoMap,
    VideoRecord,
    decompose_ranges,
    ranges_for,
)
from .oblivious import AccessTracer
from .routing import (
    Proto,
    RoutingContext,
    TokenBatch,
    gen_block_range_ret,
    gen_path_range_ret,
    gen_per_re_func,
    gen_pri_range_evict,
    make_batch_id,
)
from .simnet import Frame, Msg, Network, is_remote

MODES = ("oblivcdn", "strawman", "roram-strawman")


@dataclass(frozen=True)
class SystemConfig:
    """Deployment parameters shared by every mode."""

    levels: int = 11
    bucket_size: int = 4
    block_size: int = 2048
    max_range: int = 8
    stash_factor: int = 64
    seed: int = 0
    max_videos: int = 1024
    capacity_per_tree: int | None = None  # default: one block per leaf
    epoch_retries: int = 1
    ticket_retries: int = 2
    edge_layout: str = "single"  # or "per-r": one edge endpoint per tree
    local_rtt: float = 0.001
    remote_rtt: float = 0.400
    local_bandwidth: float | None = None
    remote_bandwidth: float | None = None
    cs_names: tuple[str, str] = ("cs1", "cs2")

    def __post_init__(self):
        if len(self.cs_names) != 2 or self.cs_names[0] == self.cs_names[1]:
            raise ConfigError("exactly two distinct compute service endpoints are required")
        if self.max_range < 1 or self.max_range & (self.max_range - 1):
            raise ConfigError("max_range must be a power of two")
        if self.max_range > 1 << (self.levels - 1):
            raise ConfigError("max_range cannot exceed the number of leaves")
        if self.stash_factor < 1:
            raise ConfigError("stash_factor must be positive")
        if self.edge_layout not in ("single", "per-r"):
            raise ConfigError(f"unknown edge layout {self.edge_layout!r}")
        if self.max_range >= 1 << 8:
            raise ConfigError("max_range above 128 is not supported by the wire format")
        for r in self.rs:
            # a batch eviction pulls a whole window into the stash next to a range read's blocks
            need = range_slot_count(1 << r, self.geometry) + (1 << r)
            if self.stash_size(r) <= need:
                raise ConfigError(
                    f"stash_factor {self.stash_factor} gives a {self.stash_size(r)}-slot stash for r={r}; "
                    f"a batch eviction needs more than {need}"
                )

    @property
    def geometry(self) -> TreeGeometry:
        return TreeGeometry(self.levels, self.bucket_size, self.block_size)

    @property
    def rs(self) -> list[int]:
        return list(range(self.max_range.bit_length()))

    def stash_size(self, r: int) -> int:
        return self.stash_factor << r

    @property
    def tree_capacity(self) -> int:
        return self.capacity_per_tree or (1 << (self.levels - 1))

    def edge_name(self, r: int) -> str:
        return "edge" if self.edge_layout == "single" else f"edge{r}"

    def edge_names(self) -> dict[int, str]:
        return {r: self.edge_name(r) for r in self.rs}


# ---------------------------------------------------------------------------
# tickets

# download kinds
DL_SLOTS = 0  # exact slot per block
DL_PATH_PER_BLOCK = 1  # whole path per block
DL_WINDOW = 2  # every slot of the range's paths


@dataclass(frozen=True)
class TicketBlock:
    counter: int
    label: int
    index: int
    key: bytes
    inline: bytes | None = None  # ciphertext held by the trusted plane


@dataclass(frozen=True)
class TicketRange:
    r: int
    epoch: int
    kind: int
    label: int
    blocks: tuple[TicketBlock, ...]


@dataclass(frozen=True)
class FetchTicket:
    nbytes: int
    ranges: tuple[TicketRange, ...]

    def to_bytes(self) -> bytes:
        out = [struct.pack("<QH", self.nbytes, len(self.ranges))]
        for rg in self.ranges:
            out.append(struct.pack("<BIBIH", rg.r, rg.epoch, rg.kind, rg.label, len(rg.blocks)))
            for b in rg.blocks:
                inline = b.inline or b""
                out.append(struct.pack("<QII16sI", b.counter, b.label, b.index, b.key, len(inline)))
                out.append(inline)
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "FetchTicket":
        try:
            nbytes, nr = struct.unpack_from("<QH", data, 0)
            pos = 10
            ranges = []
            for _ in range(nr):
                r, epoch, kind, label, nb = struct.unpack_from("<BIBIH", data, pos)
                pos += 12
                blocks = []
                for _ in range(nb):
                    c, l, s, key, ilen = struct.unpack_from("<QII16sI", data, pos)
                    pos += 36
                    inline = data[pos : pos + ilen] if ilen else None
                    if ilen and len(inline) != ilen:
                        raise FrameError("truncated inline block")
                    pos += ilen
                    blocks.append(TicketBlock(c, l, s, key, inline))
                ranges.append(TicketRange(r, epoch, kind, label, tuple(blocks)))
        except struct.error as exc:
            raise FrameError(f"malformed ticket: {exc}") from None
        if pos != len(data):
            raise FrameError("trailing bytes after ticket")
        return cls(nbytes, tuple(ranges))


def window_position(label: int, index: int, start: int, count: int, geometry: TreeGeometry, stash_size: int) -> int:
    """Position of a tree slot inside the canonical listing of a path window."""
    rel = index - stash_size
    level, offset = rel // geometry.bucket_size + 1, rel % geometry.bucket_size
    pos = geometry.bucket_size * sum(min(count, 1 << (e - 1)) for e in range(1, level))
    width = 1 << (level - 1)
    bucket = label % width
    return pos + ((bucket - start % width) % width) * geometry.bucket_size + offset


# ---------------------------------------------------------------------------
# metrics


@dataclass
class PlaneMetrics:
    instruction_bytes: int = 0
    instruction_mask_bytes: int = 0
    batches: dict[str, int] = field(default_factory=dict)
    epochs: int = 0
    aborted_epochs: int = 0

    @property
    def instruction_bytes_excl_masks(self) -> int:
        return self.instruction_bytes - self.instruction_mask_bytes


def pad_blocks(data: bytes, block_size: int) -> list[bytes]:
    if not data:
        raise ContractViolation("cannot upload an empty video")
    n = -(-len(data) // block_size)
    padded = data + bytes(n * block_size - len(data))
    return [padded[i * block_size : (i + 1) * block_size] for i in range(n)]


class PlaneBase:
    """Shared request handling for every mode's trusted plane."""

    name = "cp"

    def __init__(self, config: SystemConfig, net: Network):
        self.config = config
        self.net = net
        self.geometry = config.geometry
        self.rng = Drbg(config.seed).spawn("control-plane")
        self.keys = KeyRing(self.rng.bytes(16))
        self.lock = simpy.Resource(net.env, capacity=1)
        self.metrics = PlaneMetrics()
        self.edges = {r: EdgeClient(net, self.name, e, self.geometry) for r, e in config.edge_names().items()}
        self.edge_epoch = {r: 0 for r in config.rs}
        self.next_bid = 0
        self.plain_sizes: dict[str, int] = {}
        self.background: simpy.Process | None = None
        self.failures: list[OblivCdnError] = []  # background cycles that aborted, oldest first
        self.epoch = 0  # epoch attempts started, published or not

    # request handler: subscribers ask for tickets, operators for syncs
    def handle(self, src: str, frame: Frame) -> Generator:
        if frame.mtype == Msg.CP_FETCH:
            vid = frame.payload.decode()
            req = self.lock.request()
            yield req
            try:
                ticket, work = self.prepare_fetch(vid)
            except OblivCdnError:
                self.lock.release(req)
                raise
            self.background = self.net.env.process(self._run_cycle(work, req))
            return ticket.to_bytes()
        if frame.mtype == Msg.CP_SYNC:
            yield from self.sync()
            return b""
        raise FrameError(f"control plane does not handle message type {frame.mtype:#x}")

    def _run_cycle(self, work, req) -> Generator:
        # nobody waits on this process, so a failure must not escape into the event loop
        try:
            yield from work
        except OblivCdnError as exc:
            self.failures.append(exc)
        finally:
            self.lock.release(req)

    def attest(self, peers: dict[str, bytes]) -> Generator:
        """Exchange config digests with every peer; any mismatch fails setup."""
        try:
            replies = yield from self.net.parallel(
                *(self.net.call(self.name, name, Msg.ATTEST, digest, shape=("attest",)) for name, digest in peers.items())
            )
        except RemoteError as exc:
            raise ConfigError(f"attestation refused: {exc.message}") from exc
        for (name, digest), reply in zip(peers.items(), replies):
            if reply != digest:
                raise ConfigError(f"{name} answered attestation with a different digest")

    def upload(self, vid: str, data: bytes) -> Generator:
        with self.lock.request() as req:
            yield req
            yield from self.do_upload(vid, data)

    def sync(self) -> Generator:
        with self.lock.request() as req:
            yield req
            yield from self.do_sync()

    def wait_idle(self) -> Generator:
        """Block until no background cycle holds the trusted executor, then
        re-raise the oldest background failure, if any."""
        with self.lock.request() as req:
            yield req
        if self.failures:
            raise self.failures.pop(0)

    def _epoch(self, rs: list[int], body) -> Generator:
        """Run ``body()`` on shadow copies of trees ``rs``; publish or roll back."""
        attempts = 1 + self.config.epoch_retries
        for attempt in range(attempts):
            snap = self._snapshot()
            self.epoch += 1
            yield from self.net.parallel(*(self.edges[r].begin_shadow(r) for r in rs))
            try:
                yield from body()
            except OblivCdnError as exc:
                self.metrics.aborted_epochs += 1
                self._restore(snap)
                yield from self.net.parallel(*(self.edges[r].discard_shadow(r) for r in rs))
                if isinstance(exc, StashOverflowError):
                    raise
                if attempt + 1 == attempts or isinstance(exc, (CapacityError, ContractViolation)):
                    raise EpochAborted(f"epoch aborted: {exc}") from exc
                continue
            epochs = yield from self.net.parallel(*(self.edges[r].swap_shadow(r) for r in rs))
            for r, e in zip(rs, epochs):
                self.edge_epoch[r] = e
            self.metrics.epochs += 1
            return

    # to be provided by each mode
    def _snapshot(self):
        raise NotImplementedError

    def _restore(self, snap) -> None:
        raise NotImplementedError

    def prepare_fetch(self, vid: str):  # -> (FetchTicket, generator)
        raise NotImplementedError

    def do_upload(self, vid: str, data: bytes) -> Generator:
        raise NotImplementedError

    def do_sync(self) -> Generator:
        raise NotImplementedError
        yield


class ControlPlane(PlaneBase):
    """The oblivcdn trusted plane: metadata only, routing through the services."""

    def __init__(self, config: SystemConfig, net: Network, tracer: AccessTracer | None = None):
        super().__init__(config, net)
        total = config.tree_capacity * len(config.rs)
        self.video_map = VideoMap(config.max_videos, config.max_range, tracer)
        self.states = BlockStateMap(total, tracer)
        self.mirrors = {r: MetaMirror(r, self.geometry, config.stash_factor, config.tree_capacity) for r in config.rs}
        self.ctx = RoutingContext(self.geometry, self.states, self.keys, self.rng, config.stash_factor)
        self.seq = 0

    # -- epochs ----------------------------------------------------------------

    def _snapshot(self):
        return (
            self.video_map.table.snapshot(),
            self.states.table.snapshot(),
            {r: m.snapshot() for r, m in self.mirrors.items()},
            self.next_bid,
            dict(self.plain_sizes),
        )

    def _restore(self, snap) -> None:
        vm, st, mirrors, next_bid, sizes = snap
        self.video_map.table.restore(vm)
        self.states.table.restore(st)
        for r, m in mirrors.items():
            self.mirrors[r].restore(m)
        self.next_bid = next_bid
        self.plain_sizes = sizes

    def _batch_id(self, r: int, proto: int) -> int:
        self.seq += 1
        return make_batch_id(self.epoch, r, proto, self.seq)

    def _dispatch(self, pair: tuple[TokenBatch, TokenBatch]) -> Generator:
        b1, b2 = pair
        d1, d2 = b1.to_bytes(), b2.to_bytes()
        m = self.metrics
        # the frame header is added by the network; count token bytes here
        m.instruction_bytes += len(d1) + len(d2)
        m.instruction_mask_bytes += b1.mask_bytes() + b2.mask_bytes()
        name = Proto(b1.proto).name
        m.batches[name] = m.batches.get(name, 0) + 1
        shape = ("tokens", b1.proto, b1.r, b1.count)
        acks = yield from self.net.parallel(
            self.net.call(self.name, self.config.cs_names[0], Msg.CS_TOKENS, d1, batch_id=b1.batch_id, shape=shape),
            self.net.call(self.name, self.config.cs_names[1], Msg.CS_TOKENS, d2, batch_id=b2.batch_id, shape=shape),
        )
        return [decode_ack(a) for a in acks]

    # -- range operations --------------------------------------------------------

    def evict_pending(self, r: int) -> Generator:
        mirror = self.mirrors[r]
        while mirror.needs_eviction():
            plan = mirror.batch_evict()
            yield from self._dispatch(gen_path_range_ret(self.ctx, plan, self._batch_id(r, Proto.PATH_RANGE_RET)))
            yield from self._dispatch(gen_pri_range_evict(self.ctx, plan, self._batch_id(r, Proto.PRI_RANGE_EVICT)))

    def read_range(self, rg: RangeDesc) -> Generator:
        mirror = self.mirrors[rg.r]
        first = self.states.get(rg.bid)
        plan = mirror.read_range(rg.bid, first.label, self.rng)
        yield from self._dispatch(gen_block_range_ret(self.ctx, plan, self._batch_id(rg.r, Proto.BLOCK_RANGE_RET)))
        perm = mirror.permute(self.rng)
        yield from self._dispatch(gen_per_re_func(self.ctx, perm, self._batch_id(rg.r, Proto.PER_RE_FUNC)))
        yield from self.evict_pending(rg.r)

    # -- upload ----------------------------------------------------------------

    def do_upload(self, vid: str, data: bytes) -> Generator:
        if vid in self.plain_sizes:
            raise ContractViolation(f"video {vid!r} already uploaded")
        blocks = pad_blocks(data, self.geometry.block_size)
        ranges = ranges_for(self.next_bid, len(blocks), self.config.max_range)
        need: dict[int, int] = {}
        for rg in ranges:
            need[rg.r] = need.get(rg.r, 0) + rg.count
        for r, n in need.items():
            if self.mirrors[r].live + n > self.mirrors[r].capacity:
                raise CapacityError(f"video needs {n} more blocks in tree r={r}; {self.mirrors[r].capacity - self.mirrors[r].live} left")
        rs = sorted(need)

        def body():
            first_bid = self.next_bid
            self.next_bid += len(blocks)
            pos = 0
            for rg in ranges:
                entries = self.mirrors[rg.r].upload_assign(rg.bid, self.rng)
                slots = np.array([e.slot for e in entries], dtype=np.int64)
                cts = []
                for e in entries:
                    self.states.insert(e.bid, BlockState(0, e.label, e.slot))
                    cts.append(encrypt_block(self.keys.key(e.bid), 0, blocks[pos]))
                    pos += 1
                ct = np.frombuffer(b"".join(cts), dtype=np.uint8).reshape(len(entries), -1)
                yield from self.edges[rg.r].write_stash(rg.r, slots, ct)
                yield from self.evict_pending(rg.r)
            self.video_map.insert(vid, VideoRecord(first_bid, len(blocks), len(data)))
            self.plain_sizes[vid] = len(data)

        yield from self._epoch(rs, body)

    # -- fetch -------------------------------------------------------------------

    def prepare_fetch(self, vid: str):
        rec = self.video_map.get(vid)
        ranges = ranges_for(rec.first_bid, rec.blocks, self.config.max_range)
        out = []
        for rg in ranges:
            blocks = []
            for bid in rg.bids():
                st = self.states.get(bid)
                blocks.append(TicketBlock(st.counter, st.label, st.index, self.keys.key(bid)))
            out.append(TicketRange(rg.r, self.edge_epoch[rg.r], DL_SLOTS, 0, tuple(blocks)))
        ticket = FetchTicket(rec.nbytes, tuple(out))
        rs = sorted({rg.r for rg in ranges})

        def body():
            for rg in ranges:
                yield from self.read_range(rg)

        return ticket, self._epoch(rs, body)

    def do_sync(self) -> Generator:
        rs = [r for r in self.config.rs if self.mirrors[r].needs_eviction()]
        if not rs:
            return

        def body():
            for r in rs:
                yield from self.evict_pending(r)

        yield from self._epoch(rs, body)


# ---------------------------------------------------------------------------
# subscriber


@dataclass(frozen=True)
class FetchResult:
    data: bytes
    latency: float
    downloaded: int
    retries: int


class Subscriber:
    """Client in the edge's region: asks the control plane for a ticket and
    downloads ciphertext from the edge."""

    def __init__(self, name: str, net: Network, config: SystemConfig):
        self.name = name
        self.net = net
        self.config = config
        self.geometry = config.geometry
        self.edges = {r: EdgeClient(net, name, e, self.geometry) for r, e in config.edge_names().items()}

    def fetch(self, vid: str) -> Generator:
        start = self.net.now
        retries = 0
        while True:
            raw = yield from self.net.call(self.name, "cp", Msg.CP_FETCH, vid.encode(), shape=("fetch",))
            ticket = FetchTicket.from_bytes(raw)
            try:
                data, downloaded = yield from self._download(ticket)
            except RemoteError as exc:
                if is_remote(exc, StaleEpochError) and retries < self.config.ticket_retries:
                    retries += 1
                    continue
                raise
            return FetchResult(data, self.net.now - start, downloaded, retries)

    def _download(self, ticket: FetchTicket) -> Generator:
        geo = self.geometry
        B = geo.block_size
        out = []
        downloaded = 0
        for rg in ticket.ranges:
            S = self.config.stash_size(rg.r) if rg.kind == DL_SLOTS else 0
            edge = self.edges[rg.r]
            if rg.kind == DL_SLOTS:
                cts = yield from edge.download(rg.r, rg.epoch, [(b.label, b.index) for b in rg.blocks])
                downloaded += cts.nbytes
                cts = [cts[i].tobytes() for i in range(len(rg.blocks))]
            elif rg.kind == DL_PATH_PER_BLOCK:
                cts = []
                for b in rg.blocks:
                    path = yield from edge.download_paths(rg.r, rg.epoch, b.label, 1)
                    downloaded += path.nbytes
                    if b.inline is not None:
                        cts.append(b.inline)
                    else:
                        cts.append(path[window_position(b.label, b.index, b.label, 1, geo, 0)].tobytes())
            elif rg.kind == DL_WINDOW:
                count = len(rg.blocks)
                window = yield from edge.download_paths(rg.r, rg.epoch, rg.label, count)
                downloaded += window.nbytes
                cts = [
                    b.inline if b.inline is not None
                    else window[window_position(b.label, b.index, rg.label, count, geo, 0)].tobytes()
                    for b in rg.blocks
                ]
            else:
                raise FrameError(f"unknown download kind {rg.kind}")
            for b, ct in zip(rg.blocks, cts):
                out.append(decrypt_block(b.key, b.counter, ct))
        data = b"".join(out)[: ticket.nbytes]
        return data, downloaded
