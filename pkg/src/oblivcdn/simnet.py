"""Discrete-event network between the deployment's endpoints.

Endpoints exchange binary frames; a call is a request frame and a reply frame,
each delayed by half the link RTT plus serialisation time. Time is virtual
(simpy) so latency figures are exact and runs with the same seed repeat
byte for byte. Every frame is recorded as a trace event with its size and an
optional shape tag so tests can compare what each party observes.

Handlers are generator functions ``handler(src, frame)`` that may themselves
issue calls; they return the reply payload.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Generator, Iterable

import simpy
import simpy.rt

from . import errors
from .errors import FrameError, OblivCdnError, RemoteError

MAGIC = b"OCDN"
VERSION = 1
HEADER = struct.Struct("<4sBBHQI")


class Msg(IntEnum):
    REPLY = 0x01
    ERROR = 0x02
    ATTEST = 0x03  # config digest exchange at setup
    # control plane
    CP_UPLOAD = 0x10
    CP_FETCH = 0x11
    CP_SYNC = 0x12
    # compute services
    CS_TOKENS = 0x20
    CS_PEER_STREAM = 0x21
    # edge storage
    ES_READ_WINDOWS = 0x30
    ES_WRITE_WINDOWS = 0x31
    ES_READ_SLOTS = 0x32
    ES_READ_STASH = 0x33
    ES_WRITE_STASH = 0x34
    ES_COMBINE = 0x35
    ES_BEGIN_SHADOW = 0x36
    ES_SWAP_SHADOW = 0x37
    ES_DISCARD_SHADOW = 0x38
    ES_DOWNLOAD = 0x39
    ES_DOWNLOAD_PATHS = 0x3A
    ES_STATS = 0x3B


@dataclass(frozen=True)
class Frame:
    mtype: int
    batch_id: int
    payload: bytes
    flags: int = 0


def encode_frame(frame: Frame) -> bytes:
    return HEADER.pack(MAGIC, VERSION, frame.mtype, frame.flags, frame.batch_id, len(frame.payload)) + frame.payload


def decode_frame(data: bytes) -> Frame:
    if len(data) < HEADER.size:
        raise FrameError("truncated frame header")
    magic, version, mtype, flags, batch_id, length = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FrameError("bad frame magic")
    if version != VERSION:
        raise FrameError(f"unsupported frame version {version}")
    if len(data) != HEADER.size + length:
        raise FrameError(f"frame length {len(data) - HEADER.size} does not match header {length}")
    return Frame(mtype, batch_id, data[HEADER.size :], flags)


# error codes carried in ERROR frames
_ERROR_CLASSES = [
    (1, errors.ContractViolation),
    (2, errors.UnknownKey),
    (3, errors.StaleEpochError),
    (4, errors.DuplicateBatch),
    (5, errors.ProtocolError),
    (6, errors.FrameError),
    (7, errors.StashOverflowError),
    (8, errors.CapacityError),
    (9, errors.EpochAborted),
]


def error_code(exc: BaseException) -> int:
    for code, cls in _ERROR_CLASSES:
        if type(exc) is cls:
            return code
    for code, cls in _ERROR_CLASSES:
        if isinstance(exc, cls):
            return code
    return 99


def encode_error(exc: BaseException) -> bytes:
    text = str(exc).encode()[:4000]
    return struct.pack("<HH", error_code(exc), len(text)) + text


def decode_error(payload: bytes) -> RemoteError:
    if len(payload) < 4:
        return RemoteError(99, "malformed error frame")
    code, n = struct.unpack_from("<HH", payload, 0)
    return RemoteError(code, payload[4 : 4 + n].decode(errors="replace"))


def is_remote(exc: BaseException, cls: type) -> bool:
    """Whether a RemoteError carries the code of exception class ``cls``."""
    if not isinstance(exc, RemoteError):
        return False
    return any(code == exc.code and c is cls for code, c in _ERROR_CLASSES)


# ---------------------------------------------------------------------------
# links


INTERCONTINENTAL_RTT = 0.400
LOCAL_RTT = 0.001


@dataclass
class LinkModel:
    """Latency and bandwidth between endpoints, derived from their regions."""

    regions: dict[str, str] = field(default_factory=dict)
    local_rtt: float = LOCAL_RTT
    remote_rtt: float = INTERCONTINENTAL_RTT
    local_bandwidth: float | None = None  # bytes per second; None = unlimited
    remote_bandwidth: float | None = None
    overrides: dict[tuple[str, str], tuple[float, float | None]] = field(default_factory=dict)

    def is_remote(self, src: str, dst: str) -> bool:
        return self.regions.get(src, "") != self.regions.get(dst, "")

    def params(self, src: str, dst: str) -> tuple[float, float | None]:
        if (src, dst) in self.overrides:
            return self.overrides[(src, dst)]
        if (dst, src) in self.overrides:
            return self.overrides[(dst, src)]
        if self.is_remote(src, dst):
            return self.remote_rtt, self.remote_bandwidth
        return self.local_rtt, self.local_bandwidth

    def delay(self, src: str, dst: str, nbytes: int) -> float:
        """One-way delay: half the RTT plus serialisation time."""
        rtt, bw = self.params(src, dst)
        return rtt / 2 + (nbytes / bw if bw else 0.0)


@dataclass(frozen=True)
class TraceEvent:
    time: float
    src: str
    dst: str
    mtype: int
    nbytes: int
    shape: tuple = ()

    def signature(self) -> tuple:
        """Time-free view: what an observer of the link learns per frame."""
        return (self.src, self.dst, self.mtype, self.nbytes, self.shape)


@dataclass
class LinkCounter:
    frames: int = 0
    nbytes: int = 0


class TransportError(OblivCdnError):
    """A frame was lost in transit (fault injection)."""


Handler = Callable[[str, Frame], Generator]
FaultHook = Callable[[str, str, int], "str | None"]


class Network:
    """Endpoints, links, virtual clock and traces."""

    def __init__(self, links: LinkModel, *, wall_clock: bool = False, wall_factor: float = 1.0):
        if wall_clock:
            self.env: simpy.Environment = simpy.rt.RealtimeEnvironment(factor=wall_factor, strict=False)
        else:
            self.env = simpy.Environment()
        self.links = links
        self.handlers: dict[str, Handler] = {}
        self.trace: list[TraceEvent] = []
        self.counters: dict[tuple[str, str], LinkCounter] = {}
        self.fault: FaultHook | None = None
        self.record_trace = True

    @property
    def now(self) -> float:
        return self.env.now

    def register(self, name: str, handler: Handler, region: str) -> None:
        if name in self.handlers:
            raise ValueError(f"endpoint {name!r} already registered")
        self.handlers[name] = handler
        self.links.regions[name] = region

    def _account(self, src: str, dst: str, frame: Frame, nbytes: int, shape: tuple) -> None:
        c = self.counters.setdefault((src, dst), LinkCounter())
        c.frames += 1
        c.nbytes += nbytes
        if self.record_trace:
            self.trace.append(TraceEvent(self.env.now, src, dst, frame.mtype, nbytes, shape))

    def _transmit(self, src: str, dst: str, frame: Frame, shape: tuple) -> Generator:
        data = encode_frame(frame)
        action = self.fault(src, dst, frame.mtype) if self.fault else None
        if action == "truncate":
            data = data[: max(HEADER.size, len(data) // 2)]
        self._account(src, dst, frame, len(data), shape)
        yield self.env.timeout(self.links.delay(src, dst, len(data)))
        if action == "drop":
            raise TransportError(f"frame {Msg(frame.mtype).name} {src}->{dst} lost")
        return data

    def call(
        self, src: str, dst: str, mtype: int, payload: bytes, *, batch_id: int = 0, shape: tuple = ()
    ) -> Generator:
        """Send a request and wait for the reply payload. Raises RemoteError."""
        if dst not in self.handlers:
            raise ValueError(f"no endpoint {dst!r}")
        data = yield from self._transmit(src, dst, Frame(mtype, batch_id, payload), shape)
        try:
            request = decode_frame(data)
            reply = yield self.env.process(self.handlers[dst](src, request))
            rframe = Frame(Msg.REPLY, batch_id, reply if reply is not None else b"")
        except OblivCdnError as exc:
            rframe = Frame(Msg.ERROR, batch_id, encode_error(exc))
        rdata = yield from self._transmit(dst, src, rframe, ())
        back = decode_frame(rdata)
        if back.mtype == Msg.ERROR:
            raise decode_error(back.payload)
        return back.payload

    def parallel(self, *gens: Generator) -> Generator:
        """Run generators concurrently; return their results in order.

        The first failure is re-raised after all of them have finished.
        """
        procs = [self.env.process(self._capture(g)) for g in gens]
        results = yield self.env.all_of(procs)
        outs = [results[p] for p in procs]
        for ok, value in outs:
            if not ok:
                raise value
        return [value for _, value in outs]

    @staticmethod
    def _capture(gen: Generator) -> Generator:
        try:
            value = yield from gen
        except OblivCdnError as exc:
            return False, exc
        return True, value

    def run(self, gen: Generator):
        """Drive a top-level generator to completion and return its value."""
        proc = self.env.process(gen)
        self.env.run(until=proc)
        return proc.value

    # -- metrics --------------------------------------------------------------

    def reset_metrics(self) -> None:
        self.trace.clear()
        self.counters.clear()

    def link_summary(self) -> list[tuple[str, str, int, int, bool]]:
        """(src, dst, frames, bytes, intercontinental) per directed link, sorted."""
        return [
            (a, b, c.frames, c.nbytes, self.links.is_remote(a, b))
            for (a, b), c in sorted(self.counters.items())
        ]

    def remote_bytes(self) -> int:
        return sum(c.nbytes for (a, b), c in self.counters.items() if self.links.is_remote(a, b))

    def local_bytes(self) -> int:
        return sum(c.nbytes for (a, b), c in self.counters.items() if not self.links.is_remote(a, b))

    def bytes_between(self, a: str, b: str) -> int:
        c = self.counters.get((a, b))
        return c.nbytes if c else 0

    def events_seen_by(self, party: str) -> list[TraceEvent]:
        return [ev for ev in self.trace if party in (ev.src, ev.dst)]


def run_local(gen: Generator):
    """Exhaust a generator that never needs the event loop (local stubs)."""
    try:
        item = next(gen)
    except StopIteration as stop:
        return stop.value
    raise RuntimeError(f"local generator yielded {item!r}; it needs a network")


def local(value):
    """Wrap a plain value as a generator returning it (for local client stubs)."""
    return value
    yield  # pragma: no cover


def concat(chunks: Iterable[bytes]) -> bytes:
    return b"".join(chunks)
