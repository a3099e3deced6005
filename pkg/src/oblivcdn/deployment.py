"""Assembles a simulated deployment for one mode.

The control plane sits in the provider's region; the edge server(s), both
compute services and the subscriber share the subscriber's region.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .compute_service import ComputeService
from .control_plane import MODES, ControlPlane, FetchResult, PlaneBase, Subscriber, SystemConfig
from .addressing import config_digest
from .edge_store import EdgeServer, EdgeStore
from .errors import ConfigError
from .oblivious import AccessTracer
from .simnet import LinkModel, Network

PROVIDER_REGION = "provider"
EDGE_REGION = "edge"


@dataclass
class Deployment:
    config: SystemConfig
    mode: str
    net: Network
    plane: PlaneBase
    stores: dict[str, EdgeStore]
    services: list[ComputeService] = field(default_factory=list)
    subscriber: Subscriber | None = None

    def store_for(self, r: int) -> EdgeStore:
        return self.stores[self.config.edge_name(r)]

    # synchronous helpers that advance the virtual clock

    def upload(self, vid: str, data: bytes) -> None:
        self.net.run(self.plane.upload(vid, data))

    def fetch(self, vid: str, *, wait: bool = True) -> FetchResult:
        result = self.net.run(self.subscriber.fetch(vid))
        if wait:
            self.settle()
        return result

    def sync(self) -> None:
        self.net.run(self.plane.sync())

    def settle(self) -> None:
        """Let any background cycle finish."""
        self.net.run(self.plane.wait_idle())


def stash_sizes(config: SystemConfig, mode: str, rs: list[int]) -> dict[int, int]:
    if mode == "oblivcdn":
        return {r: config.stash_size(r) for r in rs}
    return {r: 0 for r in rs}


def build(config: SystemConfig, mode: str = "oblivcdn", *, tracer: AccessTracer | None = None,
          wall_clock: bool = False) -> Deployment:
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    links = LinkModel(
        local_rtt=config.local_rtt,
        remote_rtt=config.remote_rtt,
        local_bandwidth=config.local_bandwidth,
        remote_bandwidth=config.remote_bandwidth,
    )
    net = Network(links, wall_clock=wall_clock)
    rs = config.rs if mode != "strawman" else [0]
    by_edge: dict[str, list[int]] = {}
    for r in rs:
        by_edge.setdefault(config.edge_name(r), []).append(r)
    stores = {}
    for i, (name, hosted) in enumerate(sorted(by_edge.items())):
        sizes = stash_sizes(config, mode, hosted)
        store = EdgeStore(config.geometry, sizes, seed=config.seed * 7919 + i)
        stores[name] = store
        net.register(name, EdgeServer(store).handle, EDGE_REGION)
    services = []
    if mode == "oblivcdn":
        plane: PlaneBase = ControlPlane(config, net, tracer)
        c1, c2 = config.cs_names
        for party, name, peer in ((1, c1, c2), (2, c2, c1)):
            cs = ComputeService(party, name, net, config.geometry, config.stash_factor, config.edge_names(), peer)
            net.register(name, cs.handle, EDGE_REGION)
            services.append(cs)
    else:
        from .strawman import PathOramPlane, RangeOramPlane

        plane = PathOramPlane(config, net) if mode == "strawman" else RangeOramPlane(config, net)
    net.register("cp", plane.handle, PROVIDER_REGION)
    sub = Subscriber("sub", net, config)
    net.register("sub", _no_requests, EDGE_REGION)
    peers = {name: config_digest(config.geometry, store.stash_sizes) for name, store in stores.items()}
    if services:
        expect = config_digest(config.geometry, {r: config.stash_size(r) for r in rs})
        peers.update({cs.name: expect for cs in services})
    net.run(plane.attest(peers))
    net.reset_metrics()
    return Deployment(config, mode, net, plane, stores, services, sub)


def _no_requests(src, frame):
    raise ConfigError("subscriber accepts no requests")
    yield  # pragma: no cover
