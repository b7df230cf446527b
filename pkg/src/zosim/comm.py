"""Hardware-aware transfer planning and a discrete-event interconnect model.

The naive way to replicate an M-parameter block onto n devices pushes n full
copies through the slow host channel, serialized behind one CPU transfer
thread.  The optimized plan slices the block into n parts, uploads slice i to
device i over the host link, then lets devices exchange the remaining n-1
slices over the fast peer links once the host phase completes; each device
offloads only its own slice afterwards, so host-link volume drops from n*M to
M in both directions.

Cost model: transfers are charged in parameter units over the link bandwidth
(params/sec).  Latency is a completion delay (cut-through): a link is busy for
size/bandwidth and the data lands ``latency`` later, so a chain of phases is
delayed by a single latency quantum, not one per hop.

Topology knobs: ``host_channel`` is "dedicated" (one link per device; transfer
threads aligned with devices can drive them in parallel) or "shared" (a single
serialized host channel, the single-thread contention regime); ``peer_model``
is "pairwise" (full bisection, one port pair per direction per device) or
"bus" (all peer traffic serialized on one bus).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigurationError,
    ConsistencyError,
    ProtocolError,
    SimulationError,
)

HOST = "host"

# temp-buffer materializations on the transfer path; stays zero when slice
# boundaries come from the init-time layout (contiguous views all the way)
TRANSFER_COPIES = 0


def reset_copy_counter() -> None:
    global TRANSFER_COPIES
    TRANSFER_COPIES = 0


@dataclass(frozen=True)
class LinkTopology:
    host_bw: float                 # params/sec per host link
    peer_bw: float                 # params/sec per peer port
    latency: float = 0.0           # seconds per message (completion delay)
    devices: int = 1
    host_channel: str = "dedicated"   # or "shared"
    peer_model: str = "pairwise"      # or "bus"

    def validate(self) -> "LinkTopology":
        if self.host_bw <= 0 or self.peer_bw <= 0:
            raise ConfigurationError("bandwidths must be positive")
        if self.latency < 0:
            raise ConfigurationError("latency must be non-negative")
        if self.devices < 1:
            raise ConfigurationError("device count must be >= 1")
        if self.host_channel not in ("dedicated", "shared"):
            raise ConfigurationError(f"unknown host_channel {self.host_channel!r}")
        if self.peer_model not in ("pairwise", "bus"):
            raise ConfigurationError(f"unknown peer_model {self.peer_model!r}")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "LinkTopology":
        try:
            return cls(**d).validate()
        except TypeError as e:
            raise ConfigurationError(f"bad topology: {e}") from e

    @classmethod
    def from_json(cls, path) -> "LinkTopology":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def host_resource(self, device: int) -> tuple:
        return (HOST,) if self.host_channel == "shared" else (f"pcie{device}",)

    def peer_resources(self, src: int, dst: int) -> tuple:
        if self.peer_model == "bus":
            return ("peer_bus",)
        return (f"nvout{src}", f"nvin{dst}")


@dataclass(frozen=True)
class Slice:
    owner: int
    offset: int
    length: int


@dataclass(frozen=True)
class SliceLayout:
    block_id: int
    n: int
    total: int
    slices: tuple

    @classmethod
    def build(cls, block_id: int, total: int, n: int) -> "SliceLayout":
        if n < 1:
            raise ConfigurationError(f"slice count must be >= 1, got {n}")
        width = -(-total // n)  # ceil; the last slice may be short
        slices = []
        off = 0
        for owner in range(n):
            length = min(width, total - off)
            slices.append(Slice(owner, off, max(length, 0)))
            off += max(length, 0)
        layout = cls(block_id, n, total, tuple(slices))
        layout.validate()
        return layout

    def validate(self) -> "SliceLayout":
        off = 0
        owners = []
        for s in self.slices:
            if s.offset != off:
                raise ConfigurationError("slices must partition [0, total) exactly")
            off += s.length
            owners.append(s.owner)
        if off != self.total:
            raise ConfigurationError("slices must cover the whole block")
        if sorted(owners) != list(range(self.n)):
            raise ConfigurationError("slice owners must be a permutation of devices")
        return self


@dataclass
class TransferEvent:
    src: str            # "host" or "dev{i}"
    dst: str
    offset: int
    length: int         # params
    link_kind: str      # "host" or "peer"
    resources: tuple
    deps: tuple = ()
    start: float = field(default=float("nan"))
    end: float = field(default=float("nan"))
    release: float = field(default=float("nan"))


@dataclass
class TransferPlan:
    kind: str
    block_id: int
    n: int
    total: int
    events: list

    def host_link_volume(self) -> int:
        return sum(e.length for e in self.events if e.link_kind == "host")

    def peer_link_volume(self) -> int:
        return sum(e.length for e in self.events if e.link_kind == "peer")


@dataclass
class EventTimeline:
    events: list
    makespan: float
    utilization: dict

    def to_rows(self) -> list[dict]:
        return [
            {
                "op": "transfer",
                "block_id": None,
                "stream": e.resources[0],
                "start": e.start,
                "end": e.end,
                "src": e.src,
                "dst": e.dst,
                "params": e.length,
            }
            for e in self.events
        ]


# -- planners ------------------------------------------------------------------


def plan_sliced_upload(layout: SliceLayout, topo: LinkTopology) -> TransferPlan:
    """Host sends slice i to device i; devices then exchange the other n-1
    slices peer-to-peer, starting only after the whole host phase completes."""
    topo.validate()
    n = layout.n
    if topo.devices < n:
        raise ConfigurationError(f"layout wants {n} devices, topology has {topo.devices}")
    events: list[TransferEvent] = []
    for s in layout.slices:
        events.append(
            TransferEvent(HOST, f"dev{s.owner}", s.offset, s.length, "host",
                          topo.host_resource(s.owner))
        )
    phase1 = tuple(range(len(events)))
    # round-robin shifts keep every in/out port busy with exactly one transfer
    for shift in range(1, n):
        for s in layout.slices:
            dst = (s.owner + shift) % n
            events.append(
                TransferEvent(f"dev{s.owner}", f"dev{dst}", s.offset, s.length, "peer",
                              topo.peer_resources(s.owner, dst), deps=phase1)
            )
    return TransferPlan("sliced_upload", layout.block_id, n, layout.total, events)


def plan_naive_upload(total: int, n: int, topo: LinkTopology, block_id: int = 0) -> TransferPlan:
    """n full-block uploads sharing one host link (a single CPU transfer
    thread serves every device)."""
    topo.validate()
    events = [
        TransferEvent(HOST, f"dev{i}", 0, total, "host", (HOST,))
        for i in range(n)
    ]
    return TransferPlan("naive_upload", block_id, n, total, events)


def plan_sliced_offload(layout: SliceLayout, topo: LinkTopology) -> TransferPlan:
    """Each device sends only its owned slice host-ward; the host reassembles
    the block by concatenation."""
    topo.validate()
    events = [
        TransferEvent(f"dev{s.owner}", HOST, s.offset, s.length, "host",
                      topo.host_resource(s.owner))
        for s in layout.slices
    ]
    return TransferPlan("sliced_offload", layout.block_id, layout.n, layout.total, events)


def plan_naive_offload(total: int, n: int, topo: LinkTopology, block_id: int = 0) -> TransferPlan:
    topo.validate()
    events = [
        TransferEvent(f"dev{i}", HOST, 0, total, "host", (HOST,))
        for i in range(n)
    ]
    return TransferPlan("naive_offload", block_id, n, total, events)


# -- analytic cost -----------------------------------------------------------


def sliced_upload_time(total: int, n: int, topo: LinkTopology) -> float:
    """Per-device upload cost under slicing: the owned slice over the host
    link plus the remaining n-1 slices over the peer port (volume divided by
    the respective link bandwidth).  Equals the simulated makespan on
    dedicated-host-link topologies, up to one latency quantum."""
    width = -(-total // n)
    return width / topo.host_bw + (total - width) / topo.peer_bw


def naive_upload_time(total: int, n: int, topo: LinkTopology) -> float:
    return n * total / topo.host_bw


# -- discrete-event simulation ----------------------------------------------------


def simulate_plan(plan: TransferPlan, topo: LinkTopology) -> EventTimeline:
    """Event-driven execution: each resource carries one transfer at a time
    (FIFO in issue order among ready events); distinct resources run
    concurrently.  Dependencies gate on the upstream transmission end
    (cut-through), completion lands one latency after transmission."""
    topo.validate()
    free: dict[str, float] = {}
    busy: dict[str, float] = {}
    pending = list(range(len(plan.events)))
    done: set[int] = set()
    while pending:
        progressed = False
        for idx in list(pending):
            e = plan.events[idx]
            if any(d not in done for d in e.deps):
                continue
            bw = topo.host_bw if e.link_kind == "host" else topo.peer_bw
            dep_ready = max((plan.events[d].release for d in e.deps), default=0.0)
            start = max([dep_ready] + [free.get(r, 0.0) for r in e.resources])
            duration = e.length / bw
            e.start = start
            e.release = start + duration
            e.end = e.release + topo.latency
            for r in e.resources:
                free[r] = e.release
                busy[r] = busy.get(r, 0.0) + duration
            done.add(idx)
            pending.remove(idx)
            progressed = True
        if not progressed:
            raise SimulationError(f"dependency cycle among transfer events {pending}")
    makespan = max(e.end for e in plan.events) if plan.events else 0.0
    utilization = {r: (busy[r] / makespan if makespan > 0 else 0.0) for r in busy}
    return EventTimeline(list(plan.events), makespan, utilization)


# -- execution against real buffers -----------------------------------------------


def _slice_view(buf: np.ndarray, offset: int, length: int) -> np.ndarray:
    global TRANSFER_COPIES
    view = buf[offset:offset + length]
    if not view.flags.c_contiguous:
        TRANSFER_COPIES += 1
        view = np.ascontiguousarray(view)
    return view


def execute_sliced_upload(host_buf: np.ndarray, layout: SliceLayout) -> list[np.ndarray]:
    """Move real bytes along the sliced-upload plan; returns each device's
    full copy.  Phase 1 pulls each owned slice from the host master; phase 2
    fills the rest from the owning peer's copy, never from the host."""
    if host_buf.shape[0] != layout.total:
        raise ConfigurationError("layout does not match buffer size")
    replicas = [np.empty_like(host_buf) for _ in range(layout.n)]
    for s in layout.slices:
        replicas[s.owner][s.offset:s.offset + s.length] = _slice_view(host_buf, s.offset, s.length)
    for s in layout.slices:
        src = replicas[s.owner]
        for dst in range(layout.n):
            if dst != s.owner:
                replicas[dst][s.offset:s.offset + s.length] = _slice_view(src, s.offset, s.length)
    return replicas


def execute_sliced_offload(
    replicas: list[np.ndarray], layout: SliceLayout, host_buf: np.ndarray
) -> None:
    """Each device writes only its owned slice back; refuses to assemble a
    block from diverged replicas."""
    digests = {r.tobytes() for r in replicas}
    if len(digests) != 1:
        raise ConsistencyError(
            "device replicas diverged; offload would reassemble a corrupt block"
        )
    for s in layout.slices:
        host_buf[s.offset:s.offset + s.length] = _slice_view(replicas[s.owner], s.offset, s.length)


def apply_thread_aligned_layout(store, n: int) -> None:
    """Fix the per-block slice boundaries at model-init time so runtime
    transfers slice contiguous regions and never re-partition."""
    if store.slice_plan is not None:
        if store.slice_plan["n"] != n:
            raise ProtocolError(
                f"slice layout already fixed for n={store.slice_plan['n']}; "
                f"changing to n={n} requires re-initialization"
            )
        return
    store.slice_plan = {
        "n": n,
        "layouts": {b.block_id: SliceLayout.build(b.block_id, b.elem_count, n) for b in store.blocks},
    }
