"""Block-streaming runtime: simulated device memory plus the three-stream
upload/compute/offload scheduler.

Parameters master-reside on the host; one transformer block at a time is
uploaded to the device, dual-forwarded (applying the previous iteration's
deferred update first), and offloaded back.  The embedding and LM head stay
device-resident for the whole run, since the streaming loop never moves them.

Three logical streams (upload, compute, offload) are modeled as in-order work
queues with explicit cross-stream dependencies; durations come from a cost
model while the ops move real bytes, so performance is simulated and
correctness is tested on the same run.  The steady state overlaps
offload(i-1) / compute(i) / upload(i+1), which is why device residency stays
at three streamed blocks regardless of depth.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import ProtocolError, SimulationError
from .memory import MemoryPool
from .model import Batch, ParamBlock, ParamStore, loss
from .rng import RngStateManager
from .zo import ZoHyper, ZoStep, dual_forward, update_block, zo_grad

UPLOAD, COMPUTE, OFFLOAD = "upload", "compute", "offload"
STREAMS = (UPLOAD, COMPUTE, OFFLOAD)


@dataclass
class StreamOp:
    op_id: int
    kind: str          # upload | compute | offload
    block_id: int
    deps: tuple = ()
    action: object = None
    start: float = field(default=float("nan"))
    end: float = field(default=float("nan"))

    @property
    def stream(self) -> str:
        return self.kind


@dataclass(frozen=True)
class CostModel:
    """Durations charged on the simulated clock.

    Transfers are charged as params / host_bw + latency; compute is a
    calibrated per-block constant.  ``uniform`` overrides everything with one
    duration (used to study overlap in isolation).
    """

    host_bw: float = 1e9          # params / simulated second
    latency: float = 0.0
    compute_time: float = 1e-3    # seconds per block dual-forward
    uniform: float | None = None

    def duration(self, op: StreamOp, block: ParamBlock) -> float:
        if self.uniform is not None:
            return self.uniform
        if op.kind == COMPUTE:
            return self.compute_time
        return block.elem_count / self.host_bw + self.latency


class DeviceBlock:
    """Device-resident copy of one host block."""

    def __init__(self, block: ParamBlock):
        self.block = block
        self.compute_pending = False
        self.compute_done = False


class Device:
    """Simulated accelerator: a byte-accounted pool plus resident block copies.

    Tags: ``persistent`` (embedding + head), ``block`` (streamed transformer
    blocks), ``activation`` (in-flight dual activations), ``scratch`` (the
    perturb-cycle base snapshot of the block being computed).
    """

    def __init__(self, host: ParamStore, capacity: int | None = None, name: str = "dev0"):
        self.host = host
        self.pool = MemoryPool(name, capacity)
        self.resident: dict[int, DeviceBlock] = {}
        self.uploaded_params = 0
        self.offloaded_params = 0

    def upload_block(self, block_id: int, tag: str = "block") -> DeviceBlock:
        """Copy a host block to the device; the host master is retained."""
        if block_id in self.resident:
            raise ProtocolError(f"block {block_id} already on device")
        src = self.host.block(block_id)
        self.pool.alloc(("block", block_id), src.nbytes, tag=tag)
        handle = DeviceBlock(src.copy())
        self.resident[block_id] = handle
        self.uploaded_params += src.elem_count
        return handle

    def offload_block(self, block_id: int) -> None:
        """Write the device copy back over the host master and free it."""
        handle = self.resident.get(block_id)
        if handle is None:
            raise ProtocolError(f"block {block_id} not on device")
        if handle.compute_pending and not handle.compute_done:
            raise ProtocolError(f"block {block_id} offloaded before its compute completed")
        self.host.block(block_id).buf[:] = handle.block.buf
        self.pool.free(("block", block_id))
        del self.resident[block_id]
        self.offloaded_params += handle.block.elem_count

    def read_block(self, block_id: int) -> ParamBlock:
        return self.resident[block_id].block


def upload_block(device: Device, block_id: int) -> DeviceBlock:
    return device.upload_block(block_id)


def offload_block(device: Device, block_id: int) -> None:
    device.offload_block(block_id)


def _run_event_loop(ops: list[StreamOp], cost: CostModel, blocks_by_id) -> float:
    """Deterministic single-threaded executor: per-stream FIFO order plus the
    dependency graph decide everything; returns the makespan."""
    queues = {s: [op for op in ops if op.stream == s] for s in STREAMS}
    heads = {s: 0 for s in STREAMS}
    stream_free = {s: 0.0 for s in STREAMS}
    done: dict[int, float] = {}
    remaining = len(ops)

    while remaining:
        best = None
        for s in STREAMS:
            if heads[s] >= len(queues[s]):
                continue
            op = queues[s][heads[s]]
            if any(d not in done for d in op.deps):
                continue
            start = max([stream_free[s]] + [done[d] for d in op.deps])
            key = (start, STREAMS.index(s))
            if best is None or key < best[0]:
                best = (key, op, s, start)
        if best is None:
            stuck = [op.op_id for q in queues.values() for op in q if op.op_id not in done]
            raise SimulationError(f"no runnable op; dependency cycle among ops {stuck}")
        _, op, s, start = best
        if op.action is not None:
            op.action()
        op.start = start
        op.end = start + cost.duration(op, blocks_by_id.get(op.block_id))
        done[op.op_id] = op.end
        stream_free[s] = op.end
        heads[s] += 1
        remaining -= 1
    return max(op.end for op in ops)


def _run_threaded(ops: list[StreamOp]) -> None:
    """Stress mode: one real thread per stream, event-synchronized deps.

    Timing is wall-clock and not recorded; numerics must match the
    deterministic loop exactly (ops on disjoint blocks commute)."""
    events = {op.op_id: threading.Event() for op in ops}
    errors: list[BaseException] = []

    def runner(stream_ops):
        try:
            for op in stream_ops:
                for d in op.deps:
                    if not events[d].wait(timeout=60.0):
                        raise SimulationError(f"op {op.op_id} timed out waiting for {d}")
                if op.action is not None:
                    op.action()
                events[op.op_id].set()
        except BaseException as e:  # propagate to caller
            errors.append(e)
            for op in stream_ops:
                events[op.op_id].set()

    threads = [
        threading.Thread(target=runner, args=([op for op in ops if op.stream == s],))
        for s in STREAMS
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]


class OffloadedZo:
    """Streaming zeroth-order runtime over one simulated device.

    ``mode`` selects the executor: "events" (deterministic simulated clock),
    "serial" (upload, compute, offload one block at a time; the equivalence
    oracle), or "threads" (real parallelism stress mode).
    """

    def __init__(
        self,
        store: ParamStore,
        hyper: ZoHyper,
        capacity: int | None = None,
        cost: CostModel | None = None,
        mode: str = "events",
    ):
        if mode not in ("events", "serial", "threads"):
            raise ProtocolError(f"unknown scheduler mode {mode!r}")
        self.store = store
        self.hyper = hyper.validate()
        self.cost = cost or CostModel()
        self.mode = mode
        self.device = Device(store, capacity)
        self.mgr = RngStateManager()
        self.iteration = 0
        self.g_prev = 0.0
        self.last_seed = None
        self._pending = False
        self.timelines: list[list[dict]] = []

        # embedding and LM head stay device-resident for the whole run
        self._persistent: dict[int, DeviceBlock] = {}
        for block in store.blocks:
            if block.kind != "transformer":
                self._persistent[block.block_id] = self.device.upload_block(
                    block.block_id, tag="persistent"
                )
        self.device.uploaded_params = 0  # persistent setup not counted as streaming traffic
        self.device.offloaded_params = 0

    # -- per-iteration op graph ------------------------------------------------

    def step(self, batch: Batch, seed: int) -> ZoStep:
        self.iteration += 1
        self.mgr.reset(seed)
        self._rs = self.mgr.capture(seed)
        self.mgr.push_state(self._rs)
        apply_pending = self.iteration > 1 and self._pending
        self._lrs = self.mgr.pop_state() if apply_pending else None
        self._seed = seed
        self._acts: dict = {}
        self._losses: dict = {}
        self._prev_act_block = None

        wids = [b.block_id for b in self.store.transformer_blocks()]
        emb_id = self.store.blocks[0].block_id
        head_id = self.store.blocks[-1].block_id
        ops = (
            self._build_serial_ops(emb_id, wids, head_id, batch, apply_pending)
            if self.mode == "serial"
            else self._build_overlapped_ops(emb_id, wids, head_id, batch, apply_pending)
        )

        blocks_by_id = {b.block_id: b for b in self.store.blocks}
        if self.mode == "threads":
            _run_threaded(ops)
            self.timelines.append([])
        else:
            _run_event_loop(ops, self.cost, blocks_by_id)
            self.timelines.append(
                [
                    {"op": op.kind, "block_id": op.block_id, "stream": op.stream,
                     "start": op.start, "end": op.end}
                    for op in ops
                ]
            )

        loss_pos, loss_neg = self._losses["pos"], self._losses["neg"]
        g = zo_grad(loss_pos, loss_neg, self.hyper.epsilon)
        self.g_prev = g
        self.last_seed = seed
        self._pending = True
        return ZoStep(self.iteration, seed, loss_pos, loss_neg, g)

    def _build_overlapped_ops(self, emb_id, wids, head_id, batch, apply_pending):
        """The dynamic-scheduler launch pattern: C(emb) with U(first block) in
        flight, then a steady state of O(i-1) / C(i) / U(i+1) gated on
        [U(i) done, C(i-1) done], then the two-op tail."""
        ops: list[StreamOp] = []
        oid = iter(range(10_000))
        by_key: dict[tuple, StreamOp] = {}

        def add(kind, block_id, deps, action):
            op = StreamOp(next(oid), kind, block_id, tuple(d.op_id for d in deps), action)
            ops.append(op)
            by_key[(kind, block_id)] = op
            return op

        c_emb = add(COMPUTE, emb_id, [], self._compute_action(emb_id, batch, apply_pending, persistent=True))
        if not wids:
            add(COMPUTE, head_id, [c_emb],
                self._compute_action(head_id, batch, apply_pending, persistent=True, is_head=True))
            return ops

        add(UPLOAD, wids[0], [], self._upload_action(wids[0]))
        n = len(wids)
        for idx in range(n):
            i = wids[idx]
            u_i = by_key[(UPLOAD, i)]
            c_prev = by_key[(COMPUTE, emb_id if idx == 0 else wids[idx - 1])]
            gate = [u_i, c_prev]
            add(COMPUTE, i, gate, self._compute_action(i, batch, apply_pending))
            if idx >= 1:
                add(OFFLOAD, wids[idx - 1], gate, self._offload_action(wids[idx - 1]))
            if idx + 1 < n:
                deps = [u_i] if idx == 0 else gate
                add(UPLOAD, wids[idx + 1], deps, self._upload_action(wids[idx + 1]))
        c_last = by_key[(COMPUTE, wids[-1])]
        add(OFFLOAD, wids[-1], [c_last], self._offload_action(wids[-1]))
        add(COMPUTE, head_id, [c_last],
            self._compute_action(head_id, batch, apply_pending, persistent=True, is_head=True))
        return ops

    def _build_serial_ops(self, emb_id, wids, head_id, batch, apply_pending):
        ops: list[StreamOp] = []
        oid = iter(range(10_000))

        def add(kind, block_id, action):
            deps = (ops[-1].op_id,) if ops else ()
            op = StreamOp(next(oid), kind, block_id, deps, action)
            ops.append(op)
            return op

        add(COMPUTE, emb_id, self._compute_action(emb_id, batch, apply_pending, persistent=True))
        for i in wids:
            add(UPLOAD, i, self._upload_action(i))
            add(COMPUTE, i, self._compute_action(i, batch, apply_pending))
            add(OFFLOAD, i, self._offload_action(i))
        add(COMPUTE, head_id,
            self._compute_action(head_id, batch, apply_pending, persistent=True, is_head=True))
        return ops

    # -- op actions --------------------------------------------------------------

    def _upload_action(self, block_id):
        def action():
            handle = self.device.upload_block(block_id)
            handle.compute_pending = True
        return action

    def _offload_action(self, block_id):
        def action():
            self.device.offload_block(block_id)
        return action

    def _compute_action(self, block_id, batch, apply_pending, persistent=False, is_head=False):
        def action():
            handle = self._persistent[block_id] if persistent else self.device.resident[block_id]
            block = handle.block
            pool = self.device.pool
            pool.alloc(("scratch", block_id, self.iteration), block.nbytes, tag="scratch")

            if block.kind == "embedding":
                in_pos = in_neg = batch.token_ids
            else:
                in_pos, in_neg = self._acts.pop("pos"), self._acts.pop("neg")

            out_pos, out_neg, self._rs, self._lrs = dual_forward(
                block, self.hyper, self._seed, self.mgr, self._rs, self._lrs,
                self.g_prev, in_pos, in_neg, apply_pending,
            )
            pool.free(("scratch", block_id, self.iteration))

            for side, out in (("pos", out_pos), ("neg", out_neg)):
                pool.alloc(("act", block_id, side, self.iteration), out.nbytes, tag="activation")
                self._acts[side] = out
            if block.kind != "embedding":
                for side in ("pos", "neg"):
                    pool.free(("act", self._prev_act_block, side, self.iteration))
            self._prev_act_block = block_id
            handle.compute_done = True
            handle.compute_pending = False

            if is_head:
                self._losses["pos"] = loss(self._acts.pop("pos"), batch)
                self._losses["neg"] = loss(self._acts.pop("neg"), batch)
                for side in ("pos", "neg"):
                    pool.free(("act", block_id, side, self.iteration))
        return action

    # -- end-of-run ----------------------------------------------------------------

    def flush(self) -> None:
        """Apply the final iteration's deferred update everywhere and sync the
        device-resident blocks back to the host."""
        if not self._pending:
            raise ProtocolError("flush with no pending update (double flush?)")
        lrs = self.mgr.pop_state()
        self.mgr.restore(self.last_seed, lrs)
        gen = self.mgr.generator(self.last_seed)
        for block in self.store.blocks:
            target = (
                self._persistent[block.block_id].block
                if block.block_id in self._persistent
                else block
            )
            update_block(target, self.g_prev, self.hyper.lr, gen)
        for block_id, handle in self._persistent.items():
            self.store.block(block_id).buf[:] = handle.block.buf
        self._pending = False

    def sync_host(self) -> None:
        """Copy persistent device blocks back to host without flushing."""
        for block_id, handle in self._persistent.items():
            self.store.block(block_id).buf[:] = handle.block.buf

    @property
    def last_timeline(self) -> list[dict]:
        return self.timelines[-1] if self.timelines else []

    def makespan(self) -> float:
        tl = self.last_timeline
        return max(e["end"] for e in tl) if tl else float("nan")


def run_zo2_schedule(runtime: OffloadedZo, batch: Batch, seed: int) -> ZoStep:
    """One scheduled streaming iteration on an existing runtime."""
    return runtime.step(batch, seed)


def timeline_to_json(timeline: list[dict]) -> str:
    return json.dumps(timeline, indent=1)


def activation_nbytes(store: ParamStore, batch_size: int) -> int:
    """Device bytes for one directional activation tensor (batch, seq, d)."""
    cfg = store.config
    return batch_size * cfg.seq_len * cfg.d_model * np.dtype(cfg.np_dtype).itemsize
