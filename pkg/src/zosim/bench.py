"""Run configurations, strategy drivers, measurement, and the verify suite.

``run`` executes T training iterations under one strategy and reports
throughput (median step wall time, first two warm-up steps discarded),
simulated peak device bytes, and per-tag communication counters.  Numeric
fields of the step log are bit-identical across reruns of the same config;
wall-clock fields are not part of the determinism claim.
"""

from __future__ import annotations

import csv
import io
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .comm import LinkTopology
from .errors import ConfigurationError
from .fabric import WorkerFabric
from .memory import MemoryPool
from .model import Batch, ModelConfig, init_model, make_batch
from .rng import RngStateManager, iteration_seeds
from .scheduler import CostModel, OffloadedZo
from .strategies import ddp_step, mesh_assignments, pertp_step, twod_step
from .zo import StreamingZo, ZoHyper, mezo_step

STRATEGIES = ("mezo", "zo2", "pertp", "ddp", "2d")
ORDERINGS = ("pertp_inner", "ddp_inner")


@dataclass(frozen=True)
class MeshConfig:
    workers: int = 1
    n_b: int = 1
    n_p: int = 2
    ordering: str = "pertp_inner"

    @classmethod
    def from_dict(cls, d: dict) -> "MeshConfig":
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigurationError(f"bad mesh config: {e}") from e


DEFAULT_TOPOLOGY = LinkTopology(host_bw=4e8, peer_bw=2.4e9, latency=1e-5, devices=4)


@dataclass
class RunConfig:
    model: ModelConfig
    hyper: ZoHyper
    strategy: str = "mezo"
    mesh: MeshConfig = field(default_factory=MeshConfig)
    topology: LinkTopology = DEFAULT_TOPOLOGY
    compute_time: float = 1e-4       # calibrated per-block compute cost (sim seconds)
    batch_size: int = 4
    seed: int = 1234
    init_seed: int = 7
    data_seed: int = 99
    device_capacity_blocks: float | None = None
    report_dir: str | None = None

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.hyper.validate()
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.mesh.ordering not in ORDERINGS:
            raise ConfigurationError(f"ordering must be one of {ORDERINGS}")
        k = self.mesh.workers
        if self.strategy in ("mezo", "zo2") and k != 1:
            raise ConfigurationError(f"strategy {self.strategy} runs on 1 worker, mesh has {k}")
        if self.strategy == "pertp" and k != 2:
            raise ConfigurationError(f"pertp needs exactly 2 workers, mesh has {k}")
        if self.strategy == "ddp":
            if k < 1:
                raise ConfigurationError("ddp needs at least 1 worker")
            if self.batch_size % k != 0:
                raise ConfigurationError(f"batch_size {self.batch_size} not divisible by {k} workers")
        if self.strategy == "2d":
            if self.mesh.n_p != 2:
                raise ConfigurationError(f"the mesh's direction dimension is fixed at 2, got {self.mesh.n_p}")
            if k != self.mesh.n_b * 2:
                raise ConfigurationError(
                    f"2d mesh needs workers = n_b x 2 = {self.mesh.n_b * 2}, got {k}"
                )
            if self.batch_size % self.mesh.n_b != 0:
                raise ConfigurationError(
                    f"batch_size {self.batch_size} not divisible by {self.mesh.n_b} groups"
                )
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        topo_dict = dict(d.pop("topology", {}))
        compute_time = topo_dict.pop("compute_time", d.pop("compute_time", 1e-4))
        kwargs = {
            "model": ModelConfig.from_dict(d.pop("model")),
            "hyper": ZoHyper(**d.pop("hyper")),
            "mesh": MeshConfig.from_dict(d.pop("mesh", {})),
            "topology": LinkTopology.from_dict(topo_dict) if topo_dict else DEFAULT_TOPOLOGY,
            "compute_time": compute_time,
        }
        try:
            cfg = cls(**kwargs, **d)
        except TypeError as e:
            raise ConfigurationError(f"bad run config: {e}") from e
        return cfg.validate()

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "RunConfig":
        try:
            with open(path) as f:
                d = json.load(f)
        except OSError as e:
            raise ConfigurationError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"config {path} is not valid JSON: {e}") from e
        return cls.from_dict(_merge(d, overrides or {}))

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "hyper": {"epsilon": self.hyper.epsilon, "lr": self.hyper.lr, "steps": self.hyper.steps},
            "strategy": self.strategy,
            "mesh": {"workers": self.mesh.workers, "n_b": self.mesh.n_b,
                     "n_p": self.mesh.n_p, "ordering": self.mesh.ordering},
            "topology": {"host_bw": self.topology.host_bw, "peer_bw": self.topology.peer_bw,
                         "latency": self.topology.latency, "devices": self.topology.devices,
                         "host_channel": self.topology.host_channel,
                         "peer_model": self.topology.peer_model,
                         "compute_time": self.compute_time},
            "batch_size": self.batch_size,
            "seed": self.seed,
            "init_seed": self.init_seed,
            "data_seed": self.data_seed,
            "device_capacity_blocks": self.device_capacity_blocks,
        }


def _merge(base: dict, overrides: dict) -> dict:
    out = dict(base)
    for key, val in overrides.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


@dataclass
class RunReport:
    strategy: str
    workers: int
    steps: list            # ZoStep records
    tokens_per_sec: float           # batch tokens / median step wall (2 warm-ups dropped)
    tokens_per_sec_total: float     # all tokens / total wall
    wall_time: float
    peak_device_bytes: int
    peak_by_tag: dict
    comm_bytes: dict
    timeline: list
    final_checksum: str

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "workers": self.workers,
            "tokens_per_sec": self.tokens_per_sec,
            "tokens_per_sec_total": self.tokens_per_sec_total,
            "wall_time": self.wall_time,
            "peak_device_bytes": self.peak_device_bytes,
            "peak_by_tag": self.peak_by_tag,
            "comm_bytes": self.comm_bytes,
            "final_checksum": self.final_checksum,
            "steps": len(self.steps),
        }


def _throughput(step_walls: list[float], tokens_per_step: int) -> float:
    walls = step_walls[2:] if len(step_walls) > 3 else step_walls
    med = float(np.median(walls))
    return tokens_per_step / med if med > 0 else float("inf")


def _batch_for(config: RunConfig, iteration: int) -> Batch:
    return make_batch(config.model, config.batch_size, config.data_seed * 1_000_003 + iteration)


def run(config: RunConfig) -> RunReport:
    """Train for ``hyper.steps`` iterations under the configured strategy.

    BLAS pools are pinned to one thread for the duration of the run: a
    simulated worker is one core, so cross-strategy speedups measure the
    strategy's parallelism rather than library thread-pool contention.
    """
    config.validate()
    runner = {
        "mezo": _run_mezo,
        "zo2": _run_zo2,
        "pertp": _run_fabric,
        "ddp": _run_fabric,
        "2d": _run_fabric,
    }[config.strategy]
    t0 = time.perf_counter()
    with threadpool_limits(limits=1):
        report = runner(config)
    report.wall_time = time.perf_counter() - t0
    if config.report_dir:
        write_outputs(report, config)
    return report


def _run_mezo(config: RunConfig) -> RunReport:
    store = init_model(config.model, config.init_seed)
    mgr = RngStateManager()
    pool = MemoryPool("device")
    for b in store.blocks:
        pool.alloc(("block", b.block_id), b.nbytes, tag="block")
    cfg = config.model
    act_bytes = config.batch_size * cfg.seq_len * (cfg.d_model + cfg.vocab_size) * np.dtype(cfg.np_dtype).itemsize

    seeds = iteration_seeds(config.seed, config.hyper.steps)
    steps, walls = [], []
    for j, seed in enumerate(seeds, 1):
        batch = _batch_for(config, j)
        t = time.perf_counter()
        # eager perturbation snapshots the whole model; account it while live
        pool.alloc(("scratch", j), store.total_bytes, tag="scratch")
        pool.alloc(("act", j), act_bytes, tag="activation")
        steps.append(mezo_step(store, batch, config.hyper, seed, mgr, iteration=j))
        pool.free(("scratch", j))
        pool.free(("act", j))
        walls.append(time.perf_counter() - t)

    tokens_per_step = config.batch_size * cfg.seq_len
    return RunReport(
        "mezo", 1, steps,
        _throughput(walls, tokens_per_step),
        tokens_per_step * len(steps) / sum(walls),
        sum(walls), pool.peak, pool.snapshot()["peak_by_tag"], {}, [],
        store.checksum(),
    )


def _run_zo2(config: RunConfig) -> RunReport:
    store = init_model(config.model, config.init_seed)
    capacity = None
    wblocks = store.transformer_blocks()
    if config.device_capacity_blocks is not None:
        capacity = int(config.device_capacity_blocks * wblocks[0].nbytes)
    cost = CostModel(
        host_bw=config.topology.host_bw,
        latency=config.topology.latency,
        compute_time=config.compute_time,
    )
    runtime = OffloadedZo(store, config.hyper, capacity=capacity, cost=cost)
    seeds = iteration_seeds(config.seed, config.hyper.steps)
    steps, walls = [], []
    for j, seed in enumerate(seeds, 1):
        batch = _batch_for(config, j)
        t = time.perf_counter()
        steps.append(runtime.step(batch, seed))
        walls.append(time.perf_counter() - t)
    runtime.flush()

    itemsize = np.dtype(config.model.np_dtype).itemsize
    comm = {
        "host_upload_bytes": runtime.device.uploaded_params * itemsize,
        "host_offload_bytes": runtime.device.offloaded_params * itemsize,
    }
    tokens_per_step = config.batch_size * config.model.seq_len
    return RunReport(
        "zo2", 1, steps,
        _throughput(walls, tokens_per_step),
        tokens_per_step * len(steps) / sum(walls),
        sum(walls), runtime.device.pool.peak, runtime.device.pool.snapshot()["peak_by_tag"],
        comm, runtime.last_timeline,
        store.checksum(),
    )


def _run_fabric(config: RunConfig) -> RunReport:
    k = config.mesh.workers
    fabric = WorkerFabric(k)
    stores = [init_model(config.model, config.init_seed) for _ in range(k)]
    seeds = iteration_seeds(config.seed, config.hyper.steps)
    assigns = mesh_assignments(config.mesh.n_b) if config.strategy == "2d" else None
    walls: list[float] = []

    def worker(rank):
        mgr = RngStateManager()
        out = []
        for j, seed in enumerate(seeds, 1):
            batch = _batch_for(config, j)
            seed_arg = seed if rank == 0 else None
            t = time.perf_counter()
            if config.strategy == "pertp":
                step = pertp_step(fabric, rank, stores[rank], batch, config.hyper,
                                  seed_arg, mgr, iteration=j)
            elif config.strategy == "ddp":
                step = ddp_step(fabric, rank, stores[rank], batch.shard(k, rank),
                                config.hyper, seed_arg, mgr, iteration=j)
            else:
                a = assigns[rank]
                step = twod_step(fabric, rank, a, stores[rank],
                                 batch.shard(config.mesh.n_b, a.group),
                                 config.hyper, seed_arg, ordering=config.mesh.ordering,
                                 mgr=mgr, iteration=j)
            if rank == 0:
                walls.append(time.perf_counter() - t)
            out.append(step)
        return out

    results = fabric.run(worker)
    steps = results[0]
    peak = max(s.total_bytes for s in stores)  # every rank holds a full replica
    tokens_per_step = config.batch_size * config.model.seq_len
    return RunReport(
        config.strategy, k, steps,
        _throughput(walls, tokens_per_step),
        tokens_per_step * len(steps) / sum(walls),
        sum(walls), peak, {"block": peak}, dict(fabric.bytes_by_tag), [],
        stores[0].checksum(),
    )


def write_outputs(report: RunReport, config: RunConfig) -> None:
    out = config.report_dir
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "report.json"), "w") as f:
        json.dump({"config": config.to_dict(), **report.to_dict()}, f, indent=1)
    with open(os.path.join(out, "steps.jsonl"), "w") as f:
        for s in report.steps:
            f.write(s.to_json() + "\n")
    with open(os.path.join(out, "timeline.json"), "w") as f:
        json.dump(report.timeline, f, indent=1)


COMPARE_COLUMNS = ["strategy", "workers", "tokens_per_sec", "peak_device_bytes", "speedup_vs_first"]


def compare(configs: list[RunConfig]) -> tuple[list[dict], str]:
    """Run each config and tabulate throughput/memory with speedups vs row 0.

    Refuses mixed model configs: cross-strategy numbers are only comparable
    on the identical model.
    """
    if len(configs) < 2:
        raise ConfigurationError("compare needs at least 2 configs")
    base_model = configs[0].model
    for c in configs[1:]:
        if c.model != base_model:
            raise ConfigurationError("compare requires identical model configs across rows")
    reports = [run(c) for c in configs]
    rows = []
    for r in reports:
        rows.append({
            "strategy": r.strategy,
            "workers": r.workers,
            "tokens_per_sec": round(r.tokens_per_sec, 3),
            "peak_device_bytes": r.peak_device_bytes,
            "speedup_vs_first": round(r.tokens_per_sec / reports[0].tokens_per_sec, 4),
        })
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=COMPARE_COLUMNS)
    writer.writeheader()
    writer.writerows(rows)
    return rows, buf.getvalue()


# -- verification suite -----------------------------------------------------------


def default_verify_config() -> RunConfig:
    return RunConfig(
        model=ModelConfig(vocab_size=16, d_model=16, n_heads=2, n_blocks=2, seq_len=8, dtype="f64"),
        hyper=ZoHyper(epsilon=1e-3, lr=1e-2, steps=4),
    )


def verify(config: RunConfig | None = None) -> list[dict]:
    """Cross-strategy equivalence and estimator checks on a small f64 model,
    with machine-readable pass/fail per property.  Includes fault-injection
    controls that prove the harness can detect broken setups."""
    from .errors import ConsistencyError
    from .model import forward, loss as model_loss
    from .zo import perturb_params, zo_grad

    cfg = config or default_verify_config()
    cfg.validate()
    if cfg.model.dtype != "f64":
        raise ConfigurationError("verify runs in f64")
    if cfg.model.param_count() > 1_000_000:
        raise ConfigurationError("verify expects a small model (<= 1M params)")
    hyper = cfg.hyper
    seeds = iteration_seeds(cfg.seed, hyper.steps)
    results: list[dict] = []

    def record(name, passed, detail=""):
        results.append({"name": name, "passed": bool(passed), "detail": detail})

    # eager reference trace
    ref = init_model(cfg.model, cfg.init_seed)
    ref_steps = []
    for j, s in enumerate(seeds, 1):
        ref_steps.append(mezo_step(ref, _batch_for(cfg, j), hyper, s, iteration=j))

    # determinism
    rerun = init_model(cfg.model, cfg.init_seed)
    same = True
    for j, s in enumerate(seeds, 1):
        r = mezo_step(rerun, _batch_for(cfg, j), hyper, s, iteration=j)
        same &= r.g == ref_steps[j - 1].g
    record("eager_determinism", same and ref.equal(rerun))

    # perturb/restore identity
    st = init_model(cfg.model, cfg.init_seed)
    before = st.checksum()
    mgr = RngStateManager()
    for scale in (hyper.epsilon, -2 * hyper.epsilon, hyper.epsilon):
        mgr.reset(7)
        perturb_params(st, scale, mgr.generator(7))
    record("perturb_restore_identity", st.checksum() == before)

    # streaming (in-memory) equivalence
    st2 = init_model(cfg.model, cfg.init_seed)
    sz = StreamingZo(st2, hyper)
    for j, s in enumerate(seeds, 1):
        sz.step(_batch_for(cfg, j), s)
    sz.flush()
    record("streaming_equals_eager", ref.equal(st2))

    # skipped-flush injection must break the equivalence
    st3 = init_model(cfg.model, cfg.init_seed)
    sz3 = StreamingZo(st3, hyper)
    for j, s in enumerate(seeds, 1):
        sz3.step(_batch_for(cfg, j), s)
    record("skipped_flush_detected", not ref.equal(st3))

    # scheduled streaming equivalence
    st4 = init_model(cfg.model, cfg.init_seed)
    rt = OffloadedZo(st4, hyper, cost=CostModel(uniform=1.0))
    for j, s in enumerate(seeds, 1):
        rt.step(_batch_for(cfg, j), s)
    rt.flush()
    record("scheduled_equals_eager", ref.equal(st4))

    # direction parallelism
    fab = WorkerFabric(2)
    pstores = [init_model(cfg.model, cfg.init_seed) for _ in range(2)]

    def pertp_worker(rank):
        m = RngStateManager()
        out = []
        for j, s in enumerate(seeds, 1):
            out.append(pertp_step(fab, rank, pstores[rank], _batch_for(cfg, j), hyper,
                                  s if rank == 0 else None, m, iteration=j))
        return out

    pres = fab.run(pertp_worker)
    record(
        "pertp_equals_eager",
        ref.equal(pstores[0]) and ref.equal(pstores[1])
        and all(a.g == b.g for a, b in zip(pres[0], ref_steps)),
    )
    record("pertp_no_param_traffic", fab.bytes_by_tag.get("param", 0) == 0,
           f"tags={sorted(fab.bytes_by_tag)}")

    # seed-skew injection must trip the consistency guard
    fabx = WorkerFabric(2)
    xstores = [init_model(cfg.model, cfg.init_seed) for _ in range(2)]

    def skewed_worker(rank):
        m = RngStateManager()
        seed = seeds[0] + rank  # deliberately different directions
        lp_ln = [None, None]
        eps = hyper.epsilon
        m.reset(seed)
        perturb_params(xstores[rank], +eps, m.generator(seed))
        if rank == 0:
            lp_ln[0] = model_loss(forward(xstores[rank], _batch_for(cfg, 1).token_ids), _batch_for(cfg, 1))
        m.reset(seed)
        perturb_params(xstores[rank], -2 * eps, m.generator(seed))
        if rank == 1:
            lp_ln[1] = model_loss(forward(xstores[rank], _batch_for(cfg, 1).token_ids), _batch_for(cfg, 1))
        m.reset(seed)
        perturb_params(xstores[rank], +eps, m.generator(seed))
        losses = fabx.all_gather(rank, lp_ln[rank], tag="loss")
        g = zo_grad(losses[0], losses[1], eps)
        m.reset(seed)
        from .zo import update_params
        update_params(xstores[rank], g, hyper.lr, m.generator(seed))
        sums = fabx.all_gather(rank, xstores[rank].checksum(), tag="checksum")
        if len(set(sums)) != 1:
            raise ConsistencyError("replicas diverged")
        return g

    try:
        fabx.run(skewed_worker)
        record("pertp_seed_skew_detected", False, "divergence not detected")
    except ConsistencyError:
        record("pertp_seed_skew_detected", True)

    # data parallelism vs sequential shards
    k = 2
    fab2 = WorkerFabric(k)
    dstores = [init_model(cfg.model, cfg.init_seed) for _ in range(k)]
    batch = _batch_for(cfg, 1)

    def ddp_worker(rank):
        m = RngStateManager()
        return ddp_step(fab2, rank, dstores[rank], batch.shard(k, rank), hyper,
                        seeds[0] if rank == 0 else None, m)

    dres = fab2.run(ddp_worker)
    gs = []
    for r in range(k):
        st = init_model(cfg.model, cfg.init_seed)
        m = RngStateManager()
        shard = batch.shard(k, r)
        m.reset(seeds[0])
        perturb_params(st, hyper.epsilon, m.generator(seeds[0]))
        lp = model_loss(forward(st, shard.token_ids), shard)
        m.reset(seeds[0])
        perturb_params(st, -2 * hyper.epsilon, m.generator(seeds[0]))
        ln = model_loss(forward(st, shard.token_ids), shard)
        gs.append(zo_grad(lp, ln, hyper.epsilon))
    total = 0.0
    for v in gs:
        total += v
    record("ddp_equals_sequential_shards", dres[0].g == total / k)
    record("ddp_grad_traffic_k_scalars", fab2.bytes_by_tag.get("grad", 0) == k * 8)

    # 2d mesh composition
    fab3 = WorkerFabric(4)
    tstores = [init_model(cfg.model, cfg.init_seed) for _ in range(4)]
    assigns = mesh_assignments(2)

    def twod_worker(rank):
        m = RngStateManager()
        a = assigns[rank]
        return twod_step(fab3, rank, a, tstores[rank], batch.shard(2, a.group), hyper,
                         seeds[0] if rank == 0 else None, mgr=m)

    tres = fab3.run(twod_worker)
    record("twod_equals_ddp", tres[0].g == dres[0].g and tstores[0].equal(dstores[0]))

    # quadratic estimator exactness
    rng = np.random.default_rng(0)
    max_err = 0.0
    for _ in range(50):
        theta = rng.normal(size=256)
        zvec = rng.normal(size=256)
        eps = 10.0 ** rng.uniform(-3, -1)
        lp = 0.5 * float((theta + eps * zvec) @ (theta + eps * zvec))
        ln = 0.5 * float((theta - eps * zvec) @ (theta - eps * zvec))
        max_err = max(max_err, abs(zo_grad(lp, ln, eps) - float(theta @ zvec)))
    record("estimator_exact_on_quadratics", max_err < 1e-9, f"max_err={max_err:.2e}")

    # communication formula
    from .comm import SliceLayout, plan_sliced_upload, simulate_plan, sliced_upload_time
    topo = LinkTopology(host_bw=2.0, peer_bw=12.0, devices=4)
    lay = SliceLayout.build(0, 1920, 4)
    sim = simulate_plan(plan_sliced_upload(lay, topo), topo).makespan
    record("comm_formula_fidelity", abs(sim - sliced_upload_time(1920, 4, topo)) <= 1e-12,
           f"sim={sim}")

    return results
