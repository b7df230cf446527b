import numpy as np
import pytest

from zosim import (
    MemoryCapacityError,
    ModelConfig,
    ProtocolError,
    SimulationError,
    ZoHyper,
    init_model,
    iteration_seeds,
    make_batch,
    mezo_step,
)
from zosim.memory import MemoryPool
from zosim.scheduler import (
    CostModel,
    Device,
    OffloadedZo,
    StreamOp,
    _run_event_loop,
    offload_block,
    run_zo2_schedule,
    upload_block,
)


@pytest.fixture
def deep_config():
    return ModelConfig(vocab_size=16, d_model=16, n_heads=2, n_blocks=4, seq_len=8)


def test_pool_accounting():
    pool = MemoryPool("dev", capacity=100)
    pool.alloc("a", 60)
    pool.alloc("b", 30, tag="activation")
    assert pool.used == 90 and pool.peak == 90
    assert pool.free("a") == 60
    assert pool.used == 30
    assert pool.peak == 90
    assert pool.peak_by_tag("activation") == 30
    with pytest.raises(ProtocolError):
        pool.free("a")
    with pytest.raises(ProtocolError):
        pool.alloc("b", 1, tag="activation")


def test_upload_then_read_is_bit_identical(deep_config):
    store = init_model(deep_config, 3)
    dev = Device(store)
    upload_block(dev, 1)
    assert np.array_equal(dev.read_block(1).buf, store.block(1).buf)
    # device copy is independent of the host master
    dev.read_block(1).buf[0] = 42.0
    assert store.block(1).buf[0] != 42.0


def test_capacity_one_block_second_upload_oom(deep_config):
    store = init_model(deep_config, 3)
    one_block = store.block(1).nbytes
    dev = Device(store, capacity=one_block)
    upload_block(dev, 1)
    with pytest.raises(MemoryCapacityError) as ei:
        upload_block(dev, 2)
    assert ei.value.block_id == 2


def test_upload_offload_without_compute_keeps_host_unchanged(deep_config):
    store = init_model(deep_config, 3)
    before = store.block(1).buf.copy()
    dev = Device(store)
    upload_block(dev, 1)
    offload_block(dev, 1)  # no compute was scheduled, so this is legal
    assert np.array_equal(store.block(1).buf, before)
    assert dev.pool.used == 0


def test_offload_frees_exact_block_bytes(deep_config):
    store = init_model(deep_config, 3)
    dev = Device(store)
    upload_block(dev, 1)
    used = dev.pool.used
    assert used == store.block(1).elem_count * store.block(1).buf.itemsize
    offload_block(dev, 1)
    assert dev.pool.used == 0


def test_offload_before_compute_completion_is_protocol_error(deep_config):
    store = init_model(deep_config, 3)
    dev = Device(store)
    handle = upload_block(dev, 1)
    handle.compute_pending = True
    with pytest.raises(ProtocolError):
        offload_block(dev, 1)


def _train(runtime_factory, config, hyper, steps):
    store = init_model(config, 7)
    rt = runtime_factory(store)
    seeds = iteration_seeds(99, steps)
    records = []
    for j, s in enumerate(seeds, 1):
        records.append(rt.step(make_batch(config, 2, 1000 + j), s))
    return store, rt, records


def test_scheduled_equals_serial_equals_eager(deep_config, hyper):
    seeds = iteration_seeds(99, 5)
    eager = init_model(deep_config, 7)
    eager_records = [
        mezo_step(eager, make_batch(deep_config, 2, 1000 + j), hyper, s, iteration=j)
        for j, s in enumerate(seeds, 1)
    ]

    stores, records = {}, {}
    for mode in ("events", "serial", "threads"):
        st, rt, rec = _train(
            lambda s: OffloadedZo(s, hyper, cost=CostModel(uniform=1.0), mode=mode),
            deep_config, hyper, 5,
        )
        rt.flush()
        stores[mode], records[mode] = st, rec

    for mode in ("events", "serial", "threads"):
        assert eager.equal(stores[mode]), mode
        for a, b in zip(records[mode], eager_records):
            assert (a.loss_pos, a.loss_neg, a.g) == (b.loss_pos, b.loss_neg, b.g)


def test_host_master_lags_one_update(deep_config, hyper):
    # after iteration j the host transformer blocks hold the eager state of j-1
    seeds = iteration_seeds(42, 3)
    eager = init_model(deep_config, 7)
    lazy = init_model(deep_config, 7)
    rt = OffloadedZo(lazy, hyper, cost=CostModel(uniform=1.0))

    batches = [make_batch(deep_config, 2, 50 + j) for j in range(1, 4)]
    rt.step(batches[0], seeds[0])
    for wb in eager.transformer_blocks():
        assert np.array_equal(lazy.block(wb.block_id).buf, wb.buf)  # zero updates yet

    mezo_step(eager, batches[0], hyper, seeds[0], iteration=1)
    rt.step(batches[1], seeds[1])
    for wb in eager.transformer_blocks():
        assert np.array_equal(lazy.block(wb.block_id).buf, wb.buf)  # one update behind

    mezo_step(eager, batches[1], hyper, seeds[1], iteration=2)
    rt.step(batches[2], seeds[2])
    for wb in eager.transformer_blocks():
        assert np.array_equal(lazy.block(wb.block_id).buf, wb.buf)


def test_makespan_with_uniform_durations(deep_config, hyper):
    store = init_model(deep_config, 7)
    rt = OffloadedZo(store, hyper, cost=CostModel(uniform=2.0))
    rt.step(make_batch(deep_config, 2, 1), 5)
    n = deep_config.n_blocks
    assert rt.makespan() == (n + 2) * 2.0


def test_overlap_of_offload_compute_upload(deep_config, hyper):
    store = init_model(deep_config, 7)
    rt = OffloadedZo(store, hyper, cost=CostModel(uniform=1.0))
    rt.step(make_batch(deep_config, 2, 1), 5)
    by = {(e["op"], e["block_id"]): e for e in rt.last_timeline}
    for i in range(2, deep_config.n_blocks):
        trio = [by[("offload", i - 1)], by[("compute", i)], by[("upload", i + 1)]]
        latest_start = max(e["start"] for e in trio)
        earliest_end = min(e["end"] for e in trio)
        assert latest_start < earliest_end  # active intervals overlap


def test_single_block_schedule_degenerates(hyper):
    cfg = ModelConfig(vocab_size=16, d_model=16, n_heads=2, n_blocks=1, seq_len=8)
    store = init_model(cfg, 7)
    rt = OffloadedZo(store, hyper, cost=CostModel(uniform=1.0))
    run_zo2_schedule(rt, make_batch(cfg, 2, 1), 5)
    tl = rt.last_timeline
    order = [(e["op"], e["block_id"]) for e in sorted(tl, key=lambda e: (e["start"], e["op"]))]
    # C(emb) || U(W1); wait; C(W1); then O(W1) || C(head)
    assert set(order[:2]) == {("compute", 0), ("upload", 1)}
    assert order[2] == ("compute", 1)
    assert set(order[3:]) == {("compute", 2), ("offload", 1)}
    assert rt.makespan() == 3.0


def test_streamed_block_peak_is_three_footprints(hyper):
    cfg = ModelConfig(vocab_size=16, d_model=16, n_heads=2, n_blocks=8, seq_len=8)
    store = init_model(cfg, 7)
    rt = OffloadedZo(store, hyper, cost=CostModel(uniform=1.0))
    rt.step(make_batch(cfg, 2, 1), 5)
    wbytes = store.transformer_blocks()[0].nbytes
    assert rt.device.pool.peak_by_tag("block") == 3 * wbytes
    assert rt.device.pool.used_by_tag("block") == 0  # everything drained


def test_activation_scratch_peak_independent_of_depth(hyper):
    peaks = {}
    for n_blocks in (4, 8):
        cfg = ModelConfig(vocab_size=16, d_model=16, n_heads=2, n_blocks=n_blocks, seq_len=8)
        store = init_model(cfg, 7)
        rt = OffloadedZo(store, hyper, cost=CostModel(uniform=1.0))
        rt.step(make_batch(cfg, 2, 1), 5)
        pool = rt.device.pool
        peaks[n_blocks] = pool.peak_by_tag("activation") + pool.peak_by_tag("scratch")
    assert peaks[4] == peaks[8]


def test_capacity_bound_run(deep_config, hyper):
    store = init_model(deep_config, 7)
    wbytes = store.transformer_blocks()[0].nbytes
    persistent = store.blocks[0].nbytes + store.blocks[-1].nbytes
    act_budget = 6 * 2 * deep_config.seq_len * max(deep_config.d_model, deep_config.vocab_size) * 8
    capacity = persistent + 3 * wbytes + wbytes + act_budget  # 3 streamed + scratch + acts
    rt = OffloadedZo(store, hyper, capacity=capacity, cost=CostModel(uniform=1.0))
    rt.step(make_batch(deep_config, 2, 1), 5)  # fits


def test_event_loop_detects_dependency_cycle():
    a = StreamOp(0, "upload", 1, deps=(1,))
    b = StreamOp(1, "compute", 1, deps=(0,))
    with pytest.raises(SimulationError):
        _run_event_loop([a, b], CostModel(uniform=1.0), {1: None})


def test_timeline_schema(deep_config, hyper):
    store = init_model(deep_config, 7)
    rt = OffloadedZo(store, hyper, cost=CostModel(uniform=1.0))
    rt.step(make_batch(deep_config, 2, 1), 5)
    for e in rt.last_timeline:
        assert set(e) == {"op", "block_id", "stream", "start", "end"}
        assert e["op"] in ("upload", "compute", "offload")
        assert e["end"] > e["start"] >= 0.0


def test_flush_then_continue(deep_config, hyper):
    # checkpoints flush first; training may then resume and stay equivalent
    seeds = iteration_seeds(9, 4)
    eager = init_model(deep_config, 7)
    lazy = init_model(deep_config, 7)
    rt = OffloadedZo(lazy, hyper, cost=CostModel(uniform=1.0))
    for j, s in enumerate(seeds, 1):
        batch = make_batch(deep_config, 2, j)
        mezo_step(eager, batch, hyper, s, iteration=j)
        rt.step(batch, s)
        if j == 2:
            rt.flush()
    rt.flush()
    assert eager.equal(lazy)
