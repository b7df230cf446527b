import numpy as np
import pytest

from zosim import (
    ConfigurationError,
    ConsistencyError,
    FabricFault,
    RngStateManager,
    forward,
    init_model,
    iteration_seeds,
    loss,
    make_batch,
    mezo_step,
    perturb_params,
    zo_grad,
)
from zosim.fabric import WorkerFabric
from zosim.strategies import (
    broadcast_seed,
    ddp_step,
    mesh_assignments,
    pertp_step,
    twod_step,
)


def test_broadcast_seed_all_ranks_identical():
    fab = WorkerFabric(4)
    got = fab.run(lambda rank: broadcast_seed(fab, rank, 42 if rank == 0 else None))
    assert got == [42, 42, 42, 42]


def test_broadcast_twice_second_root_wins():
    fab = WorkerFabric(3)

    def worker(rank):
        first = fab.broadcast(rank, 10 if rank == 0 else None, tag="seed", root=0)
        second = fab.broadcast(rank, 20 if rank == 2 else None, tag="seed", root=2)
        return (first, second)

    assert fab.run(worker) == [(10, 20)] * 3


def test_post_broadcast_z_streams_identical(tiny_config):
    fab = WorkerFabric(4)

    def worker(rank):
        seed = broadcast_seed(fab, rank, 1234 if rank == 0 else None)
        mgr = RngStateManager()
        mgr.reset(seed)
        return mgr.normal(seed, 10)

    draws = fab.run(worker)
    for d in draws[1:]:
        assert np.array_equal(draws[0], d)


def test_broadcast_unreachable_rank_times_out():
    fab = WorkerFabric(2, timeout=0.3)

    def worker(rank):
        if rank == 1:
            return None  # never joins the collective
        return fab.broadcast(rank, 1, tag="seed", root=0)

    with pytest.raises(FabricFault):
        fab.run(worker)


def test_pertp_matches_eager_over_iterations(tiny_config, hyper):
    seeds = iteration_seeds(5, 6)
    ref = init_model(tiny_config, 7)
    ref_steps = [
        mezo_step(ref, make_batch(tiny_config, 4, 100 + j), hyper, s, iteration=j)
        for j, s in enumerate(seeds, 1)
    ]

    fab = WorkerFabric(2)
    stores = [init_model(tiny_config, 7) for _ in range(2)]

    def worker(rank):
        mgr = RngStateManager()
        out = []
        for j, s in enumerate(seeds, 1):
            out.append(pertp_step(fab, rank, stores[rank], make_batch(tiny_config, 4, 100 + j),
                                  hyper, s if rank == 0 else None, mgr, iteration=j))
        return out

    res = fab.run(worker)
    assert ref.equal(stores[0]) and ref.equal(stores[1])
    for a, b in zip(res[0], ref_steps):
        assert (a.loss_pos, a.loss_neg, a.g) == (b.loss_pos, b.loss_neg, b.g)
    # both ranks observed identical records
    for a, b in zip(res[0], res[1]):
        assert (a.loss_pos, a.loss_neg, a.g) == (b.loss_pos, b.loss_neg, b.g)


def test_pertp_checksums_match_and_no_param_traffic(tiny_config, hyper):
    fab = WorkerFabric(2)
    stores = [init_model(tiny_config, 7) for _ in range(2)]

    def worker(rank):
        mgr = RngStateManager()
        return pertp_step(fab, rank, stores[rank], make_batch(tiny_config, 4, 3), hyper,
                          11 if rank == 0 else None, mgr)

    fab.run(worker)
    assert stores[0].checksum() == stores[1].checksum()
    assert fab.bytes_by_tag.get("param", 0) == 0
    assert set(fab.bytes_by_tag) <= {"seed", "loss", "grad", "checksum"}


def test_pertp_wrong_worker_count(tiny_config, hyper):
    fab = WorkerFabric(3)
    store = init_model(tiny_config, 7)
    with pytest.raises(ConfigurationError):
        pertp_step(fab, 0, store, make_batch(tiny_config, 4, 3), hyper, 1)


def test_pertp_divergence_detected(tiny_config, hyper):
    # one rank silently corrupts a weight after the update: the post-step
    # checksum exchange must refuse
    fab = WorkerFabric(2)
    stores = [init_model(tiny_config, 7) for _ in range(2)]

    def worker(rank):
        mgr = RngStateManager()
        seed = broadcast_seed(fab, rank, 11 if rank == 0 else None)
        eps = hyper.epsilon
        mgr.reset(seed)
        perturb_params(stores[rank], +eps, mgr.generator(seed))
        batch = make_batch(tiny_config, 4, 3)
        mine = loss(forward(stores[rank], batch.token_ids), batch) if rank == 0 else None
        mgr.reset(seed)
        perturb_params(stores[rank], -2 * eps, mgr.generator(seed))
        if rank == 1:
            mine = loss(forward(stores[rank], batch.token_ids), batch)
        mgr.reset(seed)
        perturb_params(stores[rank], +eps, mgr.generator(seed))
        losses = fab.all_gather(rank, mine, tag="loss")
        g = zo_grad(losses[0], losses[1], eps)
        from zosim import update_params

        mgr.reset(seed)
        update_params(stores[rank], g, hyper.lr, mgr.generator(seed))
        if rank == 1:
            stores[rank].blocks[1].buf[0] += 1e-9  # inject divergence
        sums = fab.all_gather(rank, stores[rank].checksum(), tag="checksum")
        if len(set(sums)) != 1:
            raise ConsistencyError("diverged")

    with pytest.raises(ConsistencyError):
        fab.run(worker)


def test_ddp_mean_arithmetic():
    fab = WorkerFabric(2)
    vals = {0: 1.0, 1: 3.0}
    out = fab.run(lambda rank: fab.all_reduce_mean(rank, vals[rank], tag="grad"))
    assert out == [2.0, 2.0]


def test_ddp_equals_sequential_shard_mean(tiny_config, hyper):
    K = 4
    batch = make_batch(tiny_config, 8, 55)
    seed = 77

    fab = WorkerFabric(K)
    stores = [init_model(tiny_config, 7) for _ in range(K)]

    def worker(rank):
        mgr = RngStateManager()
        return ddp_step(fab, rank, stores[rank], batch.shard(K, rank), hyper,
                        seed if rank == 0 else None, mgr)

    res = fab.run(worker)

    # sequential oracle: one worker per shard, same seed, no communication
    gs = []
    for k in range(K):
        st = init_model(tiny_config, 7)
        mgr = RngStateManager()
        shard = batch.shard(K, k)
        mgr.reset(seed)
        perturb_params(st, hyper.epsilon, mgr.generator(seed))
        lp = loss(forward(st, shard.token_ids), shard)
        mgr.reset(seed)
        perturb_params(st, -2 * hyper.epsilon, mgr.generator(seed))
        ln = loss(forward(st, shard.token_ids), shard)
        gs.append(zo_grad(lp, ln, hyper.epsilon))
    total = 0.0
    for v in gs:
        total += v
    assert res[0].g == total / K
    # same update everywhere
    assert len({s.checksum() for s in stores}) == 1


def test_ddp_gradient_traffic_is_k_scalars_per_iteration(tiny_config, hyper):
    K, iters = 4, 3
    fab = WorkerFabric(K)
    stores = [init_model(tiny_config, 7) for _ in range(K)]
    seeds = iteration_seeds(1, iters)

    def worker(rank):
        mgr = RngStateManager()
        for j, s in enumerate(seeds, 1):
            batch = make_batch(tiny_config, 8, j)
            ddp_step(fab, rank, stores[rank], batch.shard(K, rank), hyper,
                     s if rank == 0 else None, mgr, iteration=j)

    fab.run(worker)
    assert fab.bytes_by_tag["grad"] == iters * K * 8
    assert fab.bytes_by_tag.get("param", 0) == 0


def test_ddp_k1_equals_eager(tiny_config, hyper):
    fab = WorkerFabric(1)
    store = init_model(tiny_config, 7)
    batch = make_batch(tiny_config, 4, 3)
    res = fab.run(lambda rank: ddp_step(fab, rank, store, batch.shard(1, 0), hyper, 21))
    ref = init_model(tiny_config, 7)
    ref_step = mezo_step(ref, batch, hyper, 21)
    assert res[0].g == ref_step.g
    assert store.equal(ref)


def test_ddp_shard_mismatch_is_config_error(tiny_config, hyper):
    batch = make_batch(tiny_config, 6, 3)
    with pytest.raises(ConfigurationError):
        batch.shard(4, 0)


def test_twod_nb2_equals_ddp_k2(tiny_config, hyper):
    batch = make_batch(tiny_config, 8, 55)
    seed = 31

    fab_d = WorkerFabric(2)
    dstores = [init_model(tiny_config, 7) for _ in range(2)]

    def ddp_worker(rank):
        mgr = RngStateManager()
        return ddp_step(fab_d, rank, dstores[rank], batch.shard(2, rank), hyper,
                        seed if rank == 0 else None, mgr)

    dres = fab_d.run(ddp_worker)

    fab_t = WorkerFabric(4)
    tstores = [init_model(tiny_config, 7) for _ in range(4)]
    assigns = mesh_assignments(2)

    def twod_worker(rank):
        mgr = RngStateManager()
        a = assigns[rank]
        return twod_step(fab_t, rank, a, tstores[rank], batch.shard(2, a.group), hyper,
                         seed if rank == 0 else None, mgr=mgr)

    tres = fab_t.run(twod_worker)
    assert tres[0].g == dres[0].g
    assert all(t.equal(dstores[0]) for t in tstores)
    assert len({s.checksum() for s in tstores}) == 1  # all 4 ranks identical


def test_twod_nb1_equals_pertp(tiny_config, hyper):
    batch = make_batch(tiny_config, 4, 9)
    seed = 13

    fab_p = WorkerFabric(2)
    pstores = [init_model(tiny_config, 7) for _ in range(2)]

    def pertp_worker(rank):
        mgr = RngStateManager()
        return pertp_step(fab_p, rank, pstores[rank], batch, hyper,
                          seed if rank == 0 else None, mgr)

    pres = fab_p.run(pertp_worker)

    fab_t = WorkerFabric(2)
    tstores = [init_model(tiny_config, 7) for _ in range(2)]
    assigns = mesh_assignments(1)

    def twod_worker(rank):
        mgr = RngStateManager()
        return twod_step(fab_t, rank, assigns[rank], tstores[rank], batch.shard(1, 0), hyper,
                         seed if rank == 0 else None, mgr=mgr)

    tres = fab_t.run(twod_worker)
    assert tres[0].g == pres[0].g
    assert tstores[0].equal(pstores[0])


def test_twod_orderings_identical_numerics_different_structure(tiny_config, hyper):
    batch = make_batch(tiny_config, 8, 5)
    seed = 3
    results, fabrics = {}, {}
    for ordering in ("pertp_inner", "ddp_inner"):
        fab = WorkerFabric(4)
        stores = [init_model(tiny_config, 7) for _ in range(4)]
        assigns = mesh_assignments(2)

        def worker(rank, fab=fab, stores=stores, assigns=assigns, ordering=ordering):
            mgr = RngStateManager()
            a = assigns[rank]
            return twod_step(fab, rank, a, stores[rank], batch.shard(2, a.group), hyper,
                             seed if rank == 0 else None, ordering=ordering, mgr=mgr)

        results[ordering] = (fab.run(worker), stores)
        fabrics[ordering] = fab

    (res_p, stores_p), (res_d, stores_d) = results["pertp_inner"], results["ddp_inner"]
    assert res_p[0].g == res_d[0].g
    assert stores_p[0].equal(stores_d[0])
    shape = {
        o: sorted((c["kind"], c["participants"]) for c in fabrics[o].collective_log)
        for o in fabrics
    }
    assert shape["pertp_inner"] != shape["ddp_inner"]


def test_twod_incomplete_group_is_config_error(tiny_config, hyper):
    fab = WorkerFabric(3)
    assigns = mesh_assignments(2)  # wants 4 ranks
    store = init_model(tiny_config, 7)
    with pytest.raises(ConfigurationError):
        twod_step(fab, 0, assigns[0], store, make_batch(tiny_config, 4, 1), hyper, 1)


def test_mesh_assignments_unique_and_paired():
    assigns = mesh_assignments(3)
    tuples = [(a.group, a.direction) for a in assigns]
    assert len(set(tuples)) == 6
    for g in range(3):
        dirs = sorted(a.direction for a in assigns if a.group == g)
        assert dirs == [-1, 1]
