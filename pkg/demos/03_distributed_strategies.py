"""The three distribution strategies and their equivalence to one worker.

Because the projected gradient is a scalar and the direction z is regenerated
from a shared seed, distribution needs almost no communication: a seed
broadcast, a couple of scalar losses, and a scalar mean-reduce.  No parameter
tensor ever crosses the fabric, and every strategy's result is bit-identical
to the respective single-worker computation.
"""

from zosim import ModelConfig, RngStateManager, ZoHyper, init_model, make_batch, mezo_step
from zosim.fabric import WorkerFabric
from zosim.strategies import ddp_step, mesh_assignments, pertp_step, twod_step

config = ModelConfig(vocab_size=32, d_model=32, n_heads=4, n_blocks=2, seq_len=16)
hyper = ZoHyper(epsilon=1e-3, lr=1e-2)
batch = make_batch(config, batch_size=8, seed=5)
seed = 777

# ---------------------------------------------------------------------------
# 1. Reference: one worker, eager.
# ---------------------------------------------------------------------------
ref = init_model(config, 7)
ref_step = mezo_step(ref, batch, hyper, seed)
print(f"single worker:        g = {ref_step.g:+.6f}")

# ---------------------------------------------------------------------------
# 2. Direction parallelism: rank 0 evaluates the +eps forward, rank 1 the
#    -eps forward, both run the identical parameter arithmetic.
# ---------------------------------------------------------------------------
fab = WorkerFabric(2)
stores = [init_model(config, 7) for _ in range(2)]


def pertp_worker(rank):
    return pertp_step(fab, rank, stores[rank], batch, hyper,
                      seed if rank == 0 else None, RngStateManager())


res = fab.run(pertp_worker)
print(f"direction parallel:   g = {res[0].g:+.6f}   bit-equal: {res[0].g == ref_step.g}")
print(f"  rank replicas identical: {stores[0].equal(stores[1])}; "
      f"fabric traffic by tag: {fab.bytes_by_tag}")

# ---------------------------------------------------------------------------
# 3. Data parallelism over 4 shards: each rank runs the full dual forward on
#    its shard; the 4 scalar gradients are mean-reduced in rank order.
# ---------------------------------------------------------------------------
K = 4
fab_d = WorkerFabric(K)
dstores = [init_model(config, 7) for _ in range(K)]


def ddp_worker(rank):
    return ddp_step(fab_d, rank, dstores[rank], batch.shard(K, rank), hyper,
                    seed if rank == 0 else None, RngStateManager())


dres = fab_d.run(ddp_worker)
print(f"\ndata parallel (K=4):  g = {dres[0].g:+.6f} "
      f"(mean of per-shard gradients; sync = {fab_d.bytes_by_tag['grad']} gradient bytes total)")

# ---------------------------------------------------------------------------
# 4. The 2-D mesh: groups of two ranks split the directions (inner), groups
#    split the batch (outer).  With n_b groups it reproduces K=n_b data
#    parallelism bit for bit; with one group it reproduces direction
#    parallelism.
# ---------------------------------------------------------------------------
fab_t = WorkerFabric(4)
tstores = [init_model(config, 7) for _ in range(4)]
assigns = mesh_assignments(2)


def twod_worker(rank):
    a = assigns[rank]
    return twod_step(fab_t, rank, a, tstores[rank], batch.shard(2, a.group), hyper,
                     seed if rank == 0 else None, mgr=RngStateManager())


tres = fab_t.run(twod_worker)

fab_d2 = WorkerFabric(2)
d2stores = [init_model(config, 7) for _ in range(2)]


def ddp2_worker(rank):
    return ddp_step(fab_d2, rank, d2stores[rank], batch.shard(2, rank), hyper,
                    seed if rank == 0 else None, RngStateManager())


d2res = fab_d2.run(ddp2_worker)
print(f"2-D mesh (2 x 2):     g = {tres[0].g:+.6f}   equals 2-way data parallel: "
      f"{tres[0].g == d2res[0].g and tstores[0].equal(d2stores[0])}")
print(f"  all 4 rank checksums identical: {len({s.checksum() for s in tstores}) == 1}")
