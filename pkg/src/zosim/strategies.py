"""Distribution strategies over the worker fabric.

All three strategies keep every rank's parameter replica bit-identical to the
single-worker path by construction: ranks share the perturbation seed, each
rank executes the full perturb/restore cycle (so parameter arithmetic is
identical everywhere), only scalar losses and gradients cross the fabric, and
reductions run in a fixed order.

* direction parallelism (``pertp_step``): two ranks split the two directional
  forwards of one iteration; losses are exchanged, the update needs no
  parameter traffic.
* data parallelism (``ddp_step``): K replicas each run a full dual forward on
  a disjoint batch shard; the scalar projected gradients are mean-reduced.
* 2-D mesh (``twod_step``): n_b groups x 2 directions; each rank runs a
  single directional forward on its group's shard, pairs exchange losses to
  form per-group gradients, and groups mean-reduce to the global gradient.
  Direction parallelism is the inner dimension by default; the flipped
  ordering is available to compare synchronization structure and must produce
  identical numerics.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigurationError, ConsistencyError
from .fabric import WorkerFabric
from .model import Batch, ParamStore, forward, loss
from .rng import RngStateManager
from .zo import ZoHyper, ZoStep, perturb_params, update_params, zo_grad

PLUS, MINUS = +1, -1


@dataclass(frozen=True)
class RankAssignment:
    """Position of one rank in the (group, direction) mesh."""

    rank: int
    group: int
    direction: int  # +1 evaluates loss at +eps, -1 at -eps
    n_groups: int

    @property
    def pair_ranks(self) -> tuple[int, int]:
        """(plus rank, minus rank) of this rank's group."""
        return (2 * self.group, 2 * self.group + 1)


def mesh_assignments(n_groups: int) -> list[RankAssignment]:
    """Adjacent rank pairs form groups: rank 2i is group i's +eps worker,
    rank 2i+1 its -eps worker."""
    out = []
    for r in range(2 * n_groups):
        out.append(RankAssignment(r, r // 2, PLUS if r % 2 == 0 else MINUS, n_groups))
    return out


def broadcast_seed(fabric: WorkerFabric, rank: int, seed=None, root: int = 0) -> int:
    """Share the iteration seed so every rank samples the same direction z."""
    return int(fabric.broadcast(rank, seed, tag="seed", root=root))


def _dual_cycle(store, batch_pos, batch_neg, hyper, seed, mgr):
    """Full perturb/evaluate/restore cycle; either batch may be None to skip
    that direction's forward (the parameter arithmetic never changes)."""
    eps = hyper.epsilon
    mgr.reset(seed)
    perturb_params(store, +eps, mgr.generator(seed))
    loss_pos = loss(forward(store, batch_pos.token_ids), batch_pos) if batch_pos is not None else None

    mgr.reset(seed)
    perturb_params(store, -2.0 * eps, mgr.generator(seed))
    loss_neg = loss(forward(store, batch_neg.token_ids), batch_neg) if batch_neg is not None else None

    mgr.reset(seed)
    perturb_params(store, +eps, mgr.generator(seed))
    return loss_pos, loss_neg


def _apply_update(store, g, hyper, seed, mgr):
    mgr.reset(seed)
    update_params(store, g, hyper.lr, mgr.generator(seed))


def _check_replicas(fabric, rank, store, tag_group=None):
    sums = fabric.all_gather(rank, store.checksum(), tag="checksum", group=tag_group)
    if len(set(sums)) != 1:
        raise ConsistencyError(f"parameter replicas diverged across ranks: {sums}")


def pertp_step(
    fabric: WorkerFabric,
    rank: int,
    store: ParamStore,
    batch: Batch,
    hyper: ZoHyper,
    seed: int,
    mgr: RngStateManager | None = None,
    iteration: int = 1,
    verify: bool = True,
) -> ZoStep:
    """Direction-parallel iteration on exactly two ranks sharing one batch.

    Rank 0 evaluates the +eps forward, rank 1 the -eps forward; the two scalar
    losses are exchanged and both ranks apply the identical update.  No
    parameter bytes cross the fabric.
    """
    if fabric.k != 2:
        raise ConfigurationError(f"direction parallelism needs exactly 2 workers, got {fabric.k}")
    mgr = mgr or RngStateManager()
    seed = broadcast_seed(fabric, rank, seed if rank == 0 else None)
    lp, ln = _dual_cycle(
        store,
        batch if rank == 0 else None,
        batch if rank == 1 else None,
        hyper, seed, mgr,
    )
    mine = lp if rank == 0 else ln
    losses = fabric.all_gather(rank, mine, tag="loss")
    g = zo_grad(losses[0], losses[1], hyper.epsilon)
    _apply_update(store, g, hyper, seed, mgr)
    if verify:
        _check_replicas(fabric, rank, store)
    return ZoStep(iteration, seed, losses[0], losses[1], g)


def ddp_step(
    fabric: WorkerFabric,
    rank: int,
    store: ParamStore,
    shard: Batch,
    hyper: ZoHyper,
    seed: int,
    mgr: RngStateManager | None = None,
    iteration: int = 1,
    verify: bool = True,
) -> ZoStep:
    """Data-parallel iteration: each rank runs the full dual forward on its
    own shard, the K scalar gradients are mean-reduced, every rank applies
    the shared update.  Gradient sync is K scalars, independent of model size.
    """
    mgr = mgr or RngStateManager()
    seed = broadcast_seed(fabric, rank, seed if rank == 0 else None)
    lp, ln = _dual_cycle(store, shard, shard, hyper, seed, mgr)
    g_local = zo_grad(lp, ln, hyper.epsilon)
    g = fabric.all_reduce_mean(rank, g_local, tag="grad")
    _apply_update(store, g, hyper, seed, mgr)
    if verify:
        _check_replicas(fabric, rank, store)
    return ZoStep(iteration, seed, lp, ln, g)


def twod_step(
    fabric: WorkerFabric,
    rank: int,
    assign: RankAssignment,
    store: ParamStore,
    shard: Batch,
    hyper: ZoHyper,
    seed: int,
    ordering: str = "pertp_inner",
    mgr: RngStateManager | None = None,
    iteration: int = 1,
    verify: bool = True,
) -> ZoStep:
    """One iteration on the n_groups x 2 mesh.

    Each rank computes a single directional forward on its group's shard.
    Under ``pertp_inner`` each group's pair exchanges losses (inner), then the
    per-group gradients are mean-reduced across groups (outer).  Under
    ``ddp_inner`` the same-direction ranks gather their losses first, then the
    two direction branches exchange; the gradient arithmetic is identical by
    construction, only the synchronization structure differs.
    """
    if ordering not in ("pertp_inner", "ddp_inner"):
        raise ConfigurationError(f"unknown mesh ordering {ordering!r}")
    if fabric.k != 2 * assign.n_groups:
        raise ConfigurationError(
            f"mesh needs {2 * assign.n_groups} ranks (= {assign.n_groups} groups x 2), "
            f"fabric has {fabric.k}"
        )
    mgr = mgr or RngStateManager()
    seed = broadcast_seed(fabric, rank, seed if rank == 0 else None)
    lp, ln = _dual_cycle(
        store,
        shard if assign.direction == PLUS else None,
        shard if assign.direction == MINUS else None,
        hyper, seed, mgr,
    )
    mine = lp if assign.direction == PLUS else ln

    if ordering == "pertp_inner":
        pair = assign.pair_ranks
        pair_losses = fabric.all_gather(rank, mine, tag="loss", group=pair)
        g_group = zo_grad(pair_losses[0], pair_losses[1], hyper.epsilon)
        all_g = fabric.all_gather(rank, g_group, tag="grad")
        # reduce over one representative per group, ascending group order;
        # identical float sequence to a K=n_groups data-parallel reduction
        total = 0.0
        for i in range(assign.n_groups):
            total += all_g[2 * i]
        g = total / assign.n_groups
        loss_pair = (pair_losses[0], pair_losses[1])
    else:
        plus_branch = tuple(range(0, fabric.k, 2))
        minus_branch = tuple(range(1, fabric.k, 2))
        my_branch = plus_branch if assign.direction == PLUS else minus_branch
        branch_losses = fabric.all_gather(rank, mine, tag="loss", group=my_branch)
        pair = assign.pair_ranks
        both = fabric.all_gather(rank, branch_losses, tag="loss", group=pair)
        plus_losses, minus_losses = both[0], both[1]
        total = 0.0
        for i in range(assign.n_groups):
            total += zo_grad(plus_losses[i], minus_losses[i], hyper.epsilon)
        g = total / assign.n_groups
        loss_pair = (plus_losses[assign.group], minus_losses[assign.group])

    _apply_update(store, g, hyper, seed, mgr)
    if verify:
        _check_replicas(fabric, rank, store)
    return ZoStep(iteration, seed, loss_pair[0], loss_pair[1], g)
