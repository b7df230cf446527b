"""Forward-only (zeroth-order) optimizer core.

One training iteration evaluates the loss at two symmetric perturbations of
the parameters along a shared Gaussian direction z, forms the scalar
projected gradient

    g = (loss_pos - loss_neg) / (2 * epsilon),

and updates every parameter theta <- theta - lr * g * z with the identical z,
regenerated from the seed instead of stored.

Two execution styles are provided:

* ``mezo_step``: the whole model is perturbed, evaluated, restored and
  updated eagerly within one call.
* ``StreamingZo``: block-wise execution with the update for iteration j
  deferred to iteration j+1 (applied to each block just before it is
  perturbed again), which is what makes host/device streaming possible.
  ``flush`` applies the final pending update so the parameters match the
  eager path bit for bit.

Restore exactness: while a perturbation cycle is open, each block keeps a
snapshot of its unperturbed values and every perturbed state is computed as
``base + cumulative_scale * z``.  Closing the cycle copies the snapshot back,
so the +eps/-2eps/+eps pattern is a bit-exact no-op.  Re-adding the opposite
floating-point perturbation instead would drift in the last ulp (roughly half
of all elements at f64), which would poison every downstream equivalence.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ProtocolError
from .model import Batch, ParamBlock, ParamStore, forward_block, loss
from .rng import RngStateManager


@dataclass(frozen=True)
class ZoHyper:
    epsilon: float
    lr: float
    steps: int = 1

    def validate(self) -> "ZoHyper":
        if not self.epsilon > 0:
            raise NumericError(f"epsilon must be > 0, got {self.epsilon}")
        if not self.lr > 0:
            raise NumericError(f"lr must be > 0, got {self.lr}")
        if self.steps < 1:
            raise NumericError(f"steps must be >= 1, got {self.steps}")
        return self


@dataclass
class ZoStep:
    """One iteration's record: seed, directional losses, projected gradient."""

    iteration: int
    seed: int
    loss_pos: float
    loss_neg: float
    g: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "iter": self.iteration,
                "seed": self.seed,
                "loss_pos": self.loss_pos,
                "loss_neg": self.loss_neg,
                "g": self.g,
            }
        )


def zo_grad(loss_pos: float, loss_neg: float, epsilon: float) -> float:
    """Central-difference projected gradient (a scalar)."""
    if epsilon == 0:
        raise NumericError("epsilon must be nonzero")
    return (loss_pos - loss_neg) / (2.0 * epsilon)


# -- perturbation and update ---------------------------------------------------


def perturb_block(block: ParamBlock, scale: float, gen: np.random.Generator) -> None:
    """Shift one block by ``scale * z``, drawing z over the block buffer.

    z is drawn in f64 regardless of parameter dtype so every runtime consumes
    the identical stream. The generator always advances, even for scale=0.
    """
    z = gen.standard_normal(block.elem_count)
    new_scale = block.pert_scale + scale
    if new_scale == 0.0:
        if block.pert_base is not None:
            block.buf[:] = block.pert_base
            block.pert_base = None
        # scale == 0 with no open cycle: values untouched, stream advanced
    else:
        if block.pert_base is None:
            block.pert_base = block.buf.copy()
        np.add(block.pert_base, new_scale * z, out=block.buf, casting="same_kind")
    block.pert_scale = new_scale


def perturb_params(store: ParamStore, scale: float, gen: np.random.Generator) -> None:
    """Perturb every block in order; z order is (block, tensor, element)."""
    for block in store.blocks:
        perturb_block(block, scale, gen)


def update_block(block: ParamBlock, g: float, lr: float, gen: np.random.Generator) -> None:
    """theta <- theta - lr * g * z for one block, consuming the same z stream
    position as the corresponding perturbation pass."""
    if block.pert_scale != 0.0:
        raise ProtocolError(
            f"block {block.block_id} updated while a perturbation cycle is open "
            f"(cumulative scale {block.pert_scale})"
        )
    z = gen.standard_normal(block.elem_count)
    np.subtract(block.buf, (lr * g) * z, out=block.buf, casting="same_kind")


def update_params(store: ParamStore, g: float, lr: float, gen: np.random.Generator) -> None:
    for block in store.blocks:
        update_block(block, g, lr, gen)


# -- eager (whole-model) step ----------------------------------------------


def mezo_step(
    store: ParamStore,
    batch: Batch,
    hyper: ZoHyper,
    seed: int,
    mgr: RngStateManager | None = None,
    iteration: int = 1,
) -> ZoStep:
    """One eager iteration with the whole model resident in one memory space.

    Sequence: perturb +eps, loss_pos, reset, perturb -2eps, loss_neg, reset,
    perturb +eps (restore), g, reset, update.
    """
    hyper.validate()
    mgr = mgr or RngStateManager()
    eps = hyper.epsilon

    mgr.reset(seed)
    perturb_params(store, +eps, mgr.generator(seed))
    loss_pos = loss(_forward_all(store, batch.token_ids), batch)

    mgr.reset(seed)
    perturb_params(store, -2.0 * eps, mgr.generator(seed))
    loss_neg = loss(_forward_all(store, batch.token_ids), batch)

    mgr.reset(seed)
    perturb_params(store, +eps, mgr.generator(seed))

    g = zo_grad(loss_pos, loss_neg, eps)

    mgr.reset(seed)
    update_params(store, g, hyper.lr, mgr.generator(seed))
    return ZoStep(iteration, seed, loss_pos, loss_neg, g)


def _forward_all(store: ParamStore, token_ids) -> np.ndarray:
    x = token_ids
    for block in store.blocks:
        x = forward_block(block, x)
    return x


# -- block-wise streaming step ----------------------------------------------


def dual_forward(
    block: ParamBlock,
    hyper: ZoHyper,
    seed: int,
    mgr: RngStateManager,
    rs: dict,
    lrs: dict | None,
    g_prev: float,
    input_pos,
    input_neg,
    apply_pending: bool,
):
    """Process one block for one iteration of the streaming path.

    If a previous iteration's update is pending (``apply_pending``; tracked as
    an explicit flag so a legitimately zero gradient still consumes its state),
    restore ``lrs`` and apply it first, advancing ``lrs`` past this block.
    Then run both directional forwards from ``rs`` with a reset before each
    perturbation, close the cycle, and capture the advanced ``rs``.

    Returns (out_pos, out_neg, rs', lrs').
    """
    eps = hyper.epsilon
    if apply_pending:
        if lrs is None:
            raise ProtocolError(
                f"block {block.block_id}: pending update but no previous-iteration RNG state"
            )
        mgr.restore(seed, lrs)
        update_block(block, g_prev, hyper.lr, mgr.generator(seed))
        lrs = mgr.capture(seed)

    mgr.restore(seed, rs)
    perturb_block(block, +eps, mgr.generator(seed))
    out_pos = forward_block(block, input_pos)

    mgr.restore(seed, rs)
    perturb_block(block, -2.0 * eps, mgr.generator(seed))
    out_neg = forward_block(block, input_neg)

    mgr.restore(seed, rs)
    perturb_block(block, +eps, mgr.generator(seed))
    rs = mgr.capture(seed)
    return out_pos, out_neg, rs, lrs


def flush_pending_update(
    store: ParamStore, g_last: float, seed: int, mgr: RngStateManager, lr: float
) -> None:
    """Apply the deferred update of the most recent iteration to all blocks.

    After this the store matches the eager-update path.  Calling twice without
    a new iteration raises: the state FIFO holds exactly one pending state.
    """
    try:
        lrs = mgr.pop_state()
    except ProtocolError as e:
        raise ProtocolError("flush with no pending update (double flush?)") from e
    mgr.restore(seed, lrs)
    gen = mgr.generator(seed)
    for block in store.blocks:
        update_block(block, g_last, lr, gen)


class StreamingZo:
    """Block-streaming executor with lazy updates, in one memory space.

    Numerically identical to repeated ``mezo_step`` once ``flush`` is called:
    every block sees the same op sequence (cycle_j, update_j, cycle_j+1, ...)
    in the same order, just interleaved differently in time.
    """

    def __init__(self, store: ParamStore, hyper: ZoHyper):
        self.store = store
        self.hyper = hyper.validate()
        self.mgr = RngStateManager()
        self.iteration = 0
        self.g_prev = 0.0
        self.last_seed = None
        self._pending = False

    def step(self, batch: Batch, seed: int) -> ZoStep:
        self.iteration += 1
        self.mgr.reset(seed)
        rs = self.mgr.capture(seed)
        self.mgr.push_state(rs)
        # an explicit pending flag, not a g != 0 test: a legitimately zero
        # gradient still consumes its state, and a flushed update must not
        # be re-applied
        apply_pending = self.iteration > 1 and self._pending
        lrs = self.mgr.pop_state() if apply_pending else None

        out_pos = out_neg = batch.token_ids
        for block in self.store.blocks:
            out_pos, out_neg, rs, lrs = dual_forward(
                block, self.hyper, seed, self.mgr, rs, lrs,
                self.g_prev, out_pos, out_neg, apply_pending,
            )
        loss_pos = loss(out_pos, batch)
        loss_neg = loss(out_neg, batch)
        g = zo_grad(loss_pos, loss_neg, self.hyper.epsilon)
        self.g_prev = g
        self.last_seed = seed
        self._pending = True
        return ZoStep(self.iteration, seed, loss_pos, loss_neg, g)

    def flush(self) -> None:
        """Apply the last iteration's deferred update (always done before
        checkpointing or comparing against the eager path)."""
        if not self._pending:
            raise ProtocolError("flush with no pending update (double flush?)")
        flush_pending_update(self.store, self.g_prev, self.last_seed, self.mgr, self.hyper.lr)
        self._pending = False
