"""Forward-only training basics.

Walks through one central-difference training iteration by hand, then runs a
short training loop and shows the two properties everything else is built on:
bit-exact determinism and the bit-exact perturb/restore cycle.
"""

import numpy as np

from zosim import (
    ModelConfig,
    RngStateManager,
    ZoHyper,
    forward,
    init_model,
    iteration_seeds,
    loss,
    make_batch,
    mezo_step,
    perturb_params,
    zo_grad,
)

# ---------------------------------------------------------------------------
# 1. A tiny decoder-only transformer.  Parameters are grouped into ordered
#    blocks (embedding, transformer blocks, LM head); every block is one
#    contiguous buffer, which is what the streaming and slicing machinery
#    relies on later.
# ---------------------------------------------------------------------------
config = ModelConfig(vocab_size=32, d_model=32, n_heads=4, n_blocks=2, seq_len=16)
store = init_model(config, init_seed=7)
print(f"blocks: {[(b.block_id, b.kind, b.elem_count) for b in store.blocks]}")
print(f"total parameters: {store.total_params}")

batch = make_batch(config, batch_size=4, seed=1)
print(f"initial loss: {loss(forward(store, batch.token_ids), batch):.6f}")
print(f"  (uniform-guess reference: ln(32) = {np.log(32):.6f})")

# ---------------------------------------------------------------------------
# 2. One iteration by hand.  The direction z is never stored: the generator
#    is reset to the iteration seed before every pass, so perturbation,
#    restoration, and the final update all regenerate the identical z.
# ---------------------------------------------------------------------------
hyper = ZoHyper(epsilon=1e-3, lr=1e-2)
seed = 12345
mgr = RngStateManager()

mgr.reset(seed)
perturb_params(store, +hyper.epsilon, mgr.generator(seed))
loss_pos = loss(forward(store, batch.token_ids), batch)

mgr.reset(seed)
perturb_params(store, -2 * hyper.epsilon, mgr.generator(seed))
loss_neg = loss(forward(store, batch.token_ids), batch)

mgr.reset(seed)
perturb_params(store, +hyper.epsilon, mgr.generator(seed))  # back to base, bit-exact

g = zo_grad(loss_pos, loss_neg, hyper.epsilon)
print(f"\nloss at +eps: {loss_pos:.6f}   loss at -eps: {loss_neg:.6f}")
print(f"projected gradient g = (l+ - l-) / 2 eps = {g:+.4f}   (a single scalar!)")

# ---------------------------------------------------------------------------
# 3. The restore is bit-exact, not approximately exact.
# ---------------------------------------------------------------------------
fresh = init_model(config, init_seed=7)
print(f"parameters identical to a fresh model after the cycle: {store.equal(fresh)}")

# ---------------------------------------------------------------------------
# 4. A short training run on one fixed batch.  mezo_step packages the
#    sequence above plus the update theta <- theta - lr * g * z.  Each
#    iteration moves along a single random direction, so progress is noisy
#    but steady; production settings use far smaller learning rates and many
#    more steps.
# ---------------------------------------------------------------------------
hyper = ZoHyper(epsilon=1e-3, lr=3e-3, steps=120)
seeds = iteration_seeds(base_seed=99, steps=hyper.steps)
records = []
for j, s in enumerate(seeds, 1):
    records.append(mezo_step(store, batch, hyper, s, mgr, iteration=j))

print("\niter   loss(+eps)   g")
for r in records[::24]:
    print(f"{r.iteration:4d}   {r.loss_pos:.6f}   {r.g:+.4f}")
first, last = records[0], records[-1]
print(f"\nloss moved {first.loss_pos:.4f} -> {last.loss_pos:.4f} over {hyper.steps} iterations")

# ---------------------------------------------------------------------------
# 5. Determinism: rerunning the identical seeds/batches reproduces every
#    record and every parameter bit.
# ---------------------------------------------------------------------------
replay_store = init_model(config, init_seed=7)
replay_mgr = RngStateManager()
for j, s in enumerate(seeds, 1):
    r = mezo_step(replay_store, batch, hyper, s, replay_mgr, iteration=j)
assert r.g == last.g
assert replay_store.equal(store)
print("replay reproduced the run bit-for-bit")
