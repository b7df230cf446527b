"""Seed-keyed random generator states with exact capture/restore.

The whole equivalence story of this package rests on one property: restoring
a captured generator state reproduces the identical future sample stream.
PCG64 keeps all of its state (including the half-consumed uint32 cache) in
``bit_generator.state``, and ``Generator.standard_normal`` draws via the
ziggurat with no cached spare value between calls, so capture/restore is an
exact round trip.  Legacy Box-Muller generators that cache a second Gaussian
outside the visible state would silently break the perturb/reset pattern.

Draw-order contract: perturbation directions are sampled per parameter block
in (block_id, tensor, element) order.  Splitting one ``standard_normal`` call
into per-block calls yields the same stream, which the test suite pins.
"""

from __future__ import annotations

import copy
from collections import deque

import numpy as np

from .errors import ProtocolError

# FIFO of per-iteration start states never needs more than two entries:
# the previous iteration's (consumed for deferred updates) and the current one.
FIFO_MAX_DEPTH = 2


def fresh_state(seed: int) -> dict:
    """Initial generator state for a seed, as an opaque restorable object."""
    return np.random.Generator(np.random.PCG64(seed)).bit_generator.state


def iteration_seeds(base_seed: int, steps: int) -> list[int]:
    """Deterministic per-iteration seed schedule derived from a base seed.

    Every runtime and every worker rank derives the same schedule locally,
    so broadcasting the base seed is enough to synchronize perturbations.
    """
    gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(base_seed), 0x5EED])))
    return [int(s) for s in gen.integers(0, 2**63 - 1, size=steps)]


class RngStateManager:
    """Live generators keyed by seed, plus the deferred-update state buffer.

    ``capture``/``restore`` give exact stream positioning; ``push_state`` /
    ``pop_state`` implement the FIFO that connects one iteration's
    perturbation stream to the next iteration's lazy parameter update.
    ``prev_state`` holds the last popped state while it is being advanced
    block by block.
    """

    def __init__(self):
        self._gens: dict[int, np.random.Generator] = {}
        self.state_fifo: deque = deque()
        self.prev_state = None

    def _gen(self, seed: int) -> np.random.Generator:
        if seed not in self._gens:
            self._gens[seed] = np.random.Generator(np.random.PCG64(seed))
        return self._gens[seed]

    def reset(self, seed: int) -> None:
        """(Re)position the generator for ``seed`` at its initial state."""
        self._gens[seed] = np.random.Generator(np.random.PCG64(seed))

    def generator(self, seed: int) -> np.random.Generator:
        """The live generator for ``seed``; drawing from it advances the state."""
        return self._gen(seed)

    def capture(self, seed: int) -> dict:
        """Snapshot the current stream position for ``seed``."""
        return copy.deepcopy(self._gen(seed).bit_generator.state)

    def restore(self, seed: int, state: dict) -> None:
        """Position the generator for ``seed`` at a captured state.

        The state value is self-contained, so a state captured under one
        seed may be installed under another; the key only selects which
        live generator is repositioned.
        """
        self._gen(seed).bit_generator.state = copy.deepcopy(state)

    def normal(self, seed: int, n: int) -> np.ndarray:
        """Draw ``n`` standard normals (f64), advancing the stream."""
        return self._gen(seed).standard_normal(n)

    # -- deferred-update FIFO ------------------------------------------------

    def push_state(self, state: dict) -> None:
        if len(self.state_fifo) >= FIFO_MAX_DEPTH:
            raise ProtocolError(
                f"state FIFO is full (depth {len(self.state_fifo)}); an iteration "
                "was started without consuming the previous state"
            )
        self.state_fifo.append(state)

    def pop_state(self) -> dict:
        if not self.state_fifo:
            raise ProtocolError("state FIFO is empty; no pending iteration state to consume")
        self.prev_state = self.state_fifo.popleft()
        return self.prev_state

    @property
    def fifo_depth(self) -> int:
        return len(self.state_fifo)
