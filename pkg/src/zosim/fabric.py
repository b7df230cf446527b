"""In-process worker fabric: K ranks on threads with ordered, reliable
collectives and per-tag traffic accounting.

Collectives are deterministic: gathered values are ordered by rank and
reductions run in fixed ascending-rank order, so every rank computes the
identical float result and repeated runs are bit-stable regardless of thread
scheduling.  Every payload is tallied under its tag ("loss", "grad", "seed",
"checksum", "param", ...), which is how the tests prove that no parameter
tensor ever crosses the fabric during distributed steps.
"""

from __future__ import annotations

import queue
import threading

import numpy as np

from .errors import FabricFault


def _payload_bytes(value) -> int:
    if isinstance(value, np.ndarray):
        return value.nbytes
    if isinstance(value, (list, tuple)):
        return sum(_payload_bytes(v) for v in value)
    if isinstance(value, (bytes, bytearray, str)):
        return len(value)
    if value is None:
        return 0
    return 8  # python scalars travel as one machine word


class _Exchange:
    """Reusable all-to-all slot exchange for one fixed participant group."""

    def __init__(self, size: int, timeout: float):
        self.size = size
        self.timeout = timeout
        self.barrier = threading.Barrier(size)
        self.slots = [None] * size

    def exchange(self, index: int, value):
        self.slots[index] = value
        try:
            self.barrier.wait(timeout=self.timeout)
            out = list(self.slots)
            self.barrier.wait(timeout=self.timeout)  # all read; slots reusable
        except threading.BrokenBarrierError as e:
            raise FabricFault("collective aborted or timed out (unreachable rank?)") from e
        return out


class WorkerFabric:
    """K logical workers with broadcast / all_gather / all_reduce / send-recv."""

    def __init__(self, k: int, timeout: float = 60.0):
        if k < 1:
            raise FabricFault(f"worker count must be >= 1, got {k}")
        self.k = k
        self.timeout = timeout
        self._exchanges: dict[tuple, _Exchange] = {}
        self._mailboxes: dict[tuple, queue.Queue] = {}
        self._lock = threading.Lock()
        self.bytes_by_tag: dict[str, int] = {}
        self.collective_log: list[dict] = []

    def _exchange_for(self, group: tuple) -> _Exchange:
        with self._lock:
            if group not in self._exchanges:
                self._exchanges[group] = _Exchange(len(group), self.timeout)
            return self._exchanges[group]

    def _account(self, kind: str, tag: str, group: tuple, nbytes: int, rank: int) -> None:
        with self._lock:
            self.bytes_by_tag[tag] = self.bytes_by_tag.get(tag, 0) + nbytes
            if rank == group[0]:  # one log entry per collective
                self.collective_log.append(
                    {"kind": kind, "tag": tag, "participants": len(group)}
                )

    def _resolve_group(self, group) -> tuple:
        g = tuple(range(self.k)) if group is None else tuple(sorted(group))
        if not g or any(r < 0 or r >= self.k for r in g):
            raise FabricFault(f"invalid group {g} for fabric of size {self.k}")
        return g

    # -- collectives ---------------------------------------------------------

    def all_gather(self, rank: int, value, tag: str, group=None) -> list:
        """Every participant's value, ordered by rank."""
        g = self._resolve_group(group)
        self._account("all_gather", tag, g, _payload_bytes(value), rank)
        return self._exchange_for(g).exchange(g.index(rank), value)

    def broadcast(self, rank: int, value, tag: str, root: int = 0, group=None):
        """Root's value on every rank (non-roots pass a placeholder)."""
        g = self._resolve_group(group)
        if root not in g:
            raise FabricFault(f"broadcast root {root} not in group {g}")
        self._account("broadcast", tag, g, _payload_bytes(value) if rank == root else 0, rank)
        out = self._exchange_for(g).exchange(g.index(rank), value)
        return out[g.index(root)]

    def all_reduce_mean(self, rank: int, value: float, tag: str, group=None) -> float:
        """Mean with a fixed ascending-rank reduction order (bit-stable)."""
        g = self._resolve_group(group)
        self._account("all_reduce", tag, g, _payload_bytes(value), rank)
        vals = self._exchange_for(g).exchange(g.index(rank), value)
        total = 0.0
        for v in vals:
            total += v
        return total / len(g)

    # -- point to point --------------------------------------------------------

    def send(self, rank: int, dst: int, value, tag: str) -> None:
        with self._lock:
            box = self._mailboxes.setdefault((rank, dst), queue.Queue())
            self.bytes_by_tag[tag] = self.bytes_by_tag.get(tag, 0) + _payload_bytes(value)
        box.put(value)

    def recv(self, rank: int, src: int):
        with self._lock:
            box = self._mailboxes.setdefault((src, rank), queue.Queue())
        try:
            return box.get(timeout=self.timeout)
        except queue.Empty as e:
            raise FabricFault(f"recv from rank {src} timed out") from e

    # -- execution ----------------------------------------------------------------

    def run(self, fn, *args_per_rank) -> list:
        """Run ``fn(rank, *args)`` on every rank concurrently; returns results
        ordered by rank.  ``args_per_rank`` are sequences indexed by rank."""
        results = [None] * self.k
        errors: list[tuple[int, BaseException]] = []

        def worker(rank):
            try:
                results[rank] = fn(rank, *(a[rank] for a in args_per_rank))
            except BaseException as e:
                errors.append((rank, e))
                with self._lock:
                    for ex in self._exchanges.values():
                        ex.barrier.abort()

        threads = [threading.Thread(target=worker, args=(r,)) for r in range(self.k)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            # a rank that dies aborts the barriers, so peers see a generic
            # FabricFault; surface the root cause, not that collateral
            primary = min(
                errors,
                key=lambda re: (type(re[1]) is FabricFault, re[0]),
            )
            raise primary[1]
        return results

    def stats(self) -> dict:
        return {
            "bytes_by_tag": dict(self.bytes_by_tag),
            "collectives": len(self.collective_log),
        }
