"""Byte-accounted memory pools for the simulated host/device hierarchy.

Pools track what is resident, per-tag usage, and high-water marks.  Exceeding
capacity is an error, not an eviction trigger: the streaming schedule is
statically sized, so an overflow means the configuration is wrong.
"""

from __future__ import annotations

import threading

from .errors import MemoryCapacityError, ProtocolError


class MemoryPool:
    def __init__(self, name: str, capacity: int | None = None):
        self.name = name
        self.capacity = capacity
        self._resident: dict = {}  # key -> (nbytes, tag)
        self.used = 0
        self.peak = 0
        self._used_by_tag: dict[str, int] = {}
        self._peak_by_tag: dict[str, int] = {}
        self._lock = threading.RLock()  # the stress executor allocates from 3 threads

    def alloc(self, key, nbytes: int, tag: str = "block") -> None:
        with self._lock:
            if key in self._resident:
                raise ProtocolError(f"{self.name}: {key!r} already resident")
            if self.capacity is not None and self.used + nbytes > self.capacity:
                block_id = key[1] if isinstance(key, tuple) and len(key) > 1 else key
                raise MemoryCapacityError(
                    f"{self.name}: allocating {nbytes} bytes for {key!r} exceeds "
                    f"capacity {self.capacity} (used {self.used})",
                    block_id=block_id,
                )
            self._resident[key] = (nbytes, tag)
            self.used += nbytes
            self.peak = max(self.peak, self.used)
            self._used_by_tag[tag] = self._used_by_tag.get(tag, 0) + nbytes
            self._peak_by_tag[tag] = max(self._peak_by_tag.get(tag, 0), self._used_by_tag[tag])

    def free(self, key) -> int:
        with self._lock:
            if key not in self._resident:
                raise ProtocolError(f"{self.name}: {key!r} not resident")
            nbytes, tag = self._resident.pop(key)
            self.used -= nbytes
            self._used_by_tag[tag] -= nbytes
            return nbytes

    def resident_keys(self):
        return list(self._resident)

    def is_resident(self, key) -> bool:
        return key in self._resident

    def used_by_tag(self, tag: str) -> int:
        return self._used_by_tag.get(tag, 0)

    def peak_by_tag(self, tag: str) -> int:
        return self._peak_by_tag.get(tag, 0)

    def snapshot(self) -> dict:
        return {
            "name": self.name,
            "capacity": self.capacity,
            "used": self.used,
            "peak": self.peak,
            "peak_by_tag": dict(self._peak_by_tag),
        }
