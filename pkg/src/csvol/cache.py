"""Pool-based cache of decompressed bricks with per-size free stacks.

The pool is a flat label array carved into *base elements* of 2**3 voxels.
A brick decoded to LOD ``t`` occupies a block of ``8**(N-t-1)`` contiguous
base elements (size class ``N-t-1``); labels inside a block stay in Morton
order, exactly as the decoder emits them, so no re-layout happens on store.

Freed blocks go onto one stack per size class and are only ever reused for
that class.  When a stack is empty, fresh blocks are carved by advancing a
top pointer.  If the pool is exhausted, the cache rebuilds: all blocks and
stacks are cleared and every brick visible this frame is decoded again,
which also defragments the pool.

Frames run in two phases: during rendering the cache is read-only apart
from idempotent usage-flag writes; `end_frame_assign` then mutates the
structure as a single owner.  The coarsest LOD (t = N) is never cached;
its label ships with every brick's palette.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import CacheCapacityError

INVISIBLE = -1

VOXELS_PER_ELEMENT = 8
BYTES_PER_ELEMENT = VOXELS_PER_ELEMENT * 4


@dataclass
class CacheStats:
    evictions: int = 0
    rebuilds: int = 0
    decodes: int = 0
    decode_seconds: float = 0.0
    decoded_bytes: int = 0

    @property
    def decode_bytes_per_second(self) -> float:
        return self.decoded_bytes / self.decode_seconds if self.decode_seconds else 0.0


class BrickCache:
    """Residency manager for decoded bricks of one volume."""

    def __init__(self, num_bricks: int, brick_log2: int, pool_bytes: int = 1 << 30):
        if brick_log2 < 1:
            raise ValueError("bricks must span at least 2 voxels per axis")
        self.num_bricks = num_bricks
        self.brick_log2 = brick_log2
        self.capacity = max(1, pool_bytes // BYTES_PER_ELEMENT)
        self.pool = np.empty(self.capacity * VOXELS_PER_ELEMENT, dtype=np.uint32)
        self.top = 0
        # one free stack per block size class l (block = 8**l base elements)
        self.free_stacks: dict[int, list[int]] = {l: [] for l in range(brick_log2)}
        self.block_start = np.full(num_bricks, -1, dtype=np.int64)
        self.resident_lod = np.full(num_bricks, INVISIBLE, dtype=np.int8)
        self.usage = np.full(num_bricks, INVISIBLE, dtype=np.int8)
        self.stats = CacheStats()

    # -- geometry -------------------------------------------------------------

    def size_class(self, lod: int) -> int:
        if not 0 <= lod < self.brick_log2:
            raise ValueError(f"cacheable LODs are [0, {self.brick_log2 - 1}], got {lod}")
        return self.brick_log2 - lod - 1

    def block_elements(self, lod: int) -> int:
        return 8 ** self.size_class(lod)

    # -- frame phases -----------------------------------------------------------

    def begin_frame(self) -> None:
        """Reset all usage flags to invisible."""
        self.usage.fill(INVISIBLE)

    def mark_used(self, brick: int, lod: int) -> None:
        """Flag a brick as sampled this frame at its required LOD.

        The LOD depends only on the brick and the camera, so concurrent
        marks write identical values and need no synchronization.
        """
        self.usage[brick] = lod

    def lookup(self, brick: int):
        """(block start, resident LOD) or None; None means fall back to the
        palette's coarsest label and file a request."""
        lod = self.resident_lod[brick]
        if lod == INVISIBLE:
            return None
        return int(self.block_start[brick]), int(lod)

    def brick_view(self, brick: int) -> np.ndarray:
        """Morton-ordered labels of a resident brick."""
        start, lod = self.lookup(brick)
        n = self.block_elements(lod) * VOXELS_PER_ELEMENT
        off = start * VOXELS_PER_ELEMENT
        return self.pool[off : off + n]

    # -- assignment -------------------------------------------------------------

    def _free_block(self, brick: int) -> None:
        lod = int(self.resident_lod[brick])
        self.free_stacks[self.size_class(lod)].append(int(self.block_start[brick]))
        self.block_start[brick] = -1
        self.resident_lod[brick] = INVISIBLE

    def _allocate(self, size_class: int) -> int | None:
        stack = self.free_stacks[size_class]
        if stack:
            return stack.pop()
        size = 8**size_class
        if self.top + size > self.capacity:
            return None
        start = self.top
        self.top += size
        return start

    def _store(self, brick: int, lod: int, start: int, decode: Callable[[int, int], np.ndarray]) -> None:
        t0 = time.perf_counter()
        labels = decode(brick, lod)
        self.stats.decode_seconds += time.perf_counter() - t0
        self.stats.decodes += 1
        n = self.block_elements(lod) * VOXELS_PER_ELEMENT
        if labels.size != n:
            raise ValueError(f"decode returned {labels.size} labels, block holds {n}")
        off = start * VOXELS_PER_ELEMENT
        self.pool[off : off + n] = labels
        self.stats.decoded_bytes += n * 4
        self.block_start[brick] = start
        self.resident_lod[brick] = lod

    def end_frame_assign(
        self,
        requests: Iterable[tuple[int, int]],
        decode: Callable[[int, int], np.ndarray],
    ) -> list[tuple[int, int]]:
        """Evict unused bricks, place requested ones, decode into their blocks.

        Returns the (brick, lod) pairs actually placed.  On pool exhaustion
        the cache is rebuilt and every brick visible this frame is decoded
        again at its flagged LOD, the pending requests included.
        """
        requests = sorted(set(requests))
        for brick, lod in requests:
            if not 0 <= lod < self.brick_log2:
                raise ValueError(f"cannot cache LOD {lod} of brick {brick}")

        for brick in np.flatnonzero((self.resident_lod != INVISIBLE) & (self.usage == INVISIBLE)):
            self._free_block(int(brick))
            self.stats.evictions += 1

        placed: list[tuple[int, int]] = []
        for brick, lod in requests:
            if self.resident_lod[brick] == lod:
                continue
            if self.resident_lod[brick] != INVISIBLE:
                self._free_block(brick)
            start = self._allocate(self.size_class(lod))
            if start is None:
                return self._rebuild(requests, decode)
            self._store(brick, lod, start, decode)
            placed.append((brick, lod))
        return placed

    def _rebuild(self, requests, decode) -> list[tuple[int, int]]:
        self.stats.rebuilds += 1
        self.top = 0
        for stack in self.free_stacks.values():
            stack.clear()
        self.block_start.fill(-1)
        self.resident_lod.fill(INVISIBLE)
        want = {brick: lod for brick, lod in requests}
        for brick in np.flatnonzero(self.usage != INVISIBLE):
            lod = int(self.usage[brick])
            if lod < self.brick_log2:  # the coarsest LOD is never cached
                want.setdefault(int(brick), lod)
        placed = []
        for brick in sorted(want):
            lod = want[brick]
            start = self._allocate(self.size_class(lod))
            if start is None:
                need = sum(self.block_elements(l) for l in want.values())
                raise CacheCapacityError(
                    f"visible set needs {need} base elements, pool holds {self.capacity}"
                )
            self._store(brick, lod, start, decode)
            placed.append((brick, lod))
        return placed

    # -- reporting -------------------------------------------------------------

    def occupancy(self) -> dict:
        free = sum(len(s) * 8**l for l, s in self.free_stacks.items())
        return {
            "capacity_elements": self.capacity,
            "allocated_elements": self.top,
            "free_stack_elements": free,
            "active_elements": self.top - free,
            "resident_bricks": int((self.resident_lod != INVISIBLE).sum()),
        }
