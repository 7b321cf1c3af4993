"""Morton Z-curve indexing and brick-local coordinate math.

The bit convention used everywhere in this package: x occupies the
least-significant position of each 3-bit group, then y, then z.  Node
(1,0,0) therefore has Z-index 1 and (0,0,1) has Z-index 4.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Magic constants for spreading 21 coordinate bits over a 63-bit word.
_SPREAD_MASKS = (
    (0x1F00000000FFFF, 32),
    (0x1F0000FF0000FF, 16),
    (0x100F00F00F00F00F, 8),
    (0x10C30C30C30C30C3, 4),
    (0x1249249249249249, 2),
)

AXES = ("x", "y", "z")


@dataclass(frozen=True)
class BrickConfig:
    """Geometry of one cubic brick: side ``b = 2**brick_log2`` voxels."""

    brick_log2: int

    def __post_init__(self):
        if not 1 <= self.brick_log2 <= 7:
            raise ValueError(f"brick_log2 must be in [1, 7], got {self.brick_log2}")

    @property
    def side(self) -> int:
        return 1 << self.brick_log2

    @property
    def num_levels(self) -> int:
        return self.brick_log2 + 1

    def level_side(self, level: int) -> int:
        """Nodes per axis in the level-``level`` grid of this brick."""
        return 1 << (self.brick_log2 - level)


@dataclass(frozen=True)
class NodeCoord:
    """Coordinates of one node within a level grid of a brick."""

    x: int
    y: int
    z: int
    level: int


def _part1by2(v: int) -> int:
    for mask, shift in _SPREAD_MASKS:
        v = (v | (v << shift)) & mask
    return v


def morton_encode(x: int, y: int, z: int) -> int:
    """Interleave coordinate bits into a Z-curve index (x lowest)."""
    return _part1by2(x) | (_part1by2(y) << 1) | (_part1by2(z) << 2)


def morton_decode(index: int) -> tuple[int, int, int]:
    """Inverse of :func:`morton_encode`."""
    return (
        _unspread(index),
        _unspread(index >> 1),
        _unspread(index >> 2),
    )


def _unspread(v: int) -> int:
    v &= 0x1249249249249249
    v = (v ^ (v >> 2)) & 0x10C30C30C30C30C3
    v = (v ^ (v >> 4)) & 0x100F00F00F00F00F
    v = (v ^ (v >> 8)) & 0x1F0000FF0000FF
    v = (v ^ (v >> 16)) & 0x1F00000000FFFF
    v = (v ^ (v >> 32)) & 0x1FFFFF
    return v


def morton_encode_array(x: np.ndarray, y: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Vectorized :func:`morton_encode` over uint64 arrays."""
    out = _part1by2_array(x)
    out |= _part1by2_array(y) << np.uint64(1)
    out |= _part1by2_array(z) << np.uint64(2)
    return out


def _part1by2_array(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64)
    for mask, shift in _SPREAD_MASKS:
        v = (v | (v << np.uint64(shift))) & np.uint64(mask)
    return v


def outside_neighbor(coord: NodeCoord, axis: str, config: BrickConfig) -> NodeCoord | None:
    """Same-level neighbor along ``axis``, away from the 2^3 sibling block.

    The direction is implied by coordinate parity: an even coordinate sits on
    the low side of its sibling pair, so "outside" is -1; odd means +1.
    Returns None when the neighbor would leave the brick; neighbors in other
    bricks are never referenced.
    """
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}, got {axis!r}")
    side = config.level_side(coord.level)
    c = getattr(coord, axis)
    n = c - 1 if c % 2 == 0 else c + 1
    if n < 0 or n >= side:
        return None
    vals = {"x": coord.x, "y": coord.y, "z": coord.z, axis: n}
    return NodeCoord(vals["x"], vals["y"], vals["z"], coord.level)


_GRID_CODE_CACHE: dict[int, np.ndarray] = {}


def grid_morton_codes(side: int) -> np.ndarray:
    """Z-index of every cell of a ``side**3`` grid, in C (z,y,x) raster order.

    Cached per side; used to shuffle grids between raster and Morton layouts:
    ``morton_flat[codes] = grid.ravel()`` and ``grid.ravel()[:] = morton_flat[codes]``.
    """
    codes = _GRID_CODE_CACHE.get(side)
    if codes is None:
        r = np.arange(side, dtype=np.uint64)
        z, y, x = np.meshgrid(r, r, r, indexing="ij")
        codes = morton_encode_array(x.ravel(), y.ravel(), z.ravel())
        _GRID_CODE_CACHE[side] = codes
    return codes


def grid_to_morton(grid: np.ndarray) -> np.ndarray:
    """Flatten a cubic (z,y,x) grid into Morton order."""
    side = grid.shape[0]
    if grid.shape != (side, side, side):
        raise ValueError(f"expected a cubic grid, got shape {grid.shape}")
    codes = grid_morton_codes(side)
    out = np.empty(side**3, dtype=grid.dtype)
    out[codes] = grid.ravel()
    return out


def morton_to_grid(flat: np.ndarray, side: int) -> np.ndarray:
    """Expand a Morton-ordered flat array back into a (z,y,x) grid."""
    if flat.shape != (side**3,):
        raise ValueError(f"expected {side**3} entries, got shape {flat.shape}")
    codes = grid_morton_codes(side)
    return flat[codes].reshape(side, side, side)
