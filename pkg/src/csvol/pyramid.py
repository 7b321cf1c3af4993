"""Per-brick resolution pyramid with most-frequent-label downsampling.

Levels run from L0 (full resolution, ``b**3`` labels) up to LN (a single
root label).  Each parent carries the most frequent label of its 8 children;
ties go to the child occurring first in Morton child order.  A parallel set
of flags marks nodes whose entire leaf subtree holds one label.

Pyramid levels are kept as flat arrays in Morton order, which makes
downsampling a reshape: the 8 children of parent ``m`` are exactly entries
``8*m .. 8*m+7`` of the child level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .morton import BrickConfig, grid_to_morton, morton_to_grid


@dataclass
class Pyramid:
    """Resolution stack of one brick.

    ``levels[l]`` holds the Morton-ordered labels of level l,
    ``constant[l]`` the matching subtree-is-constant flags.
    """

    config: BrickConfig
    levels: list[np.ndarray]
    constant: list[np.ndarray]

    def level_grid(self, level: int) -> np.ndarray:
        """Level ``level`` as a (z, y, x) cube, for inspection and tests."""
        return morton_to_grid(self.levels[level], self.config.level_side(level))

    @property
    def root_label(self) -> int:
        return int(self.levels[-1][0])


def _mode_first(children: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Most frequent value per row of an (n, 8) array, first-occurrence ties.

    Returns (winner labels, all-equal mask).  Picking argmax over per-slot
    frequency counts resolves ties to the earliest slot, which is the first
    occurrence of a maximal label.
    """
    counts = np.zeros(children.shape, dtype=np.uint8)
    for j in range(8):
        counts += children == children[:, j : j + 1]
    winner = np.argmax(counts, axis=1)
    labels = children[np.arange(children.shape[0]), winner]
    return labels, counts[:, 0] == 8


def _fold_level(child_labels: np.ndarray, child_const: np.ndarray):
    groups = child_labels.reshape(-1, 8)
    labels, uniform = _mode_first(groups)
    const = uniform & np.all(child_const.reshape(-1, 8), axis=1)
    return labels, const


def build_pyramid(brick_labels: np.ndarray, config: BrickConfig) -> Pyramid:
    """Build the full resolution stack for one Morton-ordered brick."""
    n = config.side**3
    if brick_labels.shape != (n,):
        raise ValueError(
            f"brick has {brick_labels.shape} entries, expected ({n},) for b={config.side}"
        )
    levels = [np.ascontiguousarray(brick_labels, dtype=np.uint32)]
    constant = [np.ones(n, dtype=bool)]
    for _ in range(config.brick_log2):
        labels, const = _fold_level(levels[-1], constant[-1])
        levels.append(labels)
        constant.append(const)
    return Pyramid(config, levels, constant)


def downsample_level(child_grid: np.ndarray) -> np.ndarray:
    """Halve a (z, y, x) label grid with the same mode-with-tie rule.

    Works on any grid with even sides (not only cubes); used both by the
    pyramid builder's tests and for whole-volume LOD references.
    """
    nz, ny, nx = child_grid.shape
    if nz % 2 or ny % 2 or nx % 2:
        raise ValueError(f"grid sides must be even, got {child_grid.shape}")
    groups = (
        child_grid.reshape(nz // 2, 2, ny // 2, 2, nx // 2, 2)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(-1, 8)
    )
    labels, _ = _mode_first(groups)
    return labels.reshape(nz // 2, ny // 2, nx // 2)


def downsample_volume(volume: np.ndarray, steps: int) -> np.ndarray:
    """Apply :func:`downsample_level` ``steps`` times."""
    out = volume
    for _ in range(steps):
        out = downsample_level(out)
    return out


def pyramid_from_grid(brick_grid: np.ndarray, config: BrickConfig) -> Pyramid:
    """Convenience wrapper taking a (z, y, x) brick cube."""
    return build_pyramid(grid_to_morton(brick_grid), config)
