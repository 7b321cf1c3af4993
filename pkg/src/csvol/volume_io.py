"""Raw volume ingestion, synthetic test volumes, and the paletting baseline.

Volumes are numpy arrays indexed (z, y, x) in C order, which matches the
on-disk convention: a dense little-endian label array with x fastest, plus
a text sidecar declaring dimensions and label width.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import ConfigError, IngestionError

_WIDTH_DTYPES = {16: np.uint16, 32: np.uint32}


def _sidecar_path(path: str | os.PathLike) -> Path:
    return Path(str(path) + ".meta")


def load_raw(path: str | os.PathLike, meta_path: str | os.PathLike | None = None):
    """Read a raw label volume; returns ((z,y,x) uint32 array, width bits).

    16-bit files are widened to 32 bits internally; the width is returned so
    callers can restore it on save.
    """
    meta_path = Path(meta_path) if meta_path else _sidecar_path(path)
    if not meta_path.exists():
        raise IngestionError(f"missing sidecar metadata file {meta_path}")
    dims = None
    width = None
    for line in meta_path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        key = key.strip().lower()
        if key == "dims":
            parts = value.split()
            if len(parts) != 3:
                raise IngestionError(f"dims needs three values, got {value!r}")
            dims = tuple(int(p) for p in parts)
        elif key == "width":
            width = int(value)
    if dims is None or width is None:
        raise IngestionError(f"sidecar {meta_path} must declare dims and width")
    if width not in _WIDTH_DTYPES:
        raise IngestionError(f"label width must be 16 or 32 bits, got {width}")
    x, y, z = dims
    expected = x * y * z * (width // 8)
    actual = os.path.getsize(path)
    if actual != expected:
        raise IngestionError(
            f"{path}: expected {expected} bytes for dims {dims} at {width} bits, found {actual}"
        )
    flat = np.fromfile(path, dtype=np.dtype(_WIDTH_DTYPES[width]).newbyteorder("<"))
    volume = flat.reshape(z, y, x)
    return volume.astype(np.uint32, copy=False), width


def save_raw(volume: np.ndarray, path: str | os.PathLike, width: int = 32) -> None:
    """Write a (z,y,x) volume plus its sidecar, narrowing to ``width`` bits."""
    if width not in _WIDTH_DTYPES:
        raise IngestionError(f"label width must be 16 or 32 bits, got {width}")
    if width == 16 and volume.size and int(volume.max()) > 0xFFFF:
        raise IngestionError("labels exceed 16 bits; save with width=32")
    z, y, x = volume.shape
    arr = volume.astype(np.dtype(_WIDTH_DTYPES[width]).newbyteorder("<"), copy=False)
    arr.tofile(path)
    _sidecar_path(path).write_text(f"dims = {x} {y} {z}\nwidth = {width}\n")


def gen_synthetic(seed: int, dims: tuple[int, int, int], regions: int) -> np.ndarray:
    """Seeded multi-source region growth over a (x,y,z) dims box.

    Seeds are scattered uniformly, then grown breadth-first over the
    6-neighborhood; contested voxels go to the lowest label.  Every region
    is connected by construction and every label in [0, regions) occurs.
    """
    x, y, z = dims
    total = x * y * z
    if min(dims) < 1:
        raise ConfigError(f"dims must be positive, got {dims}")
    if regions < 1:
        raise ConfigError(f"need at least one region, got {regions}")
    if regions > total:
        raise ConfigError(f"{regions} regions cannot fit {total} voxels")
    if regions == 1:
        return np.zeros((z, y, x), dtype=np.uint32)

    rng = np.random.default_rng(seed)
    chosen = np.unique(rng.integers(0, total, int(regions * 1.3) + 16))
    while chosen.size < regions:
        chosen = np.union1d(chosen, rng.integers(0, total, regions))
    flat_seeds = rng.permutation(chosen)[:regions]

    none = np.iinfo(np.int32).max
    lab = np.full(total, none, dtype=np.int32).reshape(z, y, x)
    lab.ravel()[flat_seeds] = np.arange(regions)

    while True:
        cand = np.full_like(lab, none)
        np.minimum(cand[1:, :, :], lab[:-1, :, :], out=cand[1:, :, :])
        np.minimum(cand[:-1, :, :], lab[1:, :, :], out=cand[:-1, :, :])
        np.minimum(cand[:, 1:, :], lab[:, :-1, :], out=cand[:, 1:, :])
        np.minimum(cand[:, :-1, :], lab[:, 1:, :], out=cand[:, :-1, :])
        np.minimum(cand[:, :, 1:], lab[:, :, :-1], out=cand[:, :, 1:])
        np.minimum(cand[:, :, :-1], lab[:, :, 1:], out=cand[:, :, :-1])
        grow = (lab == none) & (cand != none)
        if not grow.any():
            break
        lab[grow] = cand[grow]
    return lab.astype(np.uint32)


def palette_baseline_size(volume: np.ndarray, block_side: int = 8) -> int:
    """Bytes needed by per-block palette-plus-index storage.

    Each ``block_side**3`` block stores its distinct labels (4 bytes each)
    plus one palette index per voxel at ceil(log2(palette size)) bits,
    minimum 1 bit.  The volume is edge-padded so the block side divides
    every dimension.
    """
    z, y, x = volume.shape
    pads = [(0, (-d) % block_side) for d in (z, y, x)]
    padded = np.pad(volume, pads, mode="edge") if any(p[1] for p in pads) else volume
    pz, py, px = padded.shape
    blocks = (
        padded.reshape(pz // block_side, block_side, py // block_side, block_side, px // block_side, block_side)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(-1, block_side**3)
    )
    blocks = np.sort(blocks, axis=1)
    distinct = 1 + (np.diff(blocks, axis=1) != 0).sum(axis=1)
    bits = np.maximum(1, np.ceil(np.log2(distinct)).astype(np.int64))
    voxels = block_side**3
    index_bytes = (voxels * bits + 7) // 8
    return int((4 * distinct + index_bytes).sum())
