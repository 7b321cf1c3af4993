"""Software raymarcher over cached compressed bricks.

One ray per pixel, front-to-back alpha compositing with early termination,
and empty-space skipping on brick granularity via palettes.  Bricks are
sampled at their resident level of detail; bricks missing from the cache
render with their coarsest label (palette entry 0) and are requested for
the next frame, so a moving camera refines with a one-frame lag.

Sampling positions are brick-local: within each ray/brick segment, samples
sit at ``t_enter + (k + 0.5) * h`` with ``h`` half the voxel extent of the
sampled level.  Because the phase restarts per brick, skipping an invisible
brick cannot move any sample in a visible one, which keeps empty-space
skipping pixel-exact.

The reference renderer used by the tests marches identically but reads the
raw uncompressed volume at full resolution: no cache, no LOD, visibility
from a brute-force voxel scan.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit, prange

from .cache import BrickCache
from .container import CsvContainer
from .errors import ConfigError

_T_MIN = 0.01  # terminate once accumulated alpha reaches 0.99


@dataclass(frozen=True)
class Camera:
    position: tuple[float, float, float]
    forward: tuple[float, float, float]
    up: tuple[float, float, float]
    fov: float = math.pi / 3  # vertical, radians
    width: int = 256
    height: int = 256

    def __post_init__(self):
        if not 0 < self.fov < math.pi:
            raise ConfigError(f"fov must be in (0, pi), got {self.fov}")
        if self.width < 1 or self.height < 1:
            raise ConfigError("image must be at least 1x1")
        f = np.asarray(self.forward, dtype=np.float64)
        u = np.asarray(self.up, dtype=np.float64)
        norm = np.linalg.norm(f)
        if norm == 0:
            raise ConfigError("forward vector must be non-zero")
        f = f / norm
        u = u - f * float(u @ f)
        norm = np.linalg.norm(u)
        if norm < 1e-12:
            raise ConfigError("up must not be collinear with forward")
        u = u / norm
        object.__setattr__(self, "forward", tuple(f))
        object.__setattr__(self, "up", tuple(u))

    @property
    def right(self) -> tuple[float, float, float]:
        # up x forward: (right, up, forward) is right-handed and a voxel at
        # larger screen-right coordinate lands further right in the image.
        f = np.asarray(self.forward)
        u = np.asarray(self.up)
        return tuple(np.cross(u, f))


@dataclass(frozen=True)
class TransferFunction:
    """Label to color/opacity mapping; colors default to a label hash."""

    default_alpha: float = 1.0
    overrides: dict = field(default_factory=dict)  # label -> (r, g, b, a)

    def alpha(self, label: int) -> float:
        ov = self.overrides.get(int(label))
        return float(ov[3]) if ov is not None else self.default_alpha

    def visible(self, label: int) -> bool:
        return self.alpha(label) > 0.0

    def color(self, label: int) -> tuple[float, float, float]:
        ov = self.overrides.get(int(label))
        if ov is not None:
            return float(ov[0]), float(ov[1]), float(ov[2])
        return _hash_color_py(int(label))

    def tables(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.overrides:
            return np.empty(0, np.uint32), np.empty((0, 4), np.float64)
        labels = np.array(sorted(self.overrides), dtype=np.uint32)
        rgba = np.array([self.overrides[int(l)] for l in labels], dtype=np.float64)
        return labels, rgba


def _hash_color_py(label: int) -> tuple[float, float, float]:
    h = label & 0xFFFFFFFF
    h = ((h ^ (h >> 16)) * 0x7FEB352D) & 0xFFFFFFFF
    h = ((h ^ (h >> 15)) * 0x846CA68B) & 0xFFFFFFFF
    h = h ^ (h >> 16)
    return (
        0.2 + 0.8 * (h & 0xFF) / 255.0,
        0.2 + 0.8 * ((h >> 8) & 0xFF) / 255.0,
        0.2 + 0.8 * ((h >> 16) & 0xFF) / 255.0,
    )


@dataclass(frozen=True)
class RenderOptions:
    shadows: bool = False
    empty_space_skipping: bool = True
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    light_direction: tuple[float, float, float] = (0.35, 0.65, 0.674)  # toward the light
    shadow_opacity_threshold: float = 0.5
    ambient: float = 0.3
    forced_lod: int | None = None


@dataclass
class FrameRequest:
    """Bricks the renderer wants decoded before the next frame."""

    requests: list[tuple[int, int]] = field(default_factory=list)
    detail_demand_bytes: int = 0

    def __bool__(self) -> bool:
        return bool(self.requests)


# ---------------------------------------------------------------------------
# LOD selection and visibility


def select_lod(distance: float, voxel_extent: float, camera: Camera, max_lod: int) -> int:
    """Level where one voxel maps to roughly one pixel at this distance."""
    ratio = distance * 2.0 * math.tan(camera.fov / 2.0) / (camera.height * voxel_extent)
    return min(max(math.ceil(math.log2(max(1.0, ratio))), 0), max_lod)


def desired_lods(container: CsvContainer, camera: Camera) -> np.ndarray:
    """Per-brick LOD from the brick-center distance; camera-dependent only."""
    meta = container.meta
    b = meta.brick_side
    gx, gy, gz = meta.grid_dims
    idx = np.arange(meta.brick_count)
    cx = (idx % gx + 0.5) * b
    cy = (idx // gx % gy + 0.5) * b
    cz = (idx // (gx * gy) + 0.5) * b
    pos = np.asarray(camera.position)
    d = np.sqrt((cx - pos[0]) ** 2 + (cy - pos[1]) ** 2 + (cz - pos[2]) ** 2)
    ratio = np.maximum(1.0, d * 2.0 * math.tan(camera.fov / 2.0) / camera.height)
    lod = np.ceil(np.log2(ratio)).astype(np.int64)
    return np.clip(lod, 0, meta.brick_log2).astype(np.uint8)


def brick_visible(palette: np.ndarray, tf: TransferFunction) -> bool:
    """True iff any palette label maps to positive opacity; no decode needed."""
    if tf.default_alpha > 0.0:
        if not tf.overrides:
            return True
        hidden = np.array([l for l, c in tf.overrides.items() if c[3] <= 0], dtype=np.uint32)
        return bool((~np.isin(palette, hidden)).any())
    shown = np.array([l for l, c in tf.overrides.items() if c[3] > 0], dtype=np.uint32)
    if shown.size == 0:
        return False
    return bool(np.isin(palette, shown).any())


def visibility_mask(container: CsvContainer, tf: TransferFunction) -> np.ndarray:
    """Vectorized :func:`brick_visible` over the whole brick directory."""
    pal = container.palette_blob
    labels, rgba = tf.tables()
    alpha = np.full(pal.size, tf.default_alpha)
    if labels.size:
        idx = np.searchsorted(labels, pal)
        idx_c = np.minimum(idx, labels.size - 1)
        hit = labels[idx_c] == pal
        alpha[hit] = rgba[idx_c[hit], 3]
    vis_entry = (alpha > 0.0).astype(np.uint8)
    offs = container.directory["palette_off"].astype(np.int64)
    summed = np.add.reduceat(vis_entry, offs) if pal.size else np.zeros(0, np.uint8)
    return summed > 0


def visibility_mask_raw(volume: np.ndarray, tf: TransferFunction, brick_log2: int) -> np.ndarray:
    """Brute-force per-brick visibility by scanning raw voxels."""
    b = 1 << brick_log2
    z, y, x = volume.shape
    gx, gy, gz = -(-x // b), -(-y // b), -(-z // b)
    labels, rgba = tf.tables()
    alpha = np.full(volume.shape, tf.default_alpha)
    if labels.size:
        idx = np.searchsorted(labels, volume.ravel())
        idx_c = np.minimum(idx, labels.size - 1)
        hit = labels[idx_c] == volume.ravel()
        a = alpha.ravel()
        a[hit] = rgba[idx_c[hit], 3]
        alpha = a.reshape(volume.shape)
    vis = np.zeros(gx * gy * gz, dtype=bool)
    for bz in range(gz):
        for by in range(gy):
            for bx in range(gx):
                block = alpha[bz * b : (bz + 1) * b, by * b : (by + 1) * b, bx * b : (bx + 1) * b]
                vis[(bz * gy + by) * gx + bx] = bool((block > 0).any())
    return vis


# ---------------------------------------------------------------------------
# Kernels


@njit(cache=True, inline="always")
def _hash_color(label):
    h = np.int64(label) & 0xFFFFFFFF
    h = ((h ^ (h >> 16)) * 0x7FEB352D) & 0xFFFFFFFF
    h = ((h ^ (h >> 15)) * 0x846CA68B) & 0xFFFFFFFF
    h = h ^ (h >> 16)
    r = 0.2 + 0.8 * (h & 0xFF) / 255.0
    g = 0.2 + 0.8 * ((h >> 8) & 0xFF) / 255.0
    bl = 0.2 + 0.8 * ((h >> 16) & 0xFF) / 255.0
    return r, g, bl


@njit(cache=True, inline="always")
def _tf_lookup(label, default_alpha, ov_labels, ov_rgba):
    lo = 0
    hi = ov_labels.shape[0]
    while lo < hi:
        mid = (lo + hi) >> 1
        if ov_labels[mid] < label:
            lo = mid + 1
        else:
            hi = mid
    if lo < ov_labels.shape[0] and ov_labels[lo] == label:
        return ov_rgba[lo, 0], ov_rgba[lo, 1], ov_rgba[lo, 2], ov_rgba[lo, 3]
    r, g, b = _hash_color(label)
    return r, g, b, default_alpha


@njit(cache=True, inline="always")
def _aabb(ox, oy, oz, dx, dy, dz, X, Y, Z):
    tmin = -np.inf
    tmax = np.inf
    for axis in range(3):
        if axis == 0:
            o, d, bound = ox, dx, X
        elif axis == 1:
            o, d, bound = oy, dy, Y
        else:
            o, d, bound = oz, dz, Z
        if abs(d) < 1e-300:
            if o < 0.0 or o > bound:
                return 1.0, -1.0
        else:
            t1 = (0.0 - o) / d
            t2 = (bound - o) / d
            if t1 > t2:
                t1, t2 = t2, t1
            if t1 > tmin:
                tmin = t1
            if t2 < tmax:
                tmax = t2
    return tmin, tmax


@njit(cache=True, inline="always")
def _sample_label(
    mode, volume, pool, block_start, root_label, brick, slod, bx, by, bz, vx, vy, vz, b, xmax, ymax, zmax
):
    if mode == 1:
        if vx > xmax:
            vx = xmax
        if vy > ymax:
            vy = ymax
        if vz > zmax:
            vz = zmax
        return volume[vz, vy, vx]
    if slod >= 255:
        return root_label[brick]
    lx = (vx - bx * b) >> slod
    ly = (vy - by * b) >> slod
    lz = (vz - bz * b) >> slod
    m = _spread3r(lx) | (_spread3r(ly) << 1) | (_spread3r(lz) << 2)
    return pool[block_start[brick] * 8 + m]


@njit(cache=True, inline="always")
def _spread3r(v):
    v = (v | (v << 32)) & 0x1F00000000FFFF
    v = (v | (v << 16)) & 0x1F0000FF0000FF
    v = (v | (v << 8)) & 0x100F00F00F00F00F
    v = (v | (v << 4)) & 0x10C30C30C30C30C3
    v = (v | (v << 2)) & 0x1249249249249249
    return v


@njit(cache=True)
def _shadow_transmittance(
    sx,
    sy,
    sz,
    lx,
    ly,
    lz,
    X,
    Y,
    Z,
    b,
    gx,
    gy,
    gz,
    N,
    skip,
    visible,
    mode,
    volume,
    pool,
    block_start,
    resident_lod,
    root_label,
    desired,
    usage,
    requested,
    default_alpha,
    ov_labels,
    ov_rgba,
):
    tmin, tmax = _aabb(sx, sy, sz, lx, ly, lz, X, Y, Z)
    t0 = tmin if tmin > 0.0 else 0.0
    if tmax <= t0:
        return 1.0
    px = sx + lx * (t0 + 1e-9)
    py = sy + ly * (t0 + 1e-9)
    pz = sz + lz * (t0 + 1e-9)
    bx = int(px // b)
    by = int(py // b)
    bz = int(pz // b)
    if bx < 0:
        bx = 0
    if bx >= gx:
        bx = gx - 1
    if by < 0:
        by = 0
    if by >= gy:
        by = gy - 1
    if bz < 0:
        bz = 0
    if bz >= gz:
        bz = gz - 1
    stepx = 1 if lx > 0 else -1
    stepy = 1 if ly > 0 else -1
    stepz = 1 if lz > 0 else -1
    tdx = b / abs(lx) if lx != 0 else np.inf
    tdy = b / abs(ly) if ly != 0 else np.inf
    tdz = b / abs(lz) if lz != 0 else np.inf
    tmx = ((bx + (1 if lx > 0 else 0)) * b - sx) / lx if lx != 0 else np.inf
    tmy = ((by + (1 if ly > 0 else 0)) * b - sy) / ly if ly != 0 else np.inf
    tmz = ((bz + (1 if lz > 0 else 0)) * b - sz) / lz if lz != 0 else np.inf
    T = 1.0
    t = t0
    while t < tmax - 1e-9 and T > _T_MIN:
        te = tmx
        if tmy < te:
            te = tmy
        if tmz < te:
            te = tmz
        if tmax < te:
            te = tmax
        brick = (bz * gy + by) * gx + bx
        vis = visible[brick]
        if vis or skip == 0:
            if mode == 0 and vis:
                usage[brick] = desired[brick]
                rl = resident_lod[brick]
                if desired[brick] < N and rl != desired[brick]:
                    requested[brick] = 1
            if vis:
                if mode == 1:
                    slod = 0
                else:
                    rl = resident_lod[brick]
                    slod = rl if rl >= 0 else 255
                h = 0.5 * b if slod >= 255 else 0.5 * (1 << slod)
                k = 0
                ts = t + 0.5 * h
                while ts < te and T > _T_MIN:
                    qx = sx + lx * ts
                    qy = sy + ly * ts
                    qz = sz + lz * ts
                    vx = int(qx)
                    vy = int(qy)
                    vz = int(qz)
                    if vx < bx * b:
                        vx = bx * b
                    if vx > bx * b + b - 1:
                        vx = bx * b + b - 1
                    if vy < by * b:
                        vy = by * b
                    if vy > by * b + b - 1:
                        vy = by * b + b - 1
                    if vz < bz * b:
                        vz = bz * b
                    if vz > bz * b + b - 1:
                        vz = bz * b + b - 1
                    lab = _sample_label(
                        mode, volume, pool, block_start, root_label, brick, slod,
                        bx, by, bz, vx, vy, vz, b, int(X) - 1, int(Y) - 1, int(Z) - 1,
                    )
                    _, _, _, a = _tf_lookup(lab, default_alpha, ov_labels, ov_rgba)
                    if a > 0.0:
                        T *= 1.0 - a
                    k += 1
                    ts = t + (k + 0.5) * h
        if te == tmx:
            bx += stepx
            tmx += tdx
            if bx < 0 or bx >= gx:
                break
        elif te == tmy:
            by += stepy
            tmy += tdy
            if by < 0 or by >= gy:
                break
        else:
            bz += stepz
            tmz += tdz
            if bz < 0 or bz >= gz:
                break
        t = te
    return T


@njit(cache=True, parallel=True)
def _render_kernel(
    image,
    W,
    H,
    cam_pos,
    cam_right,
    cam_up,
    cam_fwd,
    tanf,
    X,
    Y,
    Z,
    b,
    gx,
    gy,
    gz,
    N,
    skip,
    shadows,
    shadow_threshold,
    ambient,
    light,
    bg,
    visible,
    mode,
    volume,
    pool,
    block_start,
    resident_lod,
    root_label,
    desired,
    usage,
    requested,
    default_alpha,
    ov_labels,
    ov_rgba,
):
    aspect = W / H
    for py in prange(H):
        for px in range(W):
            u = (2.0 * (px + 0.5) / W - 1.0) * aspect * tanf
            v = (1.0 - 2.0 * (py + 0.5) / H) * tanf
            dx = cam_fwd[0] + u * cam_right[0] + v * cam_up[0]
            dy = cam_fwd[1] + u * cam_right[1] + v * cam_up[1]
            dz = cam_fwd[2] + u * cam_right[2] + v * cam_up[2]
            inv = 1.0 / math.sqrt(dx * dx + dy * dy + dz * dz)
            dx *= inv
            dy *= inv
            dz *= inv
            ox, oy, oz = cam_pos[0], cam_pos[1], cam_pos[2]
            tmin, tmax = _aabb(ox, oy, oz, dx, dy, dz, X, Y, Z)
            t0 = tmin if tmin > 0.0 else 0.0
            cr = 0.0
            cg = 0.0
            cb = 0.0
            T = 1.0
            if tmax > t0:
                pxw = ox + dx * (t0 + 1e-9)
                pyw = oy + dy * (t0 + 1e-9)
                pzw = oz + dz * (t0 + 1e-9)
                bx = int(pxw // b)
                by = int(pyw // b)
                bz = int(pzw // b)
                if bx < 0:
                    bx = 0
                if bx >= gx:
                    bx = gx - 1
                if by < 0:
                    by = 0
                if by >= gy:
                    by = gy - 1
                if bz < 0:
                    bz = 0
                if bz >= gz:
                    bz = gz - 1
                stepx = 1 if dx > 0 else -1
                stepy = 1 if dy > 0 else -1
                stepz = 1 if dz > 0 else -1
                tdx = b / abs(dx) if dx != 0 else np.inf
                tdy = b / abs(dy) if dy != 0 else np.inf
                tdz = b / abs(dz) if dz != 0 else np.inf
                tmx = ((bx + (1 if dx > 0 else 0)) * b - ox) / dx if dx != 0 else np.inf
                tmy = ((by + (1 if dy > 0 else 0)) * b - oy) / dy if dy != 0 else np.inf
                tmz = ((bz + (1 if dz > 0 else 0)) * b - oz) / dz if dz != 0 else np.inf
                t = t0
                while t < tmax - 1e-9 and T > _T_MIN:
                    te = tmx
                    if tmy < te:
                        te = tmy
                    if tmz < te:
                        te = tmz
                    if tmax < te:
                        te = tmax
                    brick = (bz * gy + by) * gx + bx
                    vis = visible[brick]
                    if mode == 0 and vis:
                        usage[brick] = desired[brick]
                        rl = resident_lod[brick]
                        if desired[brick] < N and rl != desired[brick]:
                            requested[brick] = 1
                    if vis or skip == 0:
                        if vis:
                            if mode == 1:
                                slod = 0
                            else:
                                rl = resident_lod[brick]
                                slod = rl if rl >= 0 else 255
                            h = 0.5 * b if slod >= 255 else 0.5 * (1 << slod)
                            k = 0
                            ts = t + 0.5 * h
                            while ts < te and T > _T_MIN:
                                qx = ox + dx * ts
                                qy = oy + dy * ts
                                qz = oz + dz * ts
                                vx = int(qx)
                                vy = int(qy)
                                vz = int(qz)
                                if vx < bx * b:
                                    vx = bx * b
                                if vx > bx * b + b - 1:
                                    vx = bx * b + b - 1
                                if vy < by * b:
                                    vy = by * b
                                if vy > by * b + b - 1:
                                    vy = by * b + b - 1
                                if vz < bz * b:
                                    vz = bz * b
                                if vz > bz * b + b - 1:
                                    vz = bz * b + b - 1
                                lab = _sample_label(
                                    mode, volume, pool, block_start, root_label, brick, slod,
                                    bx, by, bz, vx, vy, vz, b, int(X) - 1, int(Y) - 1, int(Z) - 1,
                                )
                                r, g, bl, a = _tf_lookup(lab, default_alpha, ov_labels, ov_rgba)
                                if a > 0.0:
                                    shade = 1.0
                                    if shadows == 1 and a >= shadow_threshold:
                                        ext = float(b) if slod >= 255 else float(1 << slod)
                                        st = _shadow_transmittance(
                                            qx + light[0] * ext,
                                            qy + light[1] * ext,
                                            qz + light[2] * ext,
                                            light[0],
                                            light[1],
                                            light[2],
                                            X, Y, Z, b, gx, gy, gz, N, skip,
                                            visible, mode, volume, pool, block_start,
                                            resident_lod, root_label, desired, usage,
                                            requested, default_alpha, ov_labels, ov_rgba,
                                        )
                                        shade = ambient + (1.0 - ambient) * st
                                    cr += T * a * shade * r
                                    cg += T * a * shade * g
                                    cb += T * a * shade * bl
                                    T *= 1.0 - a
                                k += 1
                                ts = t + (k + 0.5) * h
                    if te == tmx:
                        bx += stepx
                        tmx += tdx
                        if bx < 0 or bx >= gx:
                            break
                    elif te == tmy:
                        by += stepy
                        tmy += tdy
                        if by < 0 or by >= gy:
                            break
                    else:
                        bz += stepz
                        tmz += tdz
                        if bz < 0 or bz >= gz:
                            break
                    t = te
            image[py, px, 0] = np.float32(cr + T * bg[0])
            image[py, px, 1] = np.float32(cg + T * bg[1])
            image[py, px, 2] = np.float32(cb + T * bg[2])


_DUMMY_VOLUME = np.zeros((1, 1, 1), dtype=np.uint32)
_DUMMY_POOL = np.zeros(1, dtype=np.uint32)
_DUMMY_I64 = np.zeros(1, dtype=np.int64)
_DUMMY_I8 = np.zeros(1, dtype=np.int8)
_DUMMY_U8 = np.zeros(1, dtype=np.uint8)
_DUMMY_U32 = np.zeros(1, dtype=np.uint32)


def _camera_arrays(camera: Camera):
    return (
        np.asarray(camera.position, dtype=np.float64),
        np.asarray(camera.right, dtype=np.float64),
        np.asarray(camera.up, dtype=np.float64),
        np.asarray(camera.forward, dtype=np.float64),
        math.tan(camera.fov / 2.0),
    )


def _light_array(options: RenderOptions) -> np.ndarray:
    light = np.asarray(options.light_direction, dtype=np.float64)
    n = np.linalg.norm(light)
    if n == 0:
        raise ConfigError("light direction must be non-zero")
    return light / n


def render_frame(
    container: CsvContainer,
    cache: BrickCache,
    camera: Camera,
    tf: TransferFunction,
    options: RenderOptions = RenderOptions(),
    root_labels: np.ndarray | None = None,
    visible: np.ndarray | None = None,
) -> tuple[np.ndarray, FrameRequest]:
    """Render one frame against the read-phase cache.

    Returns the float32 image and the request set for the next frame.
    Sampled bricks are flagged in the cache; invisible bricks are skipped
    without decoding.
    """
    meta = container.meta
    if visible is None:
        visible = visibility_mask(container, tf)
    if root_labels is None:
        root_labels = container.root_labels()
    if options.forced_lod is not None:
        desired = np.full(meta.brick_count, options.forced_lod, dtype=np.uint8)
    else:
        desired = desired_lods(container, camera)
    pos, right, up, fwd, tanf = _camera_arrays(camera)
    ov_labels, ov_rgba = tf.tables()
    image = np.empty((camera.height, camera.width, 3), dtype=np.float32)
    touched = np.full(meta.brick_count, -1, dtype=np.int8)
    requested = np.zeros(meta.brick_count, dtype=np.uint8)
    gx, gy, gz = meta.grid_dims
    X, Y, Z = (float(d) for d in meta.dims)
    _render_kernel(
        image,
        camera.width,
        camera.height,
        pos,
        right,
        up,
        fwd,
        tanf,
        X,
        Y,
        Z,
        meta.brick_side,
        gx,
        gy,
        gz,
        meta.brick_log2,
        1 if options.empty_space_skipping else 0,
        1 if options.shadows else 0,
        options.shadow_opacity_threshold,
        options.ambient,
        _light_array(options),
        np.asarray(options.background, dtype=np.float64),
        np.ascontiguousarray(visible),
        0,
        _DUMMY_VOLUME,
        cache.pool,
        cache.block_start,
        cache.resident_lod,
        np.ascontiguousarray(root_labels, dtype=np.uint32),
        desired,
        touched,
        requested,
        float(tf.default_alpha),
        ov_labels,
        ov_rgba,
    )
    for brick in np.flatnonzero(touched >= 0):
        cache.mark_used(int(brick), int(touched[brick]))
    req = [(int(i), int(desired[i])) for i in np.flatnonzero(requested)]
    demand = sum(container.detail_size(i) for i, lod in req if lod == 0)
    return image, FrameRequest(req, demand)


def reference_render(
    volume: np.ndarray,
    camera: Camera,
    tf: TransferFunction,
    options: RenderOptions = RenderOptions(),
    brick_log2: int = 5,
) -> np.ndarray:
    """Oracle renderer over the raw volume at full resolution.

    Identical sampling, compositing and shadow math, but labels come
    straight from the uncompressed array and visibility from a brute-force
    scan; there is no cache and no LOD.
    """
    z, y, x = volume.shape
    b = 1 << brick_log2
    gx, gy, gz = -(-x // b), -(-y // b), -(-z // b)
    visible = visibility_mask_raw(volume, tf, brick_log2)
    pos, right, up, fwd, tanf = _camera_arrays(camera)
    ov_labels, ov_rgba = tf.tables()
    image = np.empty((camera.height, camera.width, 3), dtype=np.float32)
    _render_kernel(
        image,
        camera.width,
        camera.height,
        pos,
        right,
        up,
        fwd,
        tanf,
        float(x),
        float(y),
        float(z),
        b,
        gx,
        gy,
        gz,
        brick_log2,
        1 if options.empty_space_skipping else 0,
        1 if options.shadows else 0,
        options.shadow_opacity_threshold,
        options.ambient,
        _light_array(options),
        np.asarray(options.background, dtype=np.float64),
        np.ascontiguousarray(visible),
        1,
        np.ascontiguousarray(volume, dtype=np.uint32),
        _DUMMY_POOL,
        _DUMMY_I64,
        _DUMMY_I8,
        _DUMMY_U32,
        _DUMMY_U8,
        np.full(gx * gy * gz, -1, dtype=np.int8),
        np.zeros(gx * gy * gz, dtype=np.uint8),
        float(tf.default_alpha),
        ov_labels,
        ov_rgba,
    )
    return image


# ---------------------------------------------------------------------------
# Detail separation and the frame loop


class DetailStore:
    """Budgeted access to the cold detail section of a container.

    Requested level-0 streams are fetched up to ``budget_bytes`` per frame;
    the rest waits for later frames while those bricks decode at level 1.
    Fetched streams are dropped once their brick has been decoded.
    """

    def __init__(self, container: CsvContainer, budget_bytes: int = 8 << 20):
        self.container = container
        self.budget_bytes = budget_bytes
        self.hot: dict[int, np.ndarray] = {}
        self.fetched_bytes_total = 0
        self.deferred_last_frame = 0
        self.fallback_log: list[tuple[int, int]] = []  # (frame, brick)
        self._frame = 0

    def plan(self, requests: list[tuple[int, int]]) -> list[tuple[int, int]]:
        """Fetch detail for level-0 requests within budget; downgrade the rest.

        Returns the adjusted request list handed to the cache: bricks whose
        detail could not be fetched this frame fall back to level 1.
        """
        spent = 0
        deferred = 0
        adjusted: list[tuple[int, int]] = []
        for brick, lod in sorted(set(requests)):
            if lod != 0:
                adjusted.append((brick, lod))
                continue
            size = self.container.detail_size(brick)
            if size == 0 or brick in self.hot:
                adjusted.append((brick, 0))
                continue
            if spent + size <= self.budget_bytes:
                self.hot[brick] = self.container.brick_detail(brick)
                spent += size
                self.fetched_bytes_total += size
                adjusted.append((brick, 0))
            else:
                deferred += 1
                self.fallback_log.append((self._frame, brick))
                if self.container.meta.brick_log2 >= 2:
                    adjusted.append((brick, 1))
        self.deferred_last_frame = deferred
        self._frame += 1
        return adjusted

    def take(self, brick: int) -> np.ndarray | None:
        """Hand the fetched stream to the decoder; it is not kept afterwards."""
        return self.hot.pop(brick, None)


class FrameLoop:
    """Owns one rendering session: cache, detail store, camera and TF."""

    def __init__(
        self,
        container: CsvContainer,
        camera: Camera,
        tf: TransferFunction = TransferFunction(),
        options: RenderOptions = RenderOptions(),
        pool_bytes: int = 1 << 30,
        detail_budget: int = 8 << 20,
    ):
        self.container = container
        self.camera = camera
        self.tf = tf
        self.options = options
        self.cache = BrickCache(container.meta.brick_count, container.meta.brick_log2, pool_bytes)
        self.detail = DetailStore(container, detail_budget)
        self.frame_index = 0
        self.root_labels = container.root_labels()
        self._visible: np.ndarray | None = None
        self._vis_tf: TransferFunction | None = None
        self.last_requests: FrameRequest = FrameRequest()
        self.decoded_bricks = 0
        self.decoded_bytes = 0
        self.decoded_stream_bytes = 0
        self.last_timings: dict[str, float] = {}

    def set_camera(self, camera: Camera) -> None:
        self.camera = camera

    def set_transfer_function(self, tf: TransferFunction) -> None:
        self.tf = tf
        self._visible = None

    def _visibility(self) -> np.ndarray:
        if self._visible is None or self._vis_tf is not self.tf:
            self._visible = visibility_mask(self.container, self.tf)
            self._vis_tf = self.tf
        return self._visible

    def _decode(self, brick: int, lod: int) -> np.ndarray:
        detail = self.detail.take(brick) if lod == 0 else None
        labels = self.container.decode_brick(brick, lod, detail=detail)
        self.decoded_bricks += 1
        self.decoded_bytes += labels.nbytes
        entry = self.container.directory[brick]
        self.decoded_stream_bytes += int(entry["coarse_bytes"])
        if lod == 0:
            self.decoded_stream_bytes += int(entry["detail_bytes"])
        return labels

    def step(self) -> tuple[np.ndarray, dict[str, float]]:
        """Run one frame: render, fetch detail, assign and decode requests.

        Bricks requested here become resident for the next call, realizing
        the one-frame lag.
        """
        t_start = time.perf_counter()
        self.cache.begin_frame()
        image, request = render_frame(
            self.container,
            self.cache,
            self.camera,
            self.tf,
            self.options,
            root_labels=self.root_labels,
            visible=self._visibility(),
        )
        t_ray = time.perf_counter()
        adjusted = self.detail.plan(request.requests)
        t_fetch = time.perf_counter()
        decode_before = self.cache.stats.decode_seconds
        self.cache.end_frame_assign(adjusted, self._decode)
        t_assign = time.perf_counter()
        decode_seconds = self.cache.stats.decode_seconds - decode_before
        self.last_requests = request
        self.frame_index += 1
        self.last_timings = {
            "raymarch": t_ray - t_start,
            "fetch": t_fetch - t_ray,
            "decompress": decode_seconds,
            "assign": (t_assign - t_fetch) - decode_seconds,
            "total": t_assign - t_start,
        }
        return image, self.last_timings

    def stats(self) -> dict:
        occ = self.cache.occupancy()
        return {
            "frame_index": self.frame_index,
            "cache": occ,
            "cache_events": {
                "evictions": self.cache.stats.evictions,
                "rebuilds": self.cache.stats.rebuilds,
                "decodes": self.cache.stats.decodes,
                "decode_bytes_per_second": self.cache.stats.decode_bytes_per_second,
            },
            "decoded_bricks": self.decoded_bricks,
            "decoded_bytes": self.decoded_bytes,
            "decoded_stream_bytes": self.decoded_stream_bytes,
            "detail": {
                "budget_bytes": self.detail.budget_bytes,
                "fetched_bytes_total": self.detail.fetched_bytes_total,
                "deferred_last_frame": self.detail.deferred_last_frame,
                "hot_streams": len(self.detail.hot),
            },
            "pending_requests": len(self.last_requests.requests),
            "detail_demand_bytes": self.last_requests.detail_demand_bytes,
            "timings": self.last_timings,
        }


def image_to_bytes(image: np.ndarray) -> np.ndarray:
    """Quantize a float image to 8-bit RGB."""
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def parse_camera_path(text: str, fov: float, width: int, height: int) -> list[Camera]:
    """Camera script: one ``frame px py pz fx fy fz ux uy uz`` line per frame."""
    cams = []
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 10:
            raise ConfigError(f"camera path line {ln}: expected 10 fields, got {len(parts)}")
        vals = [float(p) for p in parts[1:]]
        cams.append(
            Camera(tuple(vals[0:3]), tuple(vals[3:6]), tuple(vals[6:9]), fov, width, height)
        )
    return cams
