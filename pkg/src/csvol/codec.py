"""Brick encoder/decoder: palette plus operation/stop-bit nibble streams.

A brick is encoded by walking its resolution pyramid coarse to fine, nodes
in Morton order within each level.  Every visited node's 8 children each
get one 4-bit entry ``(stop << 3) | opcode``; children of nodes whose whole
subtree is constant are skipped entirely.  Opcodes, tested in this fixed
order during encoding:

====  ===========================  =========================================
code  name                         assigns the child the label of
====  ===========================  =========================================
0     parent reuse                 its parent node
1-3   neighbor reuse (x, y, z)     the adjacent same-level node outside its
                                   sibling block (the node's parent when the
                                   neighbor is not decoded yet)
4     palette last                 the last used palette entry
5     palette back-reference       palette entry ``i_p - delta - 1``; one
                                   extra payload nibble carries delta [0,15]
6     palette advance              the next palette entry (advances ``i_p``)
====  ===========================  =========================================

The stop bit marks a constant subtree: the decoder fills the node's whole
sub-block and skips its finer levels.  Leaf-level entries always carry
stop = 0.  Entries for children on levels N-1..1 form the coarse stream,
leaf-level entries the detail stream, so full resolution can be fetched
separately.  A fully constant brick has a one-entry palette and two empty
streams.

Decoding is performed in place on a Morton-ordered output array: the node
with Morton index ``m`` on level ``l`` lives at slot ``m * 8**(l - t)``, so
sub-block fills are contiguous slices.  A one-bit-per-slot occupancy bitset
implements the constant-area test, keeping the full 32-bit label range
legal.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numba import njit

from .errors import CorruptStreamError
from .morton import BrickConfig, NodeCoord, morton_decode, morton_encode, outside_neighbor
from .pyramid import Pyramid
from .rans import PRECISION_BITS, STATE_LOWER, TOTAL_FREQ, FrequencyTable, TablePair

OP_PARENT = 0
OP_NEIGHBOR_X = 1
OP_NEIGHBOR_Y = 2
OP_NEIGHBOR_Z = 3
OP_PALETTE_LAST = 4
OP_PALETTE_DELTA = 5
OP_PALETTE_ADVANCE = 6

OP_NAMES = {
    OP_PARENT: "parent",
    OP_NEIGHBOR_X: "neighbor_x",
    OP_NEIGHBOR_Y: "neighbor_y",
    OP_NEIGHBOR_Z: "neighbor_z",
    OP_PALETTE_LAST: "palette_last",
    OP_PALETTE_DELTA: "palette_back",
    OP_PALETTE_ADVANCE: "palette_advance",
}

_STREAM_NAMES = ("coarse", "detail")


@dataclass(frozen=True)
class BrickEncoding:
    """Palette and raw (pre-entropy) nibble streams of one brick."""

    brick_log2: int
    palette: np.ndarray  # uint32, first entry is the coarsest-LOD label
    coarse: np.ndarray  # uint8 nibbles for levels N-1..1
    detail: np.ndarray  # uint8 nibbles for level 0

    @property
    def config(self) -> BrickConfig:
        return BrickConfig(self.brick_log2)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, BrickEncoding)
            and self.brick_log2 == other.brick_log2
            and np.array_equal(self.palette, other.palette)
            and np.array_equal(self.coarse, other.coarse)
            and np.array_equal(self.detail, other.detail)
        )


# ---------------------------------------------------------------------------
# Morton helpers usable inside kernels (mirror of morton.py, scalar int64).

@njit(cache=True, inline="always")
def _spread3(v):
    v = (v | (v << 32)) & 0x1F00000000FFFF
    v = (v | (v << 16)) & 0x1F0000FF0000FF
    v = (v | (v << 8)) & 0x100F00F00F00F00F
    v = (v | (v << 4)) & 0x10C30C30C30C30C3
    v = (v | (v << 2)) & 0x1249249249249249
    return v


@njit(cache=True, inline="always")
def _unspread3(v):
    v &= 0x1249249249249249
    v = (v ^ (v >> 2)) & 0x10C30C30C30C30C3
    v = (v ^ (v >> 4)) & 0x100F00F00F00F00F
    v = (v ^ (v >> 8)) & 0x1F0000FF0000FF
    v = (v ^ (v >> 16)) & 0x1F00000000FFFF
    v = (v ^ (v >> 32)) & 0x1FFFFF
    return v


@njit(cache=True, inline="always")
def _morton3(x, y, z):
    return _spread3(x) | (_spread3(y) << 1) | (_spread3(z) << 2)


# ---------------------------------------------------------------------------
# Encoding


@njit(cache=True, nogil=True)
def _encode_kernel(labels, const, offs, n_levels_log, palette, coarse, detail):
    brick_log2 = n_levels_log
    palette[0] = labels[offs[brick_log2]]
    p_len = 1
    nc = 0
    nd = 0
    for l in range(brick_log2, 0, -1):
        n_nodes = 1 << (3 * (brick_log2 - l))
        base = offs[l]
        cbase = offs[l - 1]
        leaf = l == 1
        child_side = 1 << (brick_log2 - l + 1)
        for m in range(n_nodes):
            if const[base + m]:
                continue
            parent = labels[base + m]
            for c in range(8):
                j = (m << 3) | c
                lab = labels[cbase + j]
                stop = 0
                if not leaf and const[cbase + j]:
                    stop = 1
                delta = -1
                if lab == parent:
                    op = OP_PARENT
                else:
                    op = -1
                    jx = _unspread3(j)
                    jy = _unspread3(j >> 1)
                    jz = _unspread3(j >> 2)
                    for axis in range(3):
                        if axis == 0:
                            cc = jx
                        elif axis == 1:
                            cc = jy
                        else:
                            cc = jz
                        ncoord = cc - 1 if (cc & 1) == 0 else cc + 1
                        if ncoord < 0 or ncoord >= child_side:
                            continue
                        if axis == 0:
                            nm = _morton3(ncoord, jy, jz)
                        elif axis == 1:
                            nm = _morton3(jx, ncoord, jz)
                        else:
                            nm = _morton3(jx, jy, ncoord)
                        # What the decoder observes there: the neighbor when
                        # it is already decoded on this level, else its parent.
                        if nm < j:
                            observed = labels[cbase + nm]
                        else:
                            observed = labels[base + (nm >> 3)]
                        if observed == lab:
                            op = OP_NEIGHBOR_X + axis
                            break
                    if op < 0:
                        if palette[p_len - 1] == lab:
                            op = OP_PALETTE_LAST
                        else:
                            for d in range(16):
                                idx = p_len - 2 - d
                                if idx < 0:
                                    break
                                if palette[idx] == lab:
                                    delta = d
                                    break
                            if delta >= 0:
                                op = OP_PALETTE_DELTA
                            else:
                                op = OP_PALETTE_ADVANCE
                                palette[p_len] = lab
                                p_len += 1
                nib = (stop << 3) | op
                if leaf:
                    detail[nd] = nib
                    nd += 1
                    if op == OP_PALETTE_DELTA:
                        detail[nd] = delta
                        nd += 1
                else:
                    coarse[nc] = nib
                    nc += 1
                    if op == OP_PALETTE_DELTA:
                        coarse[nc] = delta
                        nc += 1
    return p_len, nc, nd


def _pyramid_flat(pyramid: Pyramid):
    labels = np.concatenate(pyramid.levels)
    const = np.concatenate(pyramid.constant)
    offs = np.zeros(pyramid.config.num_levels + 1, dtype=np.int64)
    for l, level in enumerate(pyramid.levels):
        offs[l + 1] = offs[l] + level.size
    return labels, const, offs[:-1]


def encode_brick(pyramid: Pyramid, config: BrickConfig | None = None) -> BrickEncoding:
    """Encode a pyramid into palette + coarse/detail nibble streams."""
    config = config or pyramid.config
    n = config.brick_log2
    labels, const, offs = _pyramid_flat(pyramid)
    n_leaves = 8**n
    interior_children = 8 * ((8 ** max(n - 1, 0) - 1) // 7) if n > 1 else 0
    palette = np.empty(1 + n_leaves + interior_children, dtype=np.uint32)
    coarse = np.empty(max(2 * interior_children, 1), dtype=np.uint8)
    detail = np.empty(2 * n_leaves, dtype=np.uint8)
    p_len, nc, nd = _encode_kernel(labels, const, offs, n, palette, coarse, detail)
    return BrickEncoding(n, palette[:p_len].copy(), coarse[:nc].copy(), detail[:nd].copy())


def best_operation(
    child_label: int,
    parent_label: int,
    pyramid: Pyramid,
    child: NodeCoord,
    palette: Sequence[int],
    i_p: int,
) -> tuple[int, int | None]:
    """First applicable operation for one child node, in the fixed test order.

    Reference-grade mirror of the encoder kernel's inner decision; ``i_p``
    is the index of the last used palette entry.
    """
    if child_label == parent_label:
        return OP_PARENT, None
    j = morton_encode(child.x, child.y, child.z)
    for axis_id, axis in enumerate("xyz"):
        neighbor = outside_neighbor(child, axis, pyramid.config)
        if neighbor is None:
            continue
        nm = morton_encode(neighbor.x, neighbor.y, neighbor.z)
        if nm < j:
            observed = int(pyramid.levels[child.level][nm])
        else:
            observed = int(pyramid.levels[child.level + 1][nm >> 3])
        if observed == child_label:
            return OP_NEIGHBOR_X + axis_id, None
    if palette[i_p] == child_label:
        return OP_PALETTE_LAST, None
    for delta in range(16):
        idx = i_p - delta - 1
        if idx < 0:
            break
        if palette[idx] == child_label:
            return OP_PALETTE_DELTA, delta
    return OP_PALETTE_ADVANCE, None


# ---------------------------------------------------------------------------
# Decoding

# Kernel status codes (module-private; the wrapper maps them to exceptions).
_OK = 0
_ERR_UNDERRUN = 1
_ERR_BAD_OP = 2
_ERR_PALETTE_RANGE = 3
_ERR_DELTA_RANGE = 4
_ERR_DESYNC = 5
_ERR_BAD_NEIGHBOR = 6
_ERR_LEAF_STOP = 7


@njit(cache=True, inline="always")
def _rans_pull(data, x, pos, freq, cum, slots):
    slot = x & (TOTAL_FREQ - 1)
    s = slots[slot]
    x = freq[s] * (x >> PRECISION_BITS) + slot - cum[s]
    while x < STATE_LOWER:
        if pos >= data.shape[0]:
            return np.uint8(0), x, pos, 1
        x = (x << 8) | np.int64(data[pos])
        pos += 1
    return s, x, pos, 0


@njit(cache=True, nogil=True)
def _decode_kernel(
    palette,
    cdata,
    n_c,
    ddata,
    n_d,
    entropy,
    ifreq,
    icum,
    islots,
    lfreq,
    lcum,
    lslots,
    brick_log2,
    t,
    out,
    occ,
):
    # Returns (status, stream 0/1, nibble position, consumed coarse, consumed detail).
    size = out.shape[0]
    ci = 0
    di = 0
    cx = np.int64(0)
    cpos = 0
    dx = np.int64(0)
    dpos = 0
    want_detail = t == 0
    if entropy == 1:
        if n_c > 0:
            if cdata.shape[0] < 4:
                return _ERR_UNDERRUN, 0, 0, 0, 0
            cx = (
                np.int64(cdata[0])
                | (np.int64(cdata[1]) << 8)
                | (np.int64(cdata[2]) << 16)
                | (np.int64(cdata[3]) << 24)
            )
            cpos = 4
        if want_detail and n_d > 0:
            if ddata.shape[0] < 4:
                return _ERR_UNDERRUN, 1, 0, 0, 0
            dx = (
                np.int64(ddata[0])
                | (np.int64(ddata[1]) << 8)
                | (np.int64(ddata[2]) << 16)
                | (np.int64(ddata[3]) << 24)
            )
            dpos = 4

    out[0] = palette[0]
    relevant = n_c + (n_d if want_detail else 0)
    if relevant == 0:
        for k in range(size):
            out[k] = palette[0]
        return _OK, 0, 0, 0, 0

    i_p = 0
    for l in range(brick_log2, t, -1):
        n_nodes = 1 << (3 * (brick_log2 - l))
        stride = 1 << (3 * (l - t))
        child_stride = stride >> 3
        leaf = l == 1
        child_side = 1 << (brick_log2 - l + 1)
        for m in range(n_nodes):
            last = (m + 1) * stride - 1
            if occ[last >> 3] & (1 << (last & 7)):
                continue  # constant area filled at a coarser level
            parent = out[m * stride]
            for c in range(8):
                j = (m << 3) | c
                if leaf:
                    if di >= n_d:
                        return _ERR_UNDERRUN, 1, di, ci, di
                    if entropy == 1:
                        nib, dx, dpos, bad = _rans_pull(ddata, dx, dpos, lfreq, lcum, lslots)
                        if bad != 0:
                            return _ERR_UNDERRUN, 1, di, ci, di
                    else:
                        nib = ddata[di]
                    di += 1
                else:
                    if ci >= n_c:
                        return _ERR_UNDERRUN, 0, ci, ci, di
                    if entropy == 1:
                        nib, cx, cpos, bad = _rans_pull(cdata, cx, cpos, ifreq, icum, islots)
                        if bad != 0:
                            return _ERR_UNDERRUN, 0, ci, ci, di
                    else:
                        nib = cdata[ci]
                    ci += 1
                op = nib & 7
                stop = (nib >> 3) & 1
                if op == 7:
                    return _ERR_BAD_OP, (1 if leaf else 0), (di if leaf else ci) - 1, ci, di
                if leaf and stop:
                    return _ERR_LEAF_STOP, 1, di - 1, ci, di
                if op == OP_PARENT:
                    val = parent
                elif op <= OP_NEIGHBOR_Z:
                    axis = op - 1
                    jx = _unspread3(j)
                    jy = _unspread3(j >> 1)
                    jz = _unspread3(j >> 2)
                    if axis == 0:
                        cc = jx
                    elif axis == 1:
                        cc = jy
                    else:
                        cc = jz
                    ncoord = cc - 1 if (cc & 1) == 0 else cc + 1
                    if ncoord < 0 or ncoord >= child_side:
                        return _ERR_BAD_NEIGHBOR, (1 if leaf else 0), (di if leaf else ci) - 1, ci, di
                    if axis == 0:
                        nm = _morton3(ncoord, jy, jz)
                    elif axis == 1:
                        nm = _morton3(jx, ncoord, jz)
                    else:
                        nm = _morton3(jx, jy, ncoord)
                    if nm < j:
                        val = out[nm * child_stride]
                    else:
                        val = out[(nm >> 3) * stride]
                elif op == OP_PALETTE_LAST:
                    val = palette[i_p]
                elif op == OP_PALETTE_DELTA:
                    if leaf:
                        if di >= n_d:
                            return _ERR_UNDERRUN, 1, di, ci, di
                        if entropy == 1:
                            dnib, dx, dpos, bad = _rans_pull(ddata, dx, dpos, lfreq, lcum, lslots)
                            if bad != 0:
                                return _ERR_UNDERRUN, 1, di, ci, di
                        else:
                            dnib = ddata[di]
                        di += 1
                    else:
                        if ci >= n_c:
                            return _ERR_UNDERRUN, 0, ci, ci, di
                        if entropy == 1:
                            dnib, cx, cpos, bad = _rans_pull(cdata, cx, cpos, ifreq, icum, islots)
                            if bad != 0:
                                return _ERR_UNDERRUN, 0, ci, ci, di
                        else:
                            dnib = cdata[ci]
                        ci += 1
                    idx = i_p - dnib - 1
                    if idx < 0:
                        return _ERR_DELTA_RANGE, (1 if leaf else 0), (di if leaf else ci) - 1, ci, di
                    val = palette[idx]
                else:
                    i_p += 1
                    if i_p >= palette.shape[0]:
                        return _ERR_PALETTE_RANGE, (1 if leaf else 0), (di if leaf else ci) - 1, ci, di
                    val = palette[i_p]
                slot = j * child_stride
                out[slot] = val
                if stop and child_stride > 1:
                    for k in range(slot, slot + child_stride):
                        out[k] = val
                        occ[k >> 3] |= np.uint8(1 << (k & 7))
    # Full consumption of an entropy stream must land exactly on the
    # initial coder state with no bytes left over.
    if entropy == 1:
        if ci == n_c and n_c > 0 and (cx != STATE_LOWER or cpos != cdata.shape[0]):
            return _ERR_DESYNC, 0, ci, ci, di
        if want_detail and di == n_d and n_d > 0 and (dx != STATE_LOWER or dpos != ddata.shape[0]):
            return _ERR_DESYNC, 1, di, ci, di
    return _OK, 0, 0, ci, di


_EMPTY_TABLE = (
    np.zeros(16, dtype=np.int64),
    np.zeros(17, dtype=np.int64),
    np.zeros(TOTAL_FREQ, dtype=np.uint8),
)


def _table_arrays(table: FrequencyTable | None):
    if table is None:
        return _EMPTY_TABLE
    return table.counts.astype(np.int64), table.cumulative, table.slot_symbols


_ERROR_TEXT = {
    _ERR_UNDERRUN: "stream underrun",
    _ERR_BAD_OP: "invalid opcode 7",
    _ERR_PALETTE_RANGE: "palette index out of range",
    _ERR_DELTA_RANGE: "palette back-reference before palette start",
    _ERR_DESYNC: "entropy stream desynchronized",
    _ERR_BAD_NEIGHBOR: "neighbor reference outside the brick",
    _ERR_LEAF_STOP: "stop bit set on a leaf-level entry",
}


def _run_decode(
    palette: np.ndarray,
    coarse: np.ndarray,
    n_coarse: int,
    detail: np.ndarray,
    n_detail: int,
    entropy: bool,
    tables: TablePair | None,
    config: BrickConfig,
    t: int,
    return_consumed: bool,
):
    if palette.size == 0:
        raise CorruptStreamError("empty palette")
    if not 0 <= t <= config.brick_log2:
        raise ValueError(f"target LOD {t} outside [0, {config.brick_log2}]")
    if t == config.brick_log2:
        out = palette[:1].astype(np.uint32)
        return (out, 0, 0) if return_consumed else out
    size = 8 ** (config.brick_log2 - t)
    out = np.empty(size, dtype=np.uint32)
    occ = np.zeros((size + 7) // 8, dtype=np.uint8)
    ifreq, icum, islots = _table_arrays(tables.interior if tables else None)
    lfreq, lcum, lslots = _table_arrays(tables.leaf if tables else None)
    status, stream, pos, ci, di = _decode_kernel(
        palette,
        coarse,
        n_coarse,
        detail,
        n_detail,
        1 if entropy else 0,
        ifreq,
        icum,
        islots,
        lfreq,
        lcum,
        lslots,
        config.brick_log2,
        t,
        out,
        occ,
    )
    if status != _OK:
        raise CorruptStreamError(
            f"{_ERROR_TEXT[status]} ({_STREAM_NAMES[stream]} stream, nibble {pos})"
        )
    if return_consumed:
        return out, ci, di
    return out


def decode_brick(
    encoding: BrickEncoding,
    t: int,
    config: BrickConfig | None = None,
    return_consumed: bool = False,
):
    """Decode raw (pre-entropy) streams to the Morton-ordered level-``t`` grid."""
    config = config or encoding.config
    return _run_decode(
        encoding.palette,
        encoding.coarse,
        encoding.coarse.size,
        encoding.detail,
        encoding.detail.size,
        False,
        None,
        config,
        t,
        return_consumed,
    )


def decode_brick_entropy(
    palette: np.ndarray,
    coarse_bytes: np.ndarray,
    coarse_nibbles: int,
    detail_bytes: np.ndarray,
    detail_nibbles: int,
    tables: TablePair,
    t: int,
    config: BrickConfig,
    return_consumed: bool = False,
):
    """Decode entropy-coded streams, fusing rANS pulls with op execution."""
    return _run_decode(
        palette,
        coarse_bytes,
        coarse_nibbles,
        detail_bytes,
        detail_nibbles,
        True,
        tables,
        config,
        t,
        return_consumed,
    )


def decode_root(encoding: BrickEncoding) -> int:
    """Coarsest-LOD label; O(1), never touches the streams."""
    if encoding.palette.size == 0:
        raise CorruptStreamError("empty palette")
    return int(encoding.palette[0])


def iter_operations(nibbles: np.ndarray):
    """Yield (opcode, stop, delta) triples from one raw nibble stream.

    Walks the stream sequentially so back-reference payload nibbles are
    attributed to their operation instead of being miscounted as opcodes.
    """
    i = 0
    n = nibbles.size
    while i < n:
        nib = int(nibbles[i])
        i += 1
        op = nib & 7
        stop = nib >> 3
        delta = None
        if op == OP_PALETTE_DELTA:
            if i >= n:
                raise CorruptStreamError(f"stream underrun (payload nibble {i})")
            delta = int(nibbles[i])
            i += 1
        yield op, stop, delta
