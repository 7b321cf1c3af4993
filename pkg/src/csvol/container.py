"""Whole-volume pipeline and the CSV1 on-disk format.

Layout of a ``.csv1`` file (all integers little-endian)::

    0    magic "CSV1"
    4    u16 version (1)
    6    u8  flags (bit 0: streams are entropy coded)
    7    u8  padding mode (0: edge replication)
    8    u16 original label width in bits (16 or 32)
    10   u16 brick side log2
    12   3 x u32 original dims (x, y, z)
    24   u32 prepass stride
    28   u32 reserved (0)
    32   16 x u16 interior-table counts
    64   16 x u16 leaf-table counts
    96   3 x u64 blob byte sizes (palette, coarse, detail)
    120  directory, 44 bytes per brick, row-major with x fastest
    ...  palette blob (u32 labels), coarse blob, detail blob

The detail blob sits last so full-resolution streams can stay on disk and
be fetched on demand; everything before it is enough to decode any brick
to level 1.  Each directory entry records the palette slice (in entries)
and both stream slices (byte extent plus nibble count).

Per-brick payloads are independent, so compression and decompression
parallelize over bricks; output assembly is order-preserving, which makes
container bytes identical for any worker count.
"""

from __future__ import annotations

import io
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from . import codec
from .codec import BrickEncoding, decode_brick_entropy, encode_brick
from .errors import ConfigError, CorruptStreamError, IngestionError
from .morton import BrickConfig, grid_to_morton, morton_to_grid
from .pyramid import build_pyramid
from .rans import FrequencyTable, TablePair, build_frequency_tables, rans_encode

MAGIC = b"CSV1"
VERSION = 1
_HEADER = struct.Struct("<4sHBBHH3III")
_BLOBS = struct.Struct("<3Q")

DIRECTORY_DTYPE = np.dtype(
    [
        ("palette_off", "<u8"),
        ("palette_len", "<u4"),
        ("coarse_off", "<u8"),
        ("coarse_bytes", "<u4"),
        ("coarse_nibbles", "<u4"),
        ("detail_off", "<u8"),
        ("detail_bytes", "<u4"),
        ("detail_nibbles", "<u4"),
    ]
)


@dataclass(frozen=True)
class VolumeMeta:
    """Shape and encoding parameters of one compressed volume."""

    dims: tuple[int, int, int]  # original (x, y, z) voxel counts
    width: int  # original label width in bits
    brick_log2: int
    entropy: bool = True
    padding_mode: int = 0
    prepass_stride: int = 512

    @property
    def brick_side(self) -> int:
        return 1 << self.brick_log2

    @property
    def grid_dims(self) -> tuple[int, int, int]:
        b = self.brick_side
        return tuple(-(-d // b) for d in self.dims)

    @property
    def padded_dims(self) -> tuple[int, int, int]:
        b = self.brick_side
        return tuple(-(-d // b) * b for d in self.dims)

    @property
    def brick_count(self) -> int:
        gx, gy, gz = self.grid_dims
        return gx * gy * gz

    @property
    def original_bytes(self) -> int:
        x, y, z = self.dims
        return x * y * z * (self.width // 8)

    def brick_index(self, bx: int, by: int, bz: int) -> int:
        gx, gy, _ = self.grid_dims
        return (bz * gy + by) * gx + bx

    def brick_coords(self, index: int) -> tuple[int, int, int]:
        gx, gy, _ = self.grid_dims
        return index % gx, (index // gx) % gy, index // (gx * gy)


@dataclass
class CompressionConfig:
    brick_log2: int = 5
    workers: int | None = None
    prepass_stride: int = 512
    entropy: bool = True


@dataclass
class CsvContainer:
    """A compressed volume, fully in memory or with a cold detail section."""

    meta: VolumeMeta
    tables: TablePair
    directory: np.ndarray
    palette_blob: np.ndarray
    coarse_blob: np.ndarray
    detail_blob: np.ndarray | None
    _detail_file: Path | None = field(default=None, repr=False)
    _detail_base: int = field(default=0, repr=False)

    @property
    def config(self) -> BrickConfig:
        return BrickConfig(self.meta.brick_log2)

    # -- per-brick accessors ------------------------------------------------

    def brick_palette(self, index: int) -> np.ndarray:
        entry = self.directory[index]
        off = int(entry["palette_off"])
        return self.palette_blob[off : off + int(entry["palette_len"])]

    def brick_coarse(self, index: int) -> np.ndarray:
        entry = self.directory[index]
        off = int(entry["coarse_off"])
        return self.coarse_blob[off : off + int(entry["coarse_bytes"])]

    def brick_detail(self, index: int) -> np.ndarray:
        entry = self.directory[index]
        n = int(entry["detail_bytes"])
        if self.detail_blob is not None:
            off = int(entry["detail_off"])
            return self.detail_blob[off : off + n]
        with open(self._detail_file, "rb") as f:
            f.seek(self._detail_base + int(entry["detail_off"]))
            data = f.read(n)
        if len(data) != n:
            raise CorruptStreamError(f"detail section truncated for brick {index}")
        return np.frombuffer(data, dtype=np.uint8)

    def detail_size(self, index: int) -> int:
        return int(self.directory[index]["detail_bytes"])

    def root_labels(self) -> np.ndarray:
        """Coarsest-LOD label of every brick (palette entry 0)."""
        return self.palette_blob[self.directory["palette_off"].astype(np.int64)]

    def decode_brick(
        self, index: int, t: int, detail: np.ndarray | None = None
    ) -> np.ndarray:
        """Morton-ordered level-``t`` labels of one brick.

        ``detail`` overrides the detail stream (used when it was fetched
        from a cold store); decoding with t >= 1 never touches it.
        """
        entry = self.directory[index]
        cfg = self.config
        if t >= cfg.brick_log2:
            lab = self.brick_palette(index)[:1].astype(np.uint32)
            if t > cfg.brick_log2:
                raise ValueError(f"LOD {t} above coarsest level {cfg.brick_log2}")
            return lab
        if t == 0:
            if detail is None:
                detail = self.brick_detail(index)
            n_detail = int(entry["detail_nibbles"])
        else:
            detail = np.empty(0, dtype=np.uint8)
            n_detail = 0
        coarse = self.brick_coarse(index)
        if self.meta.entropy:
            return decode_brick_entropy(
                self.brick_palette(index),
                coarse,
                int(entry["coarse_nibbles"]),
                detail,
                n_detail,
                self.tables,
                t,
                cfg,
            )
        enc = BrickEncoding(
            cfg.brick_log2,
            self.brick_palette(index),
            _unpack_nibbles(coarse, int(entry["coarse_nibbles"])),
            _unpack_nibbles(detail, n_detail),
        )
        return codec.decode_brick(enc, t, cfg)

    # -- sizes ---------------------------------------------------------------

    @property
    def payload_bytes(self) -> int:
        """Compressed data bytes: palettes plus both streams."""
        return (
            self.palette_blob.size * 4
            + self.coarse_blob.size
            + int(self.directory["detail_bytes"].sum())
        )

    @property
    def compression_rate(self) -> float:
        return self.payload_bytes / self.meta.original_bytes

    # -- serialization --------------------------------------------------------

    def to_bytes(self) -> bytes:
        if self.detail_blob is None:
            raise ConfigError("cannot serialize a container with a cold detail section")
        out = io.BytesIO()
        self._write_head(out)
        out.write(self.detail_blob.tobytes())
        return out.getvalue()

    def _write_head(self, out) -> None:
        m = self.meta
        out.write(
            _HEADER.pack(
                MAGIC,
                VERSION,
                1 if m.entropy else 0,
                m.padding_mode,
                m.width,
                m.brick_log2,
                *m.dims,
                m.prepass_stride,
                0,
            )
        )
        out.write(self.tables.interior.counts.astype("<u2").tobytes())
        out.write(self.tables.leaf.counts.astype("<u2").tobytes())
        detail_bytes = int(self.directory["detail_bytes"].sum())
        out.write(_BLOBS.pack(self.palette_blob.size * 4, self.coarse_blob.size, detail_bytes))
        out.write(self.directory.astype(DIRECTORY_DTYPE, copy=False).tobytes())
        out.write(self.palette_blob.astype("<u4", copy=False).tobytes())
        out.write(self.coarse_blob.tobytes())

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as f:
            self._write_head(f)
            if self.detail_blob is not None:
                f.write(self.detail_blob.tobytes())
            else:
                raise ConfigError("cannot re-save a container with a cold detail section")

    @classmethod
    def from_bytes(cls, data: bytes) -> "CsvContainer":
        return _parse(memoryview(data), None)

    @classmethod
    def open(cls, path: str | Path, detail_cold: bool = False) -> "CsvContainer":
        """Load a container; with ``detail_cold`` the detail blob stays on disk."""
        path = Path(path)
        data = path.read_bytes() if not detail_cold else None
        if data is not None:
            return _parse(memoryview(data), None)
        head_len = _HEADER.size + 64 + _BLOBS.size
        with open(path, "rb") as f:
            head = f.read(head_len)
            meta, tables, sizes = _parse_head(head)
            dir_bytes = meta.brick_count * DIRECTORY_DTYPE.itemsize
            rest = f.read(dir_bytes + sizes[0] + sizes[1])
        container = _parse_body(meta, tables, sizes, memoryview(rest), detail=None)
        container._detail_file = path
        container._detail_base = head_len + dir_bytes + sizes[0] + sizes[1]
        return container


def _parse_head(head: bytes):
    if len(head) < _HEADER.size + 64 + _BLOBS.size:
        raise CorruptStreamError("container header truncated")
    (magic, version, flags, pad_mode, width, brick_log2, dx, dy, dz, stride, _r) = _HEADER.unpack_from(head, 0)
    if magic != MAGIC:
        raise CorruptStreamError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CorruptStreamError(f"unsupported container version {version}")
    off = _HEADER.size
    interior = np.frombuffer(head, dtype="<u2", count=16, offset=off).astype(np.uint16)
    leaf = np.frombuffer(head, dtype="<u2", count=16, offset=off + 32).astype(np.uint16)
    sizes = _BLOBS.unpack_from(head, off + 64)
    meta = VolumeMeta((dx, dy, dz), width, brick_log2, bool(flags & 1), pad_mode, stride)
    tables = TablePair(FrequencyTable(interior), FrequencyTable(leaf))
    return meta, tables, sizes


def _parse_body(meta, tables, sizes, body: memoryview, detail):
    n = meta.brick_count
    dir_bytes = n * DIRECTORY_DTYPE.itemsize
    if len(body) < dir_bytes + sizes[0] + sizes[1]:
        raise CorruptStreamError("container body truncated")
    directory = np.frombuffer(body, dtype=DIRECTORY_DTYPE, count=n)
    off = dir_bytes
    palette = np.frombuffer(body, dtype="<u4", count=sizes[0] // 4, offset=off).astype(np.uint32)
    off += sizes[0]
    coarse = np.frombuffer(body, dtype=np.uint8, count=sizes[1], offset=off).copy()
    return CsvContainer(meta, tables, directory.copy(), palette, coarse, detail)


def _parse(data: memoryview, _unused) -> "CsvContainer":
    head_len = _HEADER.size + 64 + _BLOBS.size
    meta, tables, sizes = _parse_head(bytes(data[:head_len]))
    body_len = meta.brick_count * DIRECTORY_DTYPE.itemsize + sizes[0] + sizes[1]
    container = _parse_body(meta, tables, sizes, data[head_len : head_len + body_len], None)
    detail_off = head_len + body_len
    if len(data) < detail_off + sizes[2]:
        raise CorruptStreamError("container detail section truncated")
    container.detail_blob = np.frombuffer(
        data, dtype=np.uint8, count=sizes[2], offset=detail_off
    ).copy()
    return container


def _unpack_nibbles(packed: np.ndarray, count: int) -> np.ndarray:
    out = np.empty(2 * packed.size, dtype=np.uint8)
    out[0::2] = packed & 0x0F
    out[1::2] = packed >> 4
    return out[:count]


def _pack_nibbles(nibbles: np.ndarray) -> np.ndarray:
    n = nibbles.size
    padded = nibbles
    if n % 2:
        padded = np.concatenate([nibbles, np.zeros(1, dtype=np.uint8)])
    return (padded[0::2] | (padded[1::2] << 4)).astype(np.uint8)


# ---------------------------------------------------------------------------
# Compression pipeline


def extract_brick(volume: np.ndarray, meta: VolumeMeta, index: int) -> np.ndarray:
    """One (b,b,b) cube, edge-replicated where the brick leaves the volume.

    Slicing by brick keeps peak memory at a slab even when ``volume`` is a
    memmap, so out-of-core inputs compress in one pass.
    """
    b = meta.brick_side
    bx, by, bz = meta.brick_coords(index)
    x, y, z = meta.dims
    z0, y0, x0 = bz * b, by * b, bx * b
    cube = np.asarray(volume[z0 : z0 + b, y0 : y0 + b, x0 : x0 + b], dtype=np.uint32)
    dz, dy, dx = cube.shape
    if (dz, dy, dx) != (b, b, b):
        cube = np.pad(cube, ((0, b - dz), (0, b - dy), (0, b - dx)), mode="edge")
    return cube


def _encode_one(volume, meta: VolumeMeta, cfg: BrickConfig, index: int) -> BrickEncoding:
    cube = extract_brick(volume, meta, index)
    return encode_brick(build_pyramid(grid_to_morton(cube), cfg), cfg)


def compress_volume(volume: np.ndarray, config: CompressionConfig | None = None, width: int | None = None) -> CsvContainer:
    """Compress a (z,y,x) label volume into an in-memory container."""
    config = config or CompressionConfig()
    if volume.ndim != 3 or min(volume.shape) < 1:
        raise ConfigError(f"need a non-empty 3-D volume, got shape {volume.shape}")
    if volume.dtype not in (np.uint16, np.uint32):
        if np.issubdtype(volume.dtype, np.integer):
            if volume.size and (int(volume.min()) < 0 or int(volume.max()) > 0xFFFFFFFF):
                raise ConfigError("labels must fit an unsigned 32-bit range")
        else:
            raise ConfigError(f"labels must be integers, got dtype {volume.dtype}")
    if width is None:
        width = 16 if volume.dtype == np.uint16 else 32
    z, y, x = volume.shape
    meta = VolumeMeta(
        (x, y, z),
        width,
        config.brick_log2,
        config.entropy,
        0,
        config.prepass_stride,
    )
    cfg = BrickConfig(config.brick_log2)
    n = meta.brick_count

    if config.entropy:
        sample_ids = range(0, n, max(1, config.prepass_stride))
        tables = build_frequency_tables(
            ((e.coarse, e.detail) for e in (_encode_one(volume, meta, cfg, i) for i in sample_ids))
        )
    else:
        tables = TablePair(FrequencyTable.uniform(), FrequencyTable.uniform())

    def finish(index: int):
        enc = _encode_one(volume, meta, cfg, index)
        if config.entropy:
            cb = rans_encode(enc.coarse, tables.interior) if enc.coarse.size else b""
            db = rans_encode(enc.detail, tables.leaf) if enc.detail.size else b""
        else:
            cb = _pack_nibbles(enc.coarse).tobytes()
            db = _pack_nibbles(enc.detail).tobytes()
        return enc.palette, cb, enc.coarse.size, db, enc.detail.size

    workers = config.workers or 1
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(finish, range(n)))
    else:
        results = [finish(i) for i in range(n)]

    directory = np.zeros(n, dtype=DIRECTORY_DTYPE)
    palettes = []
    coarse_parts = []
    detail_parts = []
    p_off = c_off = d_off = 0
    for i, (palette, cb, cn, db, dn) in enumerate(results):
        entry = directory[i]
        entry["palette_off"] = p_off
        entry["palette_len"] = palette.size
        entry["coarse_off"] = c_off
        entry["coarse_bytes"] = len(cb)
        entry["coarse_nibbles"] = cn
        entry["detail_off"] = d_off
        entry["detail_bytes"] = len(db)
        entry["detail_nibbles"] = dn
        p_off += palette.size
        c_off += len(cb)
        d_off += len(db)
        palettes.append(palette)
        coarse_parts.append(cb)
        detail_parts.append(db)

    return CsvContainer(
        meta,
        tables,
        directory,
        np.concatenate(palettes) if palettes else np.empty(0, np.uint32),
        np.frombuffer(b"".join(coarse_parts), dtype=np.uint8).copy(),
        np.frombuffer(b"".join(detail_parts), dtype=np.uint8).copy(),
    )


def decompress_volume(container: CsvContainer, t: int = 0, workers: int | None = None) -> np.ndarray:
    """Reassemble the volume at LOD ``t``, cropped to ceil(dims / 2**t)."""
    meta = container.meta
    if not 0 <= t <= meta.brick_log2:
        raise ValueError(f"LOD {t} outside [0, {meta.brick_log2}]")
    side = meta.brick_side >> t
    gx, gy, gz = meta.grid_dims
    out = np.empty((gz * side, gy * side, gx * side), dtype=np.uint32)

    def place(index: int):
        bx, by, bz = meta.brick_coords(index)
        cube = morton_to_grid(container.decode_brick(index, t), side)
        out[bz * side : (bz + 1) * side, by * side : (by + 1) * side, bx * side : (bx + 1) * side] = cube

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(place, range(meta.brick_count)))
    else:
        for i in range(meta.brick_count):
            place(i)
    x, y, z = meta.dims
    crop = tuple(-(-d // (1 << t)) for d in (z, y, x))
    return out[: crop[0], : crop[1], : crop[2]]


# ---------------------------------------------------------------------------
# Statistics


@njit(cache=True, nogil=True)
def _count_ops(nibbles, counts):
    i = 0
    n = nibbles.shape[0]
    while i < n:
        op = nibbles[i] & 7
        counts[op] += 1
        i += 1
        if op == codec.OP_PALETTE_DELTA:
            i += 1  # skip the payload nibble
    return counts


def stats(container: CsvContainer) -> dict:
    """Volume statistics: rates, operation frequencies, palette duplicates."""
    from .rans import rans_decode

    meta = container.meta
    op_counts = np.zeros(8, dtype=np.int64)
    brick_cr = np.zeros(meta.brick_count, dtype=np.float64)
    duplicates = np.zeros(meta.brick_count, dtype=np.int64)
    homogeneous = 0
    brick_bytes_orig = meta.brick_side**3 * (meta.width // 8)
    for i in range(meta.brick_count):
        entry = container.directory[i]
        cn, dn = int(entry["coarse_nibbles"]), int(entry["detail_nibbles"])
        if container.meta.entropy:
            if cn:
                _count_ops(rans_decode(container.brick_coarse(i).tobytes(), cn, container.tables.interior), op_counts)
            if dn:
                _count_ops(rans_decode(container.brick_detail(i).tobytes(), dn, container.tables.leaf), op_counts)
        else:
            if cn:
                _count_ops(_unpack_nibbles(container.brick_coarse(i), cn), op_counts)
            if dn:
                _count_ops(_unpack_nibbles(container.brick_detail(i), dn), op_counts)
        payload = int(entry["palette_len"]) * 4 + int(entry["coarse_bytes"]) + int(entry["detail_bytes"])
        brick_cr[i] = payload / brick_bytes_orig
        palette = container.brick_palette(i)
        duplicates[i] = palette.size - np.unique(palette).size
        if palette.size == 1 and cn == 0 and dn == 0:
            homogeneous += 1

    total_ops = max(int(op_counts.sum()), 1)
    frequencies = {codec.OP_NAMES[op]: int(op_counts[op]) / total_ops for op in range(7)}
    reuse = sum(frequencies[codec.OP_NAMES[op]] for op in range(4))

    edges = np.array([0.0] + [2.0**e for e in range(-14, 1)])
    hist, _ = np.histogram(brick_cr, bins=edges)
    dup_vals, dup_counts = np.unique(duplicates, return_counts=True)

    return {
        "dims": meta.dims,
        "brick_side": meta.brick_side,
        "brick_count": meta.brick_count,
        "entropy": meta.entropy,
        "original_bytes": meta.original_bytes,
        "payload_bytes": container.payload_bytes,
        "compression_rate": container.compression_rate,
        "op_frequencies": frequencies,
        "reuse_fraction": reuse,
        "total_ops": total_ops,
        "brick_cr_histogram": {
            "edges": edges.tolist(),
            "counts": hist.tolist(),
        },
        "brick_cr_max": float(brick_cr.max()) if brick_cr.size else 0.0,
        "homogeneous_bricks": homogeneous,
        "palette_duplicates": dict(zip(dup_vals.tolist(), dup_counts.tolist())),
        "mean_palette_duplicates": float(duplicates.mean()) if duplicates.size else 0.0,
    }


def format_stats_text(report: dict) -> str:
    lines = [
        f"dims            {report['dims'][0]} x {report['dims'][1]} x {report['dims'][2]}",
        f"bricks          {report['brick_count']} (side {report['brick_side']})",
        f"entropy coding  {'on' if report['entropy'] else 'off'}",
        f"original        {report['original_bytes']} bytes",
        f"payload         {report['payload_bytes']} bytes",
        f"compression     {100 * report['compression_rate']:.3f} %",
        f"homogeneous     {report['homogeneous_bricks']} bricks",
        f"worst brick CR  {100 * report['brick_cr_max']:.3f} %",
        f"mean duplicates {report['mean_palette_duplicates']:.2f} per palette",
        "operation frequencies:",
    ]
    for name, freq in report["op_frequencies"].items():
        lines.append(f"  {name:<16} {100 * freq:7.3f} %")
    lines.append(f"  {'(reuse total)':<16} {100 * report['reuse_fraction']:7.3f} %")
    return "\n".join(lines)


def format_stats_kv(report: dict) -> str:
    lines = [
        f"dims_x={report['dims'][0]}",
        f"dims_y={report['dims'][1]}",
        f"dims_z={report['dims'][2]}",
        f"brick_side={report['brick_side']}",
        f"brick_count={report['brick_count']}",
        f"entropy={int(report['entropy'])}",
        f"original_bytes={report['original_bytes']}",
        f"payload_bytes={report['payload_bytes']}",
        f"compression_rate={report['compression_rate']:.6f}",
        f"homogeneous_bricks={report['homogeneous_bricks']}",
        f"brick_cr_max={report['brick_cr_max']:.6f}",
        f"mean_palette_duplicates={report['mean_palette_duplicates']:.4f}",
        f"reuse_fraction={report['reuse_fraction']:.6f}",
    ]
    for name, freq in report["op_frequencies"].items():
        lines.append(f"op_{name}={freq:.6f}")
    return "\n".join(lines)
