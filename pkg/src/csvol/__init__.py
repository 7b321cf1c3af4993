"""Lossless compression, caching and interactive rendering for segmentation volumes."""

from .cache import BrickCache
from .codec import BrickEncoding, decode_brick, decode_root, encode_brick
from .container import (
    CompressionConfig,
    CsvContainer,
    VolumeMeta,
    compress_volume,
    decompress_volume,
    stats,
)
from .errors import (
    CacheCapacityError,
    ConfigError,
    CorruptStreamError,
    CsvolError,
    EncodabilityError,
    IngestionError,
)
from .morton import BrickConfig, NodeCoord, morton_decode, morton_encode, outside_neighbor
from .pyramid import Pyramid, build_pyramid, downsample_level
from .rans import FrequencyTable, TablePair, build_frequency_tables, rans_decode, rans_encode
from .render import (
    Camera,
    FrameLoop,
    FrameRequest,
    RenderOptions,
    TransferFunction,
    brick_visible,
    reference_render,
    render_frame,
    select_lod,
)
from .volume_io import gen_synthetic, load_raw, palette_baseline_size, save_raw

__version__ = "0.1.0"

__all__ = [
    "BrickCache",
    "BrickConfig",
    "BrickEncoding",
    "Camera",
    "CacheCapacityError",
    "CompressionConfig",
    "ConfigError",
    "CorruptStreamError",
    "CsvContainer",
    "CsvolError",
    "EncodabilityError",
    "FrameLoop",
    "FrameRequest",
    "FrequencyTable",
    "IngestionError",
    "NodeCoord",
    "Pyramid",
    "RenderOptions",
    "TablePair",
    "TransferFunction",
    "VolumeMeta",
    "brick_visible",
    "build_frequency_tables",
    "build_pyramid",
    "compress_volume",
    "decode_brick",
    "decode_root",
    "decompress_volume",
    "downsample_level",
    "encode_brick",
    "gen_synthetic",
    "load_raw",
    "morton_decode",
    "morton_encode",
    "outside_neighbor",
    "palette_baseline_size",
    "rans_decode",
    "rans_encode",
    "reference_render",
    "render_frame",
    "save_raw",
    "select_lod",
    "stats",
]
