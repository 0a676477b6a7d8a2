"""Overhead tiles and their on-disk form.

Tiles are stored as binary portable graymaps/pixmaps (P5/P6, maxval 255) and
normalized to [0, 1] on load. A dataset record references a tile either by a
path relative to the dataset file or inline, as ``base64:<PGM/PPM bytes>``.
"""

import base64
import binascii
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .constants import DEFAULT_TILE_SPAN_DEG, PIXEL_MAXVAL
from .errors import DatasetFormatError, ParameterError

INLINE_PREFIX = "base64:"


@dataclass(frozen=True)
class GeoBounds:
    """Geographic rectangle in degrees (equirectangular)."""

    lat_min: float
    lon_min: float
    lat_max: float
    lon_max: float

    def __post_init__(self):
        if not (-90.0 <= self.lat_min < self.lat_max <= 90.0):
            raise ParameterError(
                f"Degenerate or out-of-range latitude span [{self.lat_min}, {self.lat_max}]"
            )
        if not (-180.0 <= self.lon_min < self.lon_max <= 180.0):
            raise ParameterError(
                f"Degenerate or out-of-range longitude span [{self.lon_min}, {self.lon_max}]"
            )

    @classmethod
    def around(cls, lat: float, lon: float, span: float = DEFAULT_TILE_SPAN_DEG) -> "GeoBounds":
        """Square footprint of side ``span`` centred on a point, clipped to the globe."""
        half = span / 2.0
        return cls(
            lat_min=max(lat - half, -90.0),
            lon_min=max(lon - half, -180.0),
            lat_max=min(lat + half, 90.0),
            lon_max=min(lon + half, 180.0),
        )

    @classmethod
    def from_list(cls, values: list[float]) -> "GeoBounds":
        lat_min, lon_min, lat_max, lon_max = (float(v) for v in values)
        return cls(lat_min, lon_min, lat_max, lon_max)

    def to_list(self) -> list[float]:
        return [self.lat_min, self.lon_min, self.lat_max, self.lon_max]

    def contains(self, lat: float, lon: float) -> bool:
        return self.lat_min <= lat <= self.lat_max and self.lon_min <= lon <= self.lon_max


def to_unit(raw: np.ndarray) -> np.ndarray:
    """Convert 8-bit samples to floats in [0, 1]."""
    return np.asarray(raw, dtype=np.uint8).astype(np.float64) / float(PIXEL_MAXVAL)


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Snap [0, 1] pixels onto the 8-bit grid a tile file can represent."""
    return to_unit(np.round(np.clip(pixels, 0.0, 1.0) * PIXEL_MAXVAL))


@dataclass(eq=False)
class OverheadTile:
    """An overhead image: H x W x channels grid of reals in [0, 1]."""

    pixels: np.ndarray
    bounds: GeoBounds

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.ndim == 2:
            pixels = pixels[:, :, None]
        if pixels.ndim != 3 or min(pixels.shape) < 1:
            raise ParameterError(f"Tile pixels must be H x W x channels, got shape {pixels.shape}")
        if not np.all(np.isfinite(pixels)) or pixels.min() < 0.0 or pixels.max() > 1.0:
            raise ParameterError("Tile pixel values must lie in [0, 1]")
        self.pixels = pixels

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, OverheadTile):
            return NotImplemented
        return self.bounds == other.bounds and np.array_equal(self.pixels, other.pixels)

    def channel_means(self) -> np.ndarray:
        """Mean intensity of each channel."""
        return self.pixels.mean(axis=(0, 1))


def encode_tile(pixels: np.ndarray) -> bytes:
    """Encode pixels as binary PGM (1 channel) or PPM (3 channels)."""
    raw = np.round(np.clip(pixels, 0.0, 1.0) * PIXEL_MAXVAL).astype(np.uint8)
    if raw.shape[2] == 1:
        image = Image.fromarray(raw[:, :, 0])
    elif raw.shape[2] == 3:
        image = Image.fromarray(raw)
    else:
        raise ParameterError(f"Tile files hold 1 or 3 channels, got {raw.shape[2]}")
    buffer = io.BytesIO()
    image.save(buffer, format="PPM")
    return buffer.getvalue()


def decode_tile(data: bytes) -> np.ndarray:
    """Decode PGM/PPM bytes into an H x W x channels array in [0, 1]."""
    try:
        with Image.open(io.BytesIO(data)) as image:
            if image.format != "PPM" or image.mode not in ("L", "RGB"):
                raise DatasetFormatError(
                    f"Expected an 8-bit PGM/PPM tile, got {image.format} mode {image.mode}"
                )
            raw = np.asarray(image)
    except (UnidentifiedImageError, OSError) as e:
        raise DatasetFormatError(f"Unreadable tile image: {e}") from e
    if raw.ndim == 2:
        raw = raw[:, :, None]
    return to_unit(raw)


def tile_extension(pixels: np.ndarray) -> str:
    return ".pgm" if pixels.shape[2] == 1 else ".ppm"


def read_tile_ref(ref: str, base_dir: Path) -> np.ndarray:
    """Resolve a dataset tile reference (relative path or inline base64)."""
    if ref.startswith(INLINE_PREFIX):
        try:
            data = base64.b64decode(ref[len(INLINE_PREFIX):], validate=True)
        except (binascii.Error, ValueError) as e:
            raise DatasetFormatError(f"Invalid inline tile payload: {e}") from e
        return decode_tile(data)

    path = base_dir / ref
    if not path.exists():
        raise DatasetFormatError(f"Tile file not found: {path}")
    return decode_tile(path.read_bytes())


def inline_ref(pixels: np.ndarray) -> str:
    return INLINE_PREFIX + base64.b64encode(encode_tile(pixels)).decode("ascii")
