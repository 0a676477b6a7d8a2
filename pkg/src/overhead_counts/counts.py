"""Object histograms and geotagged datasets.

Builds per-category histograms from thresholded detector output, reads and
writes geotagged datasets (JSONL or CSV, tiles as PGM/PPM files), splits them
for evaluation, generates synthetic data with known per-sample rates, and
summarizes count statistics.

JSONL record::

    {"id": "s000001", "lat": 37.77, "lon": -122.42, "counts": [0, 2, ...],
     "tile": "tiles/s000001.ppm", "bounds": [lat_min, lon_min, lat_max, lon_max]}

``tile`` may instead be ``"base64:<PGM/PPM bytes>"``; a precomputed feature
vector may be given as ``"features": [...]`` instead of a tile.

CSV header: ``id,lat,lon,tile,c0,...,c{C-1}``.
"""

import csv
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .constants import (
    DEFAULT_CATEGORY_COUNT,
    DEFAULT_THRESHOLD,
    DEFAULT_TILE_SPAN_DEG,
    PARAM_FLOOR,
    REFERENCE_MEAN_OBJECTS,
)
from .errors import (
    ConfigError,
    DatasetFormatError,
    InputError,
    ParameterError,
    SchemaError,
)
from .tiles import (
    GeoBounds,
    OverheadTile,
    encode_tile,
    inline_ref,
    quantize,
    read_tile_ref,
    tile_extension,
)

logger = logging.getLogger("overhead_counts.counts")

DATASET_FORMATS = ("jsonl", "csv")
SYNTHETIC_LAYOUTS = ("random", "gradient", "grid")

# Default synthetic extent (roughly the San Francisco peninsula)
DEFAULT_SYNTHETIC_BOUNDS = GeoBounds(37.70, -122.52, 37.82, -122.36)


# =============================================================================
# Records
# =============================================================================

@dataclass(frozen=True)
class Detection:
    """One detector output: a category id and a confidence score."""

    category_id: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise InputError(f"Detection score {self.score} outside [0, 1]")

    @classmethod
    def from_dict(cls, data: dict) -> "Detection":
        return cls(category_id=int(data["category_id"]), score=float(data["score"]))


@dataclass(frozen=True)
class ObjectHistogram:
    """Per-category object counts for one ground-level observation."""

    counts: tuple[int, ...]

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if not counts:
            raise ParameterError("Histogram needs at least one category")
        if any(c < 0 for c in counts):
            raise ParameterError(f"Histogram counts must be non-negative: {counts}")
        object.__setattr__(self, "counts", counts)

    @property
    def category_count(self) -> int:
        return len(self.counts)

    def total(self) -> int:
        return sum(self.counts)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=np.int64)


@dataclass
class GeoSample:
    """A geotagged pairing of an object histogram with its overhead view.

    The overhead view is either a tile or a precomputed feature vector.
    ``true_rates`` is set only for synthetic samples and is not persisted.
    """

    id: str
    lat: float
    lon: float
    histogram: ObjectHistogram
    tile: OverheadTile | None = None
    features: tuple[float, ...] | None = None
    true_rates: tuple[float, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.id:
            raise ParameterError("Sample id must be a non-empty string")
        if not -90.0 <= self.lat <= 90.0:
            raise ParameterError(f"Sample {self.id}: latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise ParameterError(f"Sample {self.id}: longitude {self.lon} outside [-180, 180]")
        if self.features is not None:
            self.features = tuple(float(v) for v in self.features)


def build_histogram(
    detections: Iterable[Detection],
    threshold: float = DEFAULT_THRESHOLD,
    category_count: int = DEFAULT_CATEGORY_COUNT,
) -> ObjectHistogram:
    """Tally detections scoring strictly above ``threshold`` into a histogram."""
    if not 0.0 <= threshold <= 1.0:
        raise ParameterError(f"threshold must be in [0, 1] (got {threshold})")
    if category_count < 1:
        raise ParameterError(f"category_count must be >= 1 (got {category_count})")

    kept = []
    for i, det in enumerate(detections):
        if not 0 <= det.category_id < category_count:
            raise InputError(
                f"Detection {i} ({det}) has category_id {det.category_id}, "
                f"expected [0, {category_count})"
            )
        if det.score > threshold:
            kept.append(det.category_id)

    counts = np.bincount(np.asarray(kept, dtype=np.int64), minlength=category_count)
    return ObjectHistogram(tuple(int(c) for c in counts))


def stack_counts(samples: list[GeoSample]) -> np.ndarray:
    """N x C matrix of histogram counts."""
    return np.asarray([s.histogram.counts for s in samples], dtype=np.float64)


# =============================================================================
# Dataset IO
# =============================================================================

def _resolve_format(path: Path, format: str | None) -> str:
    if format is None:
        suffix = path.suffix.lower()
        format = {".jsonl": "jsonl", ".json": "jsonl", ".csv": "csv"}.get(suffix)
        if format is None:
            raise ParameterError(
                f"Cannot infer dataset format from '{path.name}'. "
                f"Must be one of: {', '.join(DATASET_FORMATS)}"
            )
    format = format.lower()
    if format not in DATASET_FORMATS:
        raise ParameterError(f"Unknown dataset format '{format}'. Must be one of: {', '.join(DATASET_FORMATS)}")
    return format


def _parse_counts(values: list[Any], line: int) -> tuple[int, ...]:
    counts = []
    for v in values:
        if isinstance(v, bool) or not isinstance(v, int):
            if isinstance(v, str) and v.strip().lstrip("-").isdigit():
                v = int(v)
            else:
                raise DatasetFormatError(f"count {v!r} is not an integer", line=line)
        if v < 0:
            raise DatasetFormatError(f"count {v} is negative", line=line)
        counts.append(v)
    return tuple(counts)


def _make_sample(
    line: int,
    sample_id: Any,
    lat: Any,
    lon: Any,
    counts: tuple[int, ...],
    tile_ref: str | None,
    features: list[float] | None,
    bounds: list[float] | None,
    base_dir: Path,
) -> GeoSample:
    try:
        lat, lon = float(lat), float(lon)
        tile = None
        if tile_ref:
            pixels = read_tile_ref(tile_ref, base_dir)
            tile_bounds = GeoBounds.from_list(bounds) if bounds else GeoBounds.around(lat, lon)
            tile = OverheadTile(pixels, tile_bounds)
        return GeoSample(
            id=str(sample_id),
            lat=lat,
            lon=lon,
            histogram=ObjectHistogram(counts),
            tile=tile,
            features=tuple(float(v) for v in features) if features is not None else None,
        )
    except DatasetFormatError as e:
        raise DatasetFormatError(str(e), line=line) from e
    except (ParameterError, TypeError, ValueError) as e:
        raise DatasetFormatError(str(e), line=line) from e


def _check_width(counts: tuple[int, ...], expected: int | None, line: int) -> int:
    if expected is not None and len(counts) != expected:
        raise SchemaError(
            f"histogram has {len(counts)} categories, expected {expected}", line=line
        )
    return len(counts)


def _load_jsonl(path: Path, category_count: int | None) -> list[GeoSample]:
    samples = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetFormatError(f"invalid JSON: {e.msg}", line=line_no) from e
            if not isinstance(record, dict):
                raise DatasetFormatError("record must be a JSON object", line=line_no)
            missing = [k for k in ("id", "lat", "lon", "counts") if k not in record]
            if missing:
                raise DatasetFormatError(f"missing keys: {', '.join(missing)}", line=line_no)
            if not isinstance(record["counts"], list):
                raise DatasetFormatError("'counts' must be a list", line=line_no)
            if not isinstance(record.get("tile"), (str, type(None))):
                raise DatasetFormatError("'tile' must be a string", line=line_no)
            for key in ("features", "bounds"):
                if not isinstance(record.get(key), (list, type(None))):
                    raise DatasetFormatError(f"'{key}' must be a list", line=line_no)

            counts = _parse_counts(record["counts"], line_no)
            category_count = _check_width(counts, category_count, line_no)
            samples.append(_make_sample(
                line_no,
                record["id"],
                record["lat"],
                record["lon"],
                counts,
                record.get("tile"),
                record.get("features"),
                record.get("bounds"),
                path.parent,
            ))
    return samples


def _load_csv(path: Path, category_count: int | None) -> list[GeoSample]:
    samples = []
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            return []
        width = len(header) - 4
        expected_header = ["id", "lat", "lon", "tile"] + [f"c{i}" for i in range(width)]
        if width < 1 or [h.strip() for h in header] != expected_header:
            raise SchemaError(
                f"header must be id,lat,lon,tile,c0..c{{C-1}}; got {','.join(header)}", line=1
            )
        if category_count is not None and width != category_count:
            raise SchemaError(f"header has {width} count columns, expected {category_count}", line=1)

        for row in reader:
            line_no = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise SchemaError(
                    f"expected {len(header)} fields, got {len(row)}", line=line_no
                )
            counts = _parse_counts([c.strip() for c in row[4:]], line_no)
            samples.append(_make_sample(
                line_no, row[0], row[1], row[2], counts, row[3].strip() or None,
                None, None, path.parent,
            ))
    return samples


def load_dataset(
    path: str | Path,
    format: str | None = None,
    category_count: int | None = None,
) -> list[GeoSample]:
    """Load a geotagged dataset, preserving record order.

    Args:
        path: JSONL or CSV file
        format: 'jsonl' or 'csv'; inferred from the suffix when omitted
        category_count: Expected histogram width; defaults to the first record's

    Raises:
        DatasetFormatError: malformed record (message carries the line number)
        SchemaError: histogram width differs from ``category_count``
    """
    path = Path(path)
    if not path.exists():
        raise ParameterError(f"Dataset not found: {path}")
    format = _resolve_format(path, format)
    samples = _load_jsonl(path, category_count) if format == "jsonl" else _load_csv(path, category_count)
    logger.debug(f"Loaded {len(samples)} samples from {path}")
    return samples


def _tile_filename(sample_id: str, pixels: np.ndarray) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", sample_id) + tile_extension(pixels)


def save_dataset(
    samples: list[GeoSample],
    path: str | Path,
    format: str | None = None,
    tile_dir: str = "tiles",
    inline_tiles: bool = False,
) -> list[Path]:
    """Write samples (and their tile files) so that ``load_dataset`` returns them unchanged.

    Returns:
        Every file written, dataset file last.
    """
    path = Path(path)
    format = _resolve_format(path, format)
    path.parent.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def tile_ref(sample: GeoSample) -> str | None:
        if sample.tile is None:
            return None
        if inline_tiles:
            return inline_ref(sample.tile.pixels)
        rel = Path(tile_dir) / _tile_filename(sample.id, sample.tile.pixels)
        target = path.parent / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(encode_tile(sample.tile.pixels))
        written.append(target)
        return rel.as_posix()

    if format == "jsonl":
        with open(path, "w", encoding="utf-8") as f:
            for s in samples:
                record: dict[str, Any] = {
                    "id": s.id,
                    "lat": s.lat,
                    "lon": s.lon,
                    "counts": list(s.histogram.counts),
                }
                ref = tile_ref(s)
                if ref is not None:
                    record["tile"] = ref
                    record["bounds"] = s.tile.bounds.to_list()
                if s.features is not None:
                    record["features"] = list(s.features)
                f.write(json.dumps(record) + "\n")
    else:
        if any(s.features is not None for s in samples):
            raise ParameterError("CSV datasets cannot hold feature vectors; use jsonl")
        width = samples[0].histogram.category_count if samples else 1
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["id", "lat", "lon", "tile"] + [f"c{i}" for i in range(width)])
            for s in samples:
                writer.writerow([s.id, repr(s.lat), repr(s.lon), tile_ref(s) or ""]
                                + list(s.histogram.counts))

    written.append(path)
    logger.debug(f"Saved {len(samples)} samples to {path}")
    return written


# =============================================================================
# Splitting
# =============================================================================

def split_dataset(
    samples: list[GeoSample],
    test_fraction: float,
    seed: int,
) -> tuple[list[GeoSample], list[GeoSample]]:
    """Random disjoint train/test partition; |test| = round-half-up(fraction * N).

    Both parts keep the input's relative order.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ParameterError(f"test_fraction must be in (0, 1) (got {test_fraction})")
    n = len(samples)
    if n < 2:
        raise ParameterError(f"Need at least 2 samples to split (got {n})")

    n_test = math.floor(test_fraction * n + 0.5)
    order = np.random.default_rng(seed).permutation(n)
    test_idx = set(int(i) for i in order[:n_test])
    train = [s for i, s in enumerate(samples) if i not in test_idx]
    test = [s for i, s in enumerate(samples) if i in test_idx]
    return train, test


# =============================================================================
# Synthetic Data
# =============================================================================

@dataclass
class RateSpec:
    """True rate of one category: base + slope * mean intensity of ``channel``."""

    base: float
    slope: float = 0.0
    channel: int = 0

    def to_dict(self) -> dict:
        return {"base": self.base, "slope": self.slope, "channel": self.channel}

    @classmethod
    def from_dict(cls, data: dict) -> "RateSpec":
        return cls(
            base=float(data["base"]),
            slope=float(data.get("slope", 0.0)),
            channel=int(data.get("channel", 0)),
        )


def default_rates(
    category_count: int,
    channels: int,
    mean_total: float = REFERENCE_MEAN_OBJECTS,
) -> list[RateSpec]:
    """Zipf-like category profile whose expected total per sample is ``mean_total``.

    Each category's rate grows with the mean intensity of one channel, so the
    tile carries a learnable signal. With intensities averaging 0.5, the
    expected rate of category c is its share of ``mean_total``.
    """
    weights = 1.0 / np.arange(1, category_count + 1)
    means = mean_total * weights / weights.sum()
    return [
        RateSpec(base=0.2 * float(m), slope=1.6 * float(m), channel=c % channels)
        for c, m in enumerate(means)
    ]


@dataclass
class SyntheticConfig:
    """Configuration for ``generate_synthetic``.

    ``layout`` controls where samples fall and how tile brightness relates to
    location: 'random' draws intensities independently, 'gradient' ramps them
    across the extent, 'grid' places one sample at each cell centre of a
    ``grid_rows`` x ``grid_cols`` grid (ignoring ``n_samples``) with the
    gradient field.
    """

    category_count: int = DEFAULT_CATEGORY_COUNT
    tile_size: int = 8
    channels: int = 3
    n_samples: int = 1000
    rates: list[RateSpec] | None = None
    layout: str = "random"
    grid_rows: int = 16
    grid_cols: int = 16
    bounds: GeoBounds = DEFAULT_SYNTHETIC_BOUNDS
    pixel_noise: float = 0.05
    seed: int = 0
    id_prefix: str = "s"

    def validate(self) -> None:
        if self.category_count < 1:
            raise ConfigError(f"category_count must be >= 1 (got {self.category_count})")
        if self.tile_size < 1:
            raise ConfigError(f"tile_size must be >= 1 (got {self.tile_size})")
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3 (got {self.channels})")
        if self.layout not in SYNTHETIC_LAYOUTS:
            raise ConfigError(
                f"Unknown layout '{self.layout}'. Must be one of: {', '.join(SYNTHETIC_LAYOUTS)}"
            )
        if self.layout == "grid":
            if self.grid_rows < 1 or self.grid_cols < 1:
                raise ConfigError("grid_rows and grid_cols must be >= 1")
        elif self.n_samples < 1:
            raise ConfigError(f"n_samples must be >= 1 (got {self.n_samples})")
        if self.pixel_noise < 0:
            raise ConfigError(f"pixel_noise must be >= 0 (got {self.pixel_noise})")
        rates = self.resolved_rates()
        if len(rates) != self.category_count:
            raise ConfigError(
                f"{len(rates)} rate specs given for {self.category_count} categories"
            )
        for c, spec in enumerate(rates):
            if not 0 <= spec.channel < self.channels:
                raise ConfigError(f"Category {c} reads channel {spec.channel} of {self.channels}")
            # The rate must stay non-negative over the whole [0, 1] intensity range
            if spec.base < 0 or spec.base + spec.slope < 0:
                raise ConfigError(f"Category {c} rate can go negative: {spec}")

    def resolved_rates(self) -> list[RateSpec]:
        if self.rates is not None:
            return self.rates
        return default_rates(self.category_count, self.channels)

    def to_dict(self) -> dict:
        return {
            "category_count": self.category_count,
            "tile_size": self.tile_size,
            "channels": self.channels,
            "n_samples": self.n_samples,
            "rates": [r.to_dict() for r in self.rates] if self.rates is not None else None,
            "layout": self.layout,
            "grid_rows": self.grid_rows,
            "grid_cols": self.grid_cols,
            "bounds": self.bounds.to_list(),
            "pixel_noise": self.pixel_noise,
            "seed": self.seed,
            "id_prefix": self.id_prefix,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticConfig":
        defaults = cls()
        rates = data.get("rates")
        bounds = data.get("bounds")
        try:
            return cls(
                category_count=int(data.get("category_count", defaults.category_count)),
                tile_size=int(data.get("tile_size", defaults.tile_size)),
                channels=int(data.get("channels", defaults.channels)),
                n_samples=int(data.get("n_samples", defaults.n_samples)),
                rates=[RateSpec.from_dict(r) for r in rates] if rates is not None else None,
                layout=str(data.get("layout", defaults.layout)),
                grid_rows=int(data.get("grid_rows", defaults.grid_rows)),
                grid_cols=int(data.get("grid_cols", defaults.grid_cols)),
                bounds=GeoBounds.from_list(bounds) if bounds else defaults.bounds,
                pixel_noise=float(data.get("pixel_noise", defaults.pixel_noise)),
                seed=int(data.get("seed", defaults.seed)),
                id_prefix=str(data.get("id_prefix", defaults.id_prefix)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"Invalid synthetic config: {e}") from e


def _intensity_field(lat: np.ndarray, lon: np.ndarray, bounds: GeoBounds, channels: int) -> np.ndarray:
    """Smooth per-channel intensity over the extent: east ramp, north ramp, diagonal."""
    x = (lon - bounds.lon_min) / (bounds.lon_max - bounds.lon_min)
    y = (lat - bounds.lat_min) / (bounds.lat_max - bounds.lat_min)
    ramps = (x, y, (x + y) / 2.0)
    return np.stack([ramps[j % 3] for j in range(channels)], axis=1)


def _grid_centers(config: SyntheticConfig) -> tuple[np.ndarray, np.ndarray]:
    b = config.bounds
    dlat = (b.lat_max - b.lat_min) / config.grid_rows
    dlon = (b.lon_max - b.lon_min) / config.grid_cols
    rows, cols = np.meshgrid(np.arange(config.grid_rows), np.arange(config.grid_cols), indexing="ij")
    lat = b.lat_max - (rows.ravel() + 0.5) * dlat
    lon = b.lon_min + (cols.ravel() + 0.5) * dlon
    return lat, lon


def generate_synthetic(config: SyntheticConfig) -> list[GeoSample]:
    """Draw a synthetic dataset whose tiles encode each sample's true rates.

    Tile pixels are a per-channel latent intensity plus Gaussian noise,
    clipped and quantized to 8 bits. Each category's true rate is an affine
    function of one channel's mean pixel value; counts are Poisson draws from
    those rates. Rates at or below the parameter floor yield zero counts.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    b = config.bounds

    if config.layout == "grid":
        lat, lon = _grid_centers(config)
    else:
        lat = rng.uniform(b.lat_min, b.lat_max, size=config.n_samples)
        lon = rng.uniform(b.lon_min, b.lon_max, size=config.n_samples)
    n = lat.shape[0]

    if config.layout == "random":
        latent = rng.uniform(0.0, 1.0, size=(n, config.channels))
    else:
        latent = _intensity_field(lat, lon, b, config.channels)

    size = config.tile_size
    noise = rng.standard_normal((n, size, size, config.channels)) * config.pixel_noise
    pixels = quantize(latent[:, None, None, :] + noise)
    means = pixels.mean(axis=(1, 2))

    specs = config.resolved_rates()
    base = np.array([s.base for s in specs])
    slope = np.array([s.slope for s in specs])
    channel = np.array([s.channel for s in specs])
    rates = base[None, :] + slope[None, :] * means[:, channel]

    active = rates > PARAM_FLOOR
    counts = np.where(active, rng.poisson(np.where(active, rates, 0.0)), 0)
    rates = np.maximum(rates, PARAM_FLOOR)

    width = len(str(max(n - 1, 0)))
    width = max(width, 6)
    samples = []
    for i in range(n):
        samples.append(GeoSample(
            id=f"{config.id_prefix}{i:0{width}d}",
            lat=float(lat[i]),
            lon=float(lon[i]),
            histogram=ObjectHistogram(tuple(int(c) for c in counts[i])),
            tile=OverheadTile(pixels[i], GeoBounds.around(float(lat[i]), float(lon[i]), DEFAULT_TILE_SPAN_DEG)),
            true_rates=tuple(float(r) for r in rates[i]),
        ))
    logger.debug(f"Generated {n} synthetic samples ({config.layout} layout, seed {config.seed})")
    return samples


def true_rate_matrix(samples: list[GeoSample]) -> np.ndarray:
    """N x C ground-truth rates of synthetic samples."""
    if any(s.true_rates is None for s in samples):
        raise ParameterError("Ground-truth rates are only known for synthetic samples")
    return np.asarray([s.true_rates for s in samples], dtype=np.float64)


# =============================================================================
# Statistics
# =============================================================================

@dataclass
class DatasetStats:
    """Summary of a dataset's object counts."""

    sample_count: int
    count_histogram: list[int]      # index = objects per sample, value = number of samples
    category_frequency: list[int]   # total detections per category
    mean_nonzero_total: float | None
    max_total: int
    nonzero_fraction: float
    most_frequent_category: int | None

    def to_dict(self) -> dict:
        return {
            "sample_count": self.sample_count,
            "count_histogram": self.count_histogram,
            "category_frequency": self.category_frequency,
            "mean_nonzero_total": self.mean_nonzero_total,
            "max_total": self.max_total,
            "nonzero_fraction": self.nonzero_fraction,
            "most_frequent_category": self.most_frequent_category,
        }


def dataset_stats(samples: list[GeoSample]) -> DatasetStats:
    """Count statistics; the mean total excludes samples with no objects."""
    if not samples:
        raise ParameterError("dataset_stats needs at least one sample")
    counts = stack_counts(samples).astype(np.int64)
    totals = counts.sum(axis=1)
    nonzero = totals[totals > 0]
    frequency = counts.sum(axis=0)

    return DatasetStats(
        sample_count=len(samples),
        count_histogram=[int(c) for c in np.bincount(totals)],
        category_frequency=[int(c) for c in frequency],
        mean_nonzero_total=float(nonzero.mean()) if nonzero.size else None,
        max_total=int(totals.max()),
        nonzero_fraction=float(nonzero.size / len(samples)),
        most_frequent_category=int(np.argmax(frequency)) if frequency.sum() > 0 else None,
    )
