"""Spatial products: kernel-smoothed baseline maps, model heatmaps, top-k
retrieval, k-means over predicted parameters, and PPM rendering.

Grids are laid out north-up: row 0 is the northern edge, column 0 the
western edge. Distances are equirectangular in degrees, with longitude
differences scaled by the cosine of the mid latitude.
"""

import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .constants import (
    CLUSTER_COLORS,
    DEFAULT_BANDWIDTH_DEG,
    DEFAULT_CLUSTERS,
    DEFAULT_RESTARTS,
    GREEN_HIGH,
    GREEN_LOW,
    MAX_LLOYD_ITERATIONS,
    NODATA_COLOR,
    NODATA_RADIUS_BANDWIDTHS,
    PALETTES,
)
from .counts import GeoSample, stack_counts
from .dists import expected_count
from .errors import DomainError, NumericError, ParameterError, RenderError, ShapeError
from .net import ModelConfig, ModelWeights, predict
from .tiles import GeoBounds, OverheadTile
from .trainer import sample_inputs

logger = logging.getLogger("overhead_counts.geomap")

MAP_KINDS = ("count", "cluster")
SCALINGS = ("minmax", "none")

# Cells evaluated per block in baseline_map, scaled by sample count
_BASELINE_BLOCK_ELEMENTS = 1 << 21


# =============================================================================
# Grids and Maps
# =============================================================================

@dataclass(frozen=True)
class GridSpec:
    """A rows x cols raster over a geographic rectangle."""

    bounds: GeoBounds
    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ParameterError(f"Grid must be at least 1x1 (got {self.rows}x{self.cols})")

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    @property
    def cell_size(self) -> tuple[float, float]:
        """(Δlat, Δlon) of one cell in degrees."""
        b = self.bounds
        return (b.lat_max - b.lat_min) / self.rows, (b.lon_max - b.lon_min) / self.cols

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Latitude and longitude of every cell centre, each rows x cols."""
        dlat, dlon = self.cell_size
        r, c = np.meshgrid(np.arange(self.rows), np.arange(self.cols), indexing="ij")
        lat = self.bounds.lat_max - (r + 0.5) * dlat
        lon = self.bounds.lon_min + (c + 0.5) * dlon
        return lat, lon

    def cell_of(self, lat: float, lon: float) -> tuple[int, int] | None:
        """(row, col) holding a point, or None outside the bounds."""
        if not self.bounds.contains(lat, lon):
            return None
        dlat, dlon = self.cell_size
        row = min(int((self.bounds.lat_max - lat) / dlat), self.rows - 1)
        col = min(int((lon - self.bounds.lon_min) / dlon), self.cols - 1)
        return row, col

    def to_dict(self) -> dict:
        return {"bounds": self.bounds.to_list(), "rows": self.rows, "cols": self.cols}


@dataclass(eq=False)
class RasterMap:
    """Values on a grid plus a no-data mask (True where no value exists).

    Count maps keep raw expected counts; ``scaling`` records the
    normalization applied when the map is rendered.
    """

    grid: GridSpec
    values: np.ndarray
    mask: np.ndarray | None = None
    kind: str = "count"
    category: int | None = None
    label: str | None = None
    scaling: str = "minmax"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64 if self.kind == "count" else np.int64)
        if self.mask is None:
            self.mask = np.zeros(self.grid.shape, dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.grid.shape or self.mask.shape != self.grid.shape:
            raise ShapeError(
                f"Map values {self.values.shape} / mask {self.mask.shape} do not match grid {self.grid.shape}"
            )
        if self.kind not in MAP_KINDS:
            raise ParameterError(f"Unknown map kind '{self.kind}'. Must be one of: {', '.join(MAP_KINDS)}")
        if self.scaling not in SCALINGS:
            raise ParameterError(f"Unknown scaling '{self.scaling}'. Must be one of: {', '.join(SCALINGS)}")

    def valid_values(self) -> np.ndarray:
        return self.values[~self.mask]

    def to_sidecar(self) -> dict:
        valid = self.valid_values()
        finite = valid[np.isfinite(valid)] if valid.size else valid
        return {
            **self.grid.to_dict(),
            "kind": self.kind,
            "category": self.category,
            "label": self.label,
            "scaling": self.scaling,
            "value_min": float(finite.min()) if finite.size else None,
            "value_max": float(finite.max()) if finite.size else None,
            "nodata_cells": int(self.mask.sum()),
        }


def write_sidecar(raster: RasterMap, path: str | Path, extra: dict | None = None) -> Path:
    """Write the map's metadata as JSON next to its image."""
    path = Path(path)
    payload = raster.to_sidecar()
    if extra:
        payload.update(extra)
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return path


def _check_category(category: int, category_count: int) -> None:
    if not 0 <= category < category_count:
        raise ParameterError(f"Category {category} outside [0, {category_count})")


# =============================================================================
# Baseline Map
# =============================================================================

def _squared_distances(lat_c: np.ndarray, lon_c: np.ndarray, lat_s: np.ndarray, lon_s: np.ndarray) -> np.ndarray:
    """Equirectangular squared distance (degrees²) between each cell and each sample."""
    mid = np.radians((lat_c[:, None] + lat_s[None, :]) / 2.0)
    dx = (lon_s[None, :] - lon_c[:, None]) * np.cos(mid)
    dy = lat_s[None, :] - lat_c[:, None]
    return dx * dx + dy * dy


def baseline_map(
    samples: list[GeoSample],
    category: int,
    grid: GridSpec,
    bandwidth: float = DEFAULT_BANDWIDTH_DEG,
) -> RasterMap:
    """Gaussian-kernel weighted average of observed counts at each cell centre.

    Cells with no sample within ``NODATA_RADIUS_BANDWIDTHS`` bandwidths are
    masked as no-data.
    """
    if not (bandwidth > 0 and math.isfinite(bandwidth)):
        raise ParameterError(f"bandwidth must be a positive number of degrees (got {bandwidth})")
    if not samples:
        raise ParameterError("baseline_map needs at least one sample")
    counts = stack_counts(samples)
    _check_category(category, counts.shape[1])

    values = counts[:, category]
    lat_s = np.array([s.lat for s in samples])
    lon_s = np.array([s.lon for s in samples])
    lat_c, lon_c = (a.ravel() for a in grid.cell_centers())

    out = np.zeros(lat_c.shape[0])
    mask = np.zeros(lat_c.shape[0], dtype=bool)
    cutoff = (NODATA_RADIUS_BANDWIDTHS * bandwidth) ** 2
    block = max(1, _BASELINE_BLOCK_ELEMENTS // len(samples))
    for start in range(0, lat_c.shape[0], block):
        sl = slice(start, start + block)
        d2 = _squared_distances(lat_c[sl], lon_c[sl], lat_s, lon_s)
        nearest = d2.min(axis=1)
        # Shifting by the nearest distance cancels in the ratio and keeps exp() from underflowing
        w = np.exp(-(d2 - nearest[:, None]) / (2.0 * bandwidth ** 2))
        out[sl] = (w @ values) / w.sum(axis=1)
        mask[sl] = nearest > cutoff

    out[mask] = 0.0
    logger.debug(
        f"Baseline map {grid.rows}x{grid.cols}, category {category}, "
        f"bandwidth {bandwidth}: {int(mask.sum())} no-data cells"
    )
    return RasterMap(grid, out.reshape(grid.shape), mask.reshape(grid.shape), kind="count", category=category)


# =============================================================================
# Model Products
# =============================================================================

def tiles_to_grid(samples: list[GeoSample], grid: GridSpec) -> list[list[GeoSample | None]]:
    """Assign samples to cells; where several share a cell the one nearest its centre wins (ties by id)."""
    cells: list[list[GeoSample | None]] = [[None] * grid.cols for _ in range(grid.rows)]
    lat_c, lon_c = grid.cell_centers()
    best: dict[tuple[int, int], tuple[float, str]] = {}
    for s in samples:
        cell = grid.cell_of(s.lat, s.lon)
        if cell is None:
            continue
        r, c = cell
        key = ((s.lat - lat_c[r, c]) ** 2 + (s.lon - lon_c[r, c]) ** 2, s.id)
        if cell not in best or key < best[cell]:
            best[cell] = key
            cells[r][c] = s
    return cells


def model_heatmap(
    weights: ModelWeights,
    config: ModelConfig,
    tiles: Sequence[Sequence[OverheadTile | None]],
    category: int,
    grid: GridSpec,
) -> RasterMap:
    """Expected count of ``category`` predicted for the tile in each cell.

    ``tiles`` is rows x cols; a None entry becomes a no-data cell.
    """
    if len(tiles) != grid.rows or any(len(row) != grid.cols for row in tiles):
        raise ShapeError(f"Tile grid does not match {grid.rows}x{grid.cols}")
    _check_category(category, config.category_count)

    present = []
    values = np.zeros(grid.shape)
    mask = np.ones(grid.shape, dtype=bool)
    for r, row in enumerate(tiles):
        for c, tile in enumerate(row):
            if tile is None:
                logger.warning(f"No tile for cell ({r}, {c}); marking it no-data")
            else:
                present.append((r, c, tile.pixels))
    if not present:
        raise ParameterError("Tile grid is empty; nothing to predict")

    params = predict(weights, config, np.stack([p for _, _, p in present]))
    expected = expected_count(params)[:, category]
    for (r, c, _), value in zip(present, expected):
        values[r, c] = value
        mask[r, c] = False
    return RasterMap(grid, values, mask, kind="count", category=category, scaling="minmax")


def top_k_tiles(
    weights: ModelWeights,
    config: ModelConfig,
    samples: list[GeoSample],
    category: int,
    k: int,
) -> list[tuple[str, float]]:
    """The k samples with the highest expected count; ties go to the smaller id."""
    if k < 1 or k > len(samples):
        raise ParameterError(f"k must be in [1, {len(samples)}] (got {k})")
    _check_category(category, config.category_count)
    expected = expected_count(predict(weights, config, sample_inputs(samples, config)))[:, category]
    ranked = sorted(zip(samples, expected), key=lambda pair: (-pair[1], pair[0].id))
    return [(s.id, float(v)) for s, v in ranked[:k]]


# =============================================================================
# Clustering
# =============================================================================

@dataclass(eq=False)
class ClusterModel:
    """Result of k-means: centroids, assignments and the best run's inertia trace."""

    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    seed: int
    restarts: int
    log_space: bool = False
    inertia_history: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "centroids": self.centroids.tolist(),
            "inertia": self.inertia,
            "seed": self.seed,
            "restarts": self.restarts,
            "log_space": self.log_space,
            "assignments": [int(a) for a in self.assignments],
            "inertia_history": self.inertia_history,
        }


def _sq_dists(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centroids[None, :, :]
    return (diff * diff).sum(axis=2)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: each new centre drawn with probability ∝ squared distance."""
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = _sq_dists(x, centroids[:1])[:, 0]
    for i in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centroids[i] = x[idx]
        d2 = np.minimum(d2, _sq_dists(x, centroids[i:i + 1])[:, 0])
    return centroids


def _lloyd(
    x: np.ndarray,
    centroids: np.ndarray,
    max_iter: int,
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    k = centroids.shape[0]
    rows = np.arange(x.shape[0])
    labels = None
    history: list[float] = []
    for _ in range(max_iter):
        d2 = _sq_dists(x, centroids)
        new_labels = d2.argmin(axis=1)
        history.append(float(d2[rows, new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            return centroids, labels, history
        labels = new_labels

        own = d2[rows, labels].copy()
        centroids = centroids.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                centroids[j] = x[members].mean(axis=0)
            else:
                far = int(own.argmax())
                centroids[j] = x[far]
                own[far] = -1.0

    d2 = _sq_dists(x, centroids)
    labels = d2.argmin(axis=1)
    history.append(float(d2[rows, labels].sum()))
    logger.debug(f"k-means stopped at the {max_iter}-iteration limit")
    return centroids, labels, history


def cluster_params(
    vectors,
    k: int = DEFAULT_CLUSTERS,
    seed: int = 0,
    restarts: int = DEFAULT_RESTARTS,
    log_space: bool = False,
    max_iter: int = MAX_LLOYD_ITERATIONS,
) -> ClusterModel:
    """k-means over predicted parameter vectors, keeping the best of ``restarts`` runs.

    Args:
        vectors: N x C parameter vectors (e.g. predicted Poisson rates)
        log_space: cluster log-parameters instead of raw values

    Raises:
        ParameterError: k outside [1, N], or restarts < 1
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ShapeError(f"Expected an N x C matrix of parameter vectors, got shape {x.shape}")
    n = x.shape[0]
    if k < 1 or k > n:
        raise ParameterError(f"k must be in [1, {n}] (got {k})")
    if restarts < 1:
        raise ParameterError(f"restarts must be >= 1 (got {restarts})")
    if not np.all(np.isfinite(x)):
        raise NumericError("Parameter vectors contain non-finite values")
    if log_space:
        if np.any(x <= 0):
            raise DomainError("log_space clustering needs strictly positive parameters")
        x = np.log(x)

    rng = np.random.default_rng(seed)
    best = None
    for run in range(restarts):
        centroids, labels, history = _lloyd(x, _kmeans_pp(x, k, rng), max_iter)
        if logger.isEnabledFor(logging.DEBUG):
            logger.debug(f"restart {run}: inertia {history[-1]:.6g} after {len(history)} assignment steps")
        if best is None or history[-1] < best[2][-1]:
            best = (centroids, labels, history)

    centroids, labels, history = best
    return ClusterModel(
        centroids=centroids,
        assignments=labels,
        inertia=history[-1],
        seed=seed,
        restarts=restarts,
        log_space=log_space,
        inertia_history=history,
    )


def cluster_map(grid: GridSpec, cells: Sequence[tuple[int, int]], model: ClusterModel) -> RasterMap:
    """Place cluster ids on a grid; cells not listed are no-data."""
    if len(cells) != len(model.assignments):
        raise ShapeError(f"{len(cells)} cells for {len(model.assignments)} assignments")
    values = np.zeros(grid.shape, dtype=np.int64)
    mask = np.ones(grid.shape, dtype=bool)
    for (r, c), label in zip(cells, model.assignments):
        values[r, c] = label
        mask[r, c] = False
    return RasterMap(grid, values, mask, kind="cluster", scaling="none")


# =============================================================================
# Rendering
# =============================================================================

def _green_scale(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    valid = values[~mask]
    lo, hi = (float(valid.min()), float(valid.max())) if valid.size else (0.0, 0.0)
    span = hi - lo
    t = np.zeros_like(values) if span <= 0 else (values - lo) / span
    low = np.asarray(GREEN_LOW, dtype=np.float64)
    high = np.asarray(GREEN_HIGH, dtype=np.float64)
    return np.round(low + t[..., None] * (high - low))


def _categorical(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    ids = values[~mask]
    if ids.size and (np.any(ids < 0) or np.any(ids != np.round(ids))):
        raise RenderError("Categorical maps need non-negative integer ids")
    palette = np.asarray(CLUSTER_COLORS, dtype=np.float64)
    safe = np.where(mask, 0, values).astype(np.int64)
    return palette[safe % len(CLUSTER_COLORS)]


def render_raster(raster: RasterMap, palette: str = "green", cell_pixels: int = 1) -> bytes:
    """Render a map as a binary PPM (P6, maxval 255); no-data cells are black.

    Raises:
        RenderError: a non-masked cell is non-finite
    """
    palette = PALETTES.normalize(palette)
    if cell_pixels < 1:
        raise ParameterError(f"cell_pixels must be >= 1 (got {cell_pixels})")
    values = raster.values.astype(np.float64)
    mask = raster.mask
    if not np.all(np.isfinite(values[~mask])):
        raise RenderError("Map contains non-finite values outside no-data cells")

    rgb = _green_scale(values, mask) if palette == "green" else _categorical(values, mask)
    rgb[mask] = NODATA_COLOR
    image = rgb.astype(np.uint8)
    if cell_pixels > 1:
        image = np.repeat(np.repeat(image, cell_pixels, axis=0), cell_pixels, axis=1)

    buffer = io.BytesIO()
    Image.fromarray(image).save(buffer, format="PPM")
    return buffer.getvalue()
