"""Shared fixtures and the finite-difference gradient harness."""

from typing import Callable

import numpy as np
import pytest

from overhead_counts.counts import GeoSample, ObjectHistogram
from overhead_counts.net import ConvSpec, ModelConfig
from overhead_counts.tiles import GeoBounds, OverheadTile


def numerical_grad(
    f: Callable[[], float],
    x: np.ndarray,
    h: float = 1e-5,
    indices=None,
) -> np.ndarray:
    """Central differences of ``f`` wrt entries of ``x``, perturbed in place.

    ``f`` takes no arguments and reads ``x``. Only ``indices`` (flat) are
    evaluated when given; the rest of the result stays zero.
    """
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f()
        flat[i] = orig - h
        f_minus = f()
        flat[i] = orig
        out[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def desk_config():
    """Small tile-mode network: two convs (one strided), two dense layers, C=5."""
    return ModelConfig(
        input_mode="tile",
        input_shape=(8, 8, 1),
        conv_layers=[ConvSpec(4, 3, 1), ConvSpec(4, 3, 2)],
        hidden_width=16,
        hidden_layers=2,
        category_count=5,
        family="poisson",
    )


@pytest.fixture
def features_config():
    return ModelConfig(
        input_mode="features",
        input_shape=(3,),
        conv_layers=[],
        hidden_width=8,
        hidden_layers=2,
        category_count=4,
        family="poisson",
    )


def make_sample(sample_id: str, counts, lat: float = 37.75, lon: float = -122.45, pixels=None, features=None) -> GeoSample:
    tile = None
    if pixels is not None:
        tile = OverheadTile(np.asarray(pixels, dtype=np.float64), GeoBounds.around(lat, lon))
    return GeoSample(
        id=sample_id,
        lat=lat,
        lon=lon,
        histogram=ObjectHistogram(tuple(counts)),
        tile=tile,
        features=features,
    )
