"""The count-distribution network with explicit forward and backward passes.

Pipeline::

    [conv -> leaky-ReLU]*  -> flatten                      (tile mode only)
    [dense -> batch-norm -> leaky-ReLU] * hidden_layers
    head dense layer(s) -> softplus                        (1 head Poisson, 2 NB/Gaussian)

Batch-norm (per feature, over the batch):
    μ = mean_n x_n,  σ² = mean_n (x_n - μ)²  (biased)
    x̂ = (x - μ) / √(σ² + ε),  y = γ x̂ + β
Train mode normalizes with batch statistics and folds them into the running
statistics: running = momentum * running + (1 - momentum) * batch.
Infer mode uses the running statistics and mutates nothing.

All tensors are float64; convolutions use 'valid' padding with kernels stored
as (k, k, in_channels, filters).
"""

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import dists
from .constants import DEFAULT_CATEGORY_COUNT, FAMILIES, FAMILY_HEADS, INPUT_MODES
from .errors import ConfigError, ShapeError, StateError

logger = logging.getLogger("overhead_counts.net")

MODES = ("train", "infer")


# =============================================================================
# Configuration
# =============================================================================

@dataclass
class ConvSpec:
    """One convolution layer of the feature extractor."""

    filters: int
    kernel: int = 3
    stride: int = 1

    def to_dict(self) -> dict:
        return {"filters": self.filters, "kernel": self.kernel, "stride": self.stride}

    @classmethod
    def from_dict(cls, data: dict) -> "ConvSpec":
        return cls(
            filters=int(data["filters"]),
            kernel=int(data.get("kernel", 3)),
            stride=int(data.get("stride", 1)),
        )


def _default_extractor() -> list[ConvSpec]:
    return [ConvSpec(8, 3, 1), ConvSpec(8, 3, 2)]


@dataclass
class ModelConfig:
    """Architecture of the network.

    ``input_shape`` is (H, W, channels) in tile mode and (D,) in features
    mode. The conv extractor applies only in tile mode; an empty list
    flattens the raw pixels.
    """

    input_mode: str = "tile"
    input_shape: tuple[int, ...] = (8, 8, 3)
    conv_layers: list[ConvSpec] = field(default_factory=_default_extractor)
    hidden_width: int = 64
    hidden_layers: int = 2
    category_count: int = DEFAULT_CATEGORY_COUNT
    family: str = "poisson"
    leaky_slope: float = 0.01
    bn_momentum: float = 0.99
    bn_epsilon: float = 1e-5

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)

    def validate(self) -> None:
        try:
            self.input_mode = INPUT_MODES.normalize(self.input_mode)
            self.family = FAMILIES.normalize(self.family)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        expected_rank = 3 if self.input_mode == "tile" else 1
        if len(self.input_shape) != expected_rank or min(self.input_shape) < 1:
            raise ConfigError(
                f"input_shape {self.input_shape} invalid for {self.input_mode} mode"
            )
        if self.hidden_width < 1:
            raise ConfigError(f"hidden_width must be >= 1 (got {self.hidden_width})")
        if self.hidden_layers < 1:
            raise ConfigError(f"hidden_layers must be >= 1 (got {self.hidden_layers})")
        if self.category_count < 1:
            raise ConfigError(f"category_count must be >= 1 (got {self.category_count})")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigError(f"leaky_slope must be in (0, 1) (got {self.leaky_slope})")
        if not 0.0 < self.bn_momentum < 1.0:
            raise ConfigError(f"bn_momentum must be in (0, 1) (got {self.bn_momentum})")
        if self.bn_epsilon <= 0:
            raise ConfigError(f"bn_epsilon must be > 0 (got {self.bn_epsilon})")
        for spec in self.conv_layers:
            if spec.filters < 1 or spec.kernel < 1 or spec.stride < 1:
                raise ConfigError(f"Invalid conv layer {spec}")
        self.extractor_shapes()

    @property
    def head_count(self) -> int:
        return FAMILY_HEADS[FAMILIES.normalize(self.family)]

    def extractor_shapes(self) -> list[tuple[int, int, int]]:
        """Output shape (H, W, filters) of each conv layer."""
        if self.input_mode != "tile":
            return []
        h, w, _ = self.input_shape
        shapes = []
        for i, spec in enumerate(self.conv_layers):
            if spec.kernel > h or spec.kernel > w:
                raise ConfigError(
                    f"conv{i}: kernel {spec.kernel} larger than its {h}x{w} input"
                )
            h = (h - spec.kernel) // spec.stride + 1
            w = (w - spec.kernel) // spec.stride + 1
            shapes.append((h, w, spec.filters))
        return shapes

    def flat_width(self) -> int:
        """Width of the vector entering the first dense layer."""
        if self.input_mode == "features":
            return self.input_shape[0]
        shapes = self.extractor_shapes()
        h, w, c = shapes[-1] if shapes else self.input_shape
        return h * w * c

    def to_dict(self) -> dict:
        return {
            "input_mode": self.input_mode,
            "input_shape": list(self.input_shape),
            "conv_layers": [c.to_dict() for c in self.conv_layers],
            "hidden_width": self.hidden_width,
            "hidden_layers": self.hidden_layers,
            "category_count": self.category_count,
            "family": self.family,
            "leaky_slope": self.leaky_slope,
            "bn_momentum": self.bn_momentum,
            "bn_epsilon": self.bn_epsilon,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        defaults = cls()
        conv = data.get("conv_layers")
        try:
            return cls(
                input_mode=str(data.get("input_mode", defaults.input_mode)),
                input_shape=tuple(data.get("input_shape", defaults.input_shape)),
                conv_layers=[ConvSpec.from_dict(c) for c in conv] if conv is not None else _default_extractor(),
                hidden_width=int(data.get("hidden_width", defaults.hidden_width)),
                hidden_layers=int(data.get("hidden_layers", defaults.hidden_layers)),
                category_count=int(data.get("category_count", defaults.category_count)),
                family=str(data.get("family", defaults.family)),
                leaky_slope=float(data.get("leaky_slope", defaults.leaky_slope)),
                bn_momentum=float(data.get("bn_momentum", defaults.bn_momentum)),
                bn_epsilon=float(data.get("bn_epsilon", defaults.bn_epsilon)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"Invalid model config: {e}") from e


# =============================================================================
# Weights
# =============================================================================

@dataclass(eq=False)
class ModelWeights:
    """Trainable tensors plus batch-norm running statistics.

    ``version`` counts optimizer updates; a forward cache records the version
    it was computed at so a backward pass can detect stale caches.
    """

    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    version: int = 0

    def copy(self) -> "ModelWeights":
        return ModelWeights(
            params={k: v.copy() for k, v in self.params.items()},
            buffers={k: v.copy() for k, v in self.buffers.items()},
            version=self.version,
        )

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def parameter_count(self) -> int:
        return sum(v.size for v in self.params.values())


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    """Uniform on [-a, a] with a = sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name and shape of every trainable tensor, in forward order."""
    shapes: dict[str, tuple[int, ...]] = {}
    if config.input_mode == "tile":
        channels = config.input_shape[2]
        for i, spec in enumerate(config.conv_layers):
            shapes[f"conv{i}.kernel"] = (spec.kernel, spec.kernel, channels, spec.filters)
            shapes[f"conv{i}.bias"] = (spec.filters,)
            channels = spec.filters

    width = config.flat_width()
    h = config.hidden_width
    for i in range(config.hidden_layers):
        shapes[f"dense{i}.kernel"] = (width, h)
        shapes[f"dense{i}.bias"] = (h,)
        shapes[f"bn{i}.gamma"] = (h,)
        shapes[f"bn{i}.beta"] = (h,)
        width = h

    for j in range(config.head_count):
        shapes[f"head{j}.kernel"] = (h, config.category_count)
        shapes[f"head{j}.bias"] = (config.category_count,)
    return shapes


def buffer_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    h = config.hidden_width
    shapes: dict[str, tuple[int, ...]] = {}
    for i in range(config.hidden_layers):
        shapes[f"bn{i}.running_mean"] = (h,)
        shapes[f"bn{i}.running_var"] = (h,)
    return shapes


def _fans(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 4:
        area = shape[0] * shape[1]
        return area * shape[2], area * shape[3]
    return shape[0], shape[1]


def glorot_init(config: ModelConfig, seed: int) -> ModelWeights:
    """Glorot-uniform kernels, zero biases, γ=1, β=0; deterministic per seed."""
    config.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".kernel"):
            fan_in, fan_out = _fans(shape)
            params[name] = glorot_uniform(rng, shape, fan_in=fan_in, fan_out=fan_out)
        elif name.endswith(".gamma"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    buffers = {
        name: np.ones(shape) if name.endswith("running_var") else np.zeros(shape)
        for name, shape in buffer_shapes(config).items()
    }
    return ModelWeights(params=params, buffers=buffers)


# =============================================================================
# Layer Primitives
# =============================================================================

def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x >= 0, x, slope * x)


def leaky_relu_grad(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x >= 0, 1.0, slope)


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    constant: np.ndarray


# Batch spread at or below this fraction of a column's magnitude counts as
# a constant column.
CONSTANT_COLUMN_RTOL = 1e-9


def batch_norm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float) -> tuple[np.ndarray, BatchNormCache]:
    """Normalize with batch statistics (biased variance), then scale and shift.

    A column constant over the batch (to rounding) gets xhat exactly 0, and
    ``batch_norm_backward`` returns exactly 0 for its input gradient.
    """
    mean = x.mean(axis=0)
    var = x.var(axis=0)
    constant = np.sqrt(var) <= CONSTANT_COLUMN_RTOL * np.maximum(1.0, np.abs(x).max(axis=0))
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = np.where(constant, 0.0, (x - mean) * inv_std)
    return gamma * xhat + beta, BatchNormCache(xhat, inv_std, gamma, mean, var, constant)


def batch_norm_infer(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float,
) -> np.ndarray:
    return gamma * (x - running_mean) / np.sqrt(running_var + eps) + beta


def batch_norm_backward(dy: np.ndarray, cache: BatchNormCache) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dx, dγ, dβ), including the paths through the batch statistics."""
    n = dy.shape[0]
    d_gamma = (dy * cache.xhat).sum(axis=0)
    d_beta = dy.sum(axis=0)
    dxhat = dy * cache.gamma
    dx = (cache.inv_std / n) * (
        n * dxhat - dxhat.sum(axis=0) - cache.xhat * (dxhat * cache.xhat).sum(axis=0)
    )
    dx[:, cache.constant] = 0.0
    return dx, d_gamma, d_beta


def _im2col(x: np.ndarray, kernel: int, stride: int) -> tuple[np.ndarray, int, int]:
    """Rows of flattened (k, k, c) patches, one per output position."""
    n, _, _, c = x.shape
    windows = sliding_window_view(x, (kernel, kernel), axis=(1, 2))[:, ::stride, ::stride]
    oh, ow = windows.shape[1], windows.shape[2]
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, kernel * kernel * c)
    return cols, oh, ow


def _col2im(dcols: np.ndarray, in_shape: tuple[int, ...], kernel: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, _, _, c = in_shape
    patches = dcols.reshape(n, oh, ow, kernel, kernel, c)
    dx = np.zeros(in_shape)
    for i in range(kernel):
        for j in range(kernel):
            dx[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += patches[:, :, :, i, j, :]
    return dx


# =============================================================================
# Forward / Backward
# =============================================================================

@dataclass
class _ConvCache:
    cols: np.ndarray
    in_shape: tuple[int, ...]
    pre: np.ndarray
    oh: int
    ow: int


@dataclass
class _DenseCache:
    x: np.ndarray
    bn: BatchNormCache
    pre: np.ndarray


@dataclass
class ForwardCache:
    """Intermediate values a train-mode forward keeps for the backward pass."""

    version: int
    batch_size: int
    conv: list[_ConvCache] = field(default_factory=list)
    dense: list[_DenseCache] = field(default_factory=list)
    hidden: np.ndarray | None = None


@dataclass
class ForwardResult:
    raw: list[np.ndarray]
    params: dists.CountParams
    cache: ForwardCache | None


def _check_inputs(config: ModelConfig, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != len(config.input_shape) + 1 or x.shape[1:] != tuple(config.input_shape):
        raise ShapeError(
            f"Expected inputs of shape (N, {', '.join(map(str, config.input_shape))}), got {x.shape}"
        )
    return x


def forward(
    weights: ModelWeights,
    config: ModelConfig,
    inputs,
    mode: str = "infer",
) -> ForwardResult:
    """Run the network on a batch.

    Returns raw head outputs, linked parameters, and (train mode only) the
    cache needed by ``backward``. Train mode updates the running statistics
    in ``weights.buffers`` in place.

    Raises:
        ShapeError: input shape mismatch, or fewer than 2 samples in train mode
    """
    if mode not in MODES:
        raise ConfigError(f"Unknown mode '{mode}'. Must be one of: {', '.join(MODES)}")
    x = _check_inputs(config, inputs)
    n = x.shape[0]
    training = mode == "train"
    if training and n < 2:
        raise ShapeError(f"Train mode needs at least 2 samples for batch statistics (got {n})")

    p = weights.params
    slope = config.leaky_slope
    cache = ForwardCache(version=weights.version, batch_size=n) if training else None

    h = x
    if config.input_mode == "tile":
        for i, spec in enumerate(config.conv_layers):
            cols, oh, ow = _im2col(h, spec.kernel, spec.stride)
            kernel = p[f"conv{i}.kernel"]
            pre = (cols @ kernel.reshape(-1, spec.filters) + p[f"conv{i}.bias"]).reshape(n, oh, ow, spec.filters)
            if cache is not None:
                cache.conv.append(_ConvCache(cols, h.shape, pre, oh, ow))
            h = leaky_relu(pre, slope)
    h = h.reshape(n, -1)

    for i in range(config.hidden_layers):
        a = h @ p[f"dense{i}.kernel"] + p[f"dense{i}.bias"]
        gamma, beta = p[f"bn{i}.gamma"], p[f"bn{i}.beta"]
        running_mean = weights.buffers[f"bn{i}.running_mean"]
        running_var = weights.buffers[f"bn{i}.running_var"]
        if training:
            y, bn_cache = batch_norm_forward(a, gamma, beta, config.bn_epsilon)
            m = config.bn_momentum
            running_mean[...] = m * running_mean + (1.0 - m) * bn_cache.mean
            running_var[...] = m * running_var + (1.0 - m) * bn_cache.var
            cache.dense.append(_DenseCache(h, bn_cache, y))
        else:
            y = batch_norm_infer(a, gamma, beta, running_mean, running_var, config.bn_epsilon)
        h = leaky_relu(y, slope)

    raw = [h @ p[f"head{j}.kernel"] + p[f"head{j}.bias"] for j in range(config.head_count)]
    if cache is not None:
        cache.hidden = h
    return ForwardResult(raw=raw, params=dists.link(config.family, raw), cache=cache)


def backward(
    weights: ModelWeights,
    config: ModelConfig,
    cache: ForwardCache | None,
    grad_raw: Sequence[np.ndarray],
) -> dict[str, np.ndarray]:
    """Exact gradients of the loss wrt every trainable tensor.

    Args:
        cache: From a train-mode ``forward`` at the current weights version
        grad_raw: dLoss/d(raw head output), one N x C array per head

    Raises:
        StateError: missing cache, or weights updated since the forward pass
    """
    if cache is None or cache.hidden is None:
        raise StateError("No forward cache; run forward in train mode first")
    if cache.version != weights.version:
        raise StateError(
            f"Stale forward cache (weights version {weights.version}, cache {cache.version})"
        )
    if len(grad_raw) != config.head_count:
        raise ShapeError(f"Expected {config.head_count} head gradient(s), got {len(grad_raw)}")

    p = weights.params
    slope = config.leaky_slope
    grads: dict[str, np.ndarray] = {}
    n = cache.batch_size

    h = cache.hidden
    dh = np.zeros_like(h)
    for j, g in enumerate(grad_raw):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != (n, config.category_count):
            raise ShapeError(f"head{j} gradient shape {g.shape}, expected {(n, config.category_count)}")
        grads[f"head{j}.kernel"] = h.T @ g
        grads[f"head{j}.bias"] = g.sum(axis=0)
        dh += g @ p[f"head{j}.kernel"].T

    for i in reversed(range(config.hidden_layers)):
        layer = cache.dense[i]
        dy = dh * leaky_relu_grad(layer.pre, slope)
        da, grads[f"bn{i}.gamma"], grads[f"bn{i}.beta"] = batch_norm_backward(dy, layer.bn)
        grads[f"dense{i}.kernel"] = layer.x.T @ da
        grads[f"dense{i}.bias"] = da.sum(axis=0)
        dh = da @ p[f"dense{i}.kernel"].T

    if config.input_mode == "tile" and config.conv_layers:
        dh = dh.reshape(cache.conv[-1].pre.shape)
        for i in reversed(range(len(config.conv_layers))):
            spec = config.conv_layers[i]
            layer = cache.conv[i]
            dz = (dh * leaky_relu_grad(layer.pre, slope)).reshape(-1, spec.filters)
            kernel = p[f"conv{i}.kernel"]
            grads[f"conv{i}.kernel"] = (layer.cols.T @ dz).reshape(kernel.shape)
            grads[f"conv{i}.bias"] = dz.sum(axis=0)
            if i > 0:
                dcols = dz @ kernel.reshape(-1, spec.filters).T
                dh = _col2im(dcols, layer.in_shape, spec.kernel, spec.stride, layer.oh, layer.ow)

    return {name: grads[name] for name in p}


def predict(
    weights: ModelWeights,
    config: ModelConfig,
    inputs,
    batch_size: int = 256,
) -> dists.CountParams:
    """Infer-mode parameters for any number of inputs, in chunks."""
    x = _check_inputs(config, inputs)
    if x.shape[0] == 0:
        raise ShapeError("predict needs at least one input")
    means, spreads = [], []
    for start in range(0, x.shape[0], batch_size):
        params = forward(weights, config, x[start:start + batch_size], mode="infer").params
        means.append(params.mean)
        if params.spread is not None:
            spreads.append(params.spread)
    return dists.CountParams(
        config.family,
        np.concatenate(means),
        np.concatenate(spreads) if spreads else None,
    )
