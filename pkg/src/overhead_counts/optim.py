"""Nesterov-Adam (Nadam) over the model's parameter dictionary.

Update at step t (after increment), per tensor:
    m  = β₁ m + (1 - β₁) g
    v  = β₂ v + (1 - β₂) g²
    m̂  = m / (1 - β₁^(t+1))
    m̃  = β₁ m̂ + (1 - β₁) g / (1 - β₁^t)
    w  = w - lr m̃ / (√(v / (1 - β₂^t)) + ε)

No momentum-decay schedule, no weight decay; optional global-norm clipping.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ParameterError, ShapeError
from .net import ModelWeights

logger = logging.getLogger("overhead_counts.optim")


@dataclass
class NadamConfig:
    """Optimizer hyperparameters. The learning rate default is 2e-5."""

    learning_rate: float = 2e-5
    beta_1: float = 0.9
    beta_2: float = 0.999
    epsilon: float = 1e-8
    clip_norm: float | None = None

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ParameterError(f"learning_rate must be > 0 (got {self.learning_rate})")
        for name in ("beta_1", "beta_2"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ParameterError(f"{name} must be in [0, 1) (got {value})")
        if not self.epsilon > 0:
            raise ParameterError(f"epsilon must be > 0 (got {self.epsilon})")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ParameterError(f"clip_norm must be > 0 when set (got {self.clip_norm})")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "beta_1": self.beta_1,
            "beta_2": self.beta_2,
            "epsilon": self.epsilon,
            "clip_norm": self.clip_norm,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NadamConfig":
        defaults = cls()
        clip = data.get("clip_norm")
        return cls(
            learning_rate=float(data.get("learning_rate", defaults.learning_rate)),
            beta_1=float(data.get("beta_1", defaults.beta_1)),
            beta_2=float(data.get("beta_2", defaults.beta_2)),
            epsilon=float(data.get("epsilon", defaults.epsilon)),
            clip_norm=float(clip) if clip is not None else None,
        )


@dataclass(eq=False)
class NadamState:
    """First/second moments shaped like the parameters, and the step count."""

    config: NadamConfig
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    def copy(self) -> "NadamState":
        return NadamState(
            config=NadamConfig.from_dict(self.config.to_dict()),
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
            t=self.t,
        )


def init_state(weights: ModelWeights, hyperparams: NadamConfig | None = None) -> NadamState:
    """Zero moments at t = 0."""
    config = hyperparams or NadamConfig()
    config.validate()
    return NadamState(
        config=config,
        m=weights.zeros_like(),
        v=weights.zeros_like(),
        t=0,
    )


def _check_grads(state: NadamState, weights: ModelWeights, grads: dict[str, np.ndarray]) -> None:
    if set(grads) != set(weights.params) or set(state.m) != set(weights.params):
        raise ShapeError(
            "Gradient/state tensors do not match weights: "
            f"{sorted(set(grads) ^ set(weights.params)) or sorted(set(state.m) ^ set(weights.params))}"
        )
    for name, w in weights.params.items():
        g = grads[name]
        if g.shape != w.shape or state.m[name].shape != w.shape:
            raise ShapeError(f"{name}: gradient {g.shape} / moment {state.m[name].shape} vs weight {w.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"Non-finite gradient in tensor '{name}'")


def _clip(grads: dict[str, np.ndarray], clip_norm: float | None) -> dict[str, np.ndarray]:
    if clip_norm is None:
        return grads
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= clip_norm:
        return grads
    logger.debug(f"Clipping gradient norm {norm:.4g} to {clip_norm}")
    scale = clip_norm / norm
    return {k: g * scale for k, g in grads.items()}


def nadam_step(
    state: NadamState,
    weights: ModelWeights,
    grads: dict[str, np.ndarray],
) -> tuple[NadamState, ModelWeights]:
    """One Nadam update. Inputs are left untouched; new state and weights are returned.

    Raises:
        ShapeError: gradient or state tensors do not match the weights
        NumericError: a gradient entry is non-finite (names the tensor)
    """
    _check_grads(state, weights, grads)
    grads = _clip(grads, state.config.clip_norm)
    c = state.config
    t = state.t + 1
    b1, b2 = c.beta_1, c.beta_2
    m_correction = 1.0 - b1 ** (t + 1)
    g_correction = 1.0 - b1 ** t
    v_correction = 1.0 - b2 ** t

    new_m, new_v, new_params = {}, {}, {}
    for name, w in weights.params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_bar = b1 * (m / m_correction) + (1.0 - b1) * g / g_correction
        new_params[name] = w - c.learning_rate * m_bar / (np.sqrt(v / v_correction) + c.epsilon)
        new_m[name] = m
        new_v[name] = v

    new_state = NadamState(config=c, m=new_m, v=new_v, t=t)
    new_weights = ModelWeights(
        params=new_params,
        buffers={k: b.copy() for k, b in weights.buffers.items()},
        version=weights.version + 1,
    )
    return new_state, new_weights
