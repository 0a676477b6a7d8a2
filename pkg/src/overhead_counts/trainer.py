"""Training loop, held-out evaluation and checkpoints.

Training minimizes the mean NLL (over samples and categories) with Nadam on
seeded mini-batches. Evaluation reports the held-out mean log-likelihood,
the negation of the mean over samples of ``sample_nll``.
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import read_container, write_container
from .constants import FAMILIES, INPUT_MODES, PARAM_FLOOR
from .counts import GeoSample, stack_counts
from .dists import CountParams, nll_matrix, raw_loss_and_grad
from .errors import CheckpointError, ConfigError, NumericError, ParameterError, ShapeError, TrainingError
from .net import (
    ModelConfig,
    ModelWeights,
    backward,
    buffer_shapes,
    forward,
    glorot_init,
    parameter_shapes,
    predict,
)
from .optim import NadamConfig, NadamState, init_state, nadam_step

logger = logging.getLogger("overhead_counts.trainer")


# =============================================================================
# Configuration
# =============================================================================

@dataclass
class TrainConfig:
    """Everything that determines a training run.

    The family lives on the model config (it fixes the head count); the
    ``family`` property is a shortcut.
    """

    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    nadam: NadamConfig = field(default_factory=NadamConfig)
    checkpoint_every: int = 0

    @property
    def family(self) -> str:
        return self.model.family

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1 (got {self.epochs})")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2 for batch statistics (got {self.batch_size})")
        if self.checkpoint_every < 0:
            raise ConfigError(f"checkpoint_every must be >= 0 (got {self.checkpoint_every})")
        self.model.validate()
        try:
            self.nadam.validate()
        except ParameterError as e:
            raise ConfigError(str(e)) from e

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "model": self.model.to_dict(),
            "nadam": self.nadam.to_dict(),
            "checkpoint_every": self.checkpoint_every,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        """Build from a JSON document; a top-level ``family`` overrides the model's."""
        defaults = cls()
        model = ModelConfig.from_dict(data.get("model", {}))
        if "family" in data:
            model.family = str(data["family"])
        try:
            config = cls(
                epochs=int(data.get("epochs", defaults.epochs)),
                batch_size=int(data.get("batch_size", defaults.batch_size)),
                seed=int(data.get("seed", defaults.seed)),
                model=model,
                nadam=NadamConfig.from_dict(data.get("nadam", {})),
                checkpoint_every=int(data.get("checkpoint_every", defaults.checkpoint_every)),
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid training config: {e}") from e
        return config


# =============================================================================
# Inputs
# =============================================================================

def sample_inputs(samples: list[GeoSample], config: ModelConfig) -> np.ndarray:
    """Stack tiles (tile mode) or feature vectors (features mode) into a batch."""
    if not samples:
        raise ParameterError("No samples given")
    rows = []
    for s in samples:
        if config.input_mode == "features":
            if s.features is None:
                raise ParameterError(f"Sample {s.id} has no feature vector (features input mode)")
            rows.append(np.asarray(s.features, dtype=np.float64))
        else:
            if s.tile is None:
                raise ParameterError(f"Sample {s.id} has no tile (tile input mode)")
            rows.append(s.tile.pixels)
    shapes = {r.shape for r in rows}
    if len(shapes) > 1:
        raise ShapeError(f"Samples have mixed input shapes: {sorted(shapes)}")
    return np.stack(rows)


def infer_input_shape(samples: list[GeoSample], input_mode: str) -> tuple[int, ...]:
    """Input shape of the first sample, for configs that leave it implicit."""
    probe = ModelConfig(input_mode=INPUT_MODES.normalize(input_mode))
    return tuple(sample_inputs(samples[:1], probe).shape[1:])


def _check_counts(samples: list[GeoSample], config: ModelConfig) -> np.ndarray:
    counts = stack_counts(samples)
    if counts.shape[1] != config.category_count:
        raise ShapeError(
            f"Histograms have {counts.shape[1]} categories, model expects {config.category_count}"
        )
    return counts


def _batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Consecutive slices of ``order``; a trailing singleton joins the previous batch."""
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


# =============================================================================
# Training
# =============================================================================

@dataclass
class EpochRecord:
    epoch: int
    mean_nll: float


@dataclass(eq=False)
class TrainResult:
    """Final weights, per-epoch loss history and the state needed to resume."""

    weights: ModelWeights
    history: list[EpochRecord]
    optimizer: NadamState
    rng_state: dict
    epoch: int


def train(
    config: TrainConfig,
    samples: list[GeoSample],
    checkpoint_path: str | Path | None = None,
    resume: "Checkpoint | None" = None,
) -> TrainResult:
    """Minimize the mean NLL of ``samples`` for ``config.epochs`` epochs.

    Initialization, shuffling and batch order derive from ``config.seed``.
    With ``resume``, training continues from a checkpoint's weights,
    optimizer moments and shuffle state until ``config.epochs``.

    Raises:
        TrainingError: non-finite loss or gradient (names epoch and batch)
    """
    config.validate()
    model = config.model
    if len(samples) < 2:
        raise ParameterError(f"Training needs at least 2 samples (got {len(samples)})")
    x = sample_inputs(samples, model)
    y = _check_counts(samples, model)
    n = x.shape[0]

    rng = np.random.default_rng([config.seed, 1])
    if resume is not None:
        if resume.config.model.to_dict() != model.to_dict():
            raise ConfigError("Checkpoint model config differs from the requested one")
        if resume.rng_state is None:
            raise CheckpointError("Checkpoint has no shuffle state; it cannot resume training")
        weights = resume.weights.copy()
        state = resume.optimizer.copy()
        rng.bit_generator.state = resume.rng_state
        history = list(resume.history)
        start = resume.epoch
        logger.info(f"Resuming {model.family} training at epoch {start + 1}")
    else:
        weights = glorot_init(model, config.seed)
        state = init_state(weights, config.nadam)
        history = []
        start = 0
        logger.info(
            f"Training {model.family} model: {weights.parameter_count()} parameters, "
            f"{n} samples, {config.epochs} epochs"
        )

    for epoch in range(start + 1, config.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for b, idx in enumerate(_batches(order, config.batch_size)):
            try:
                out = forward(weights, model, x[idx], mode="train")
                loss, grad_raw = raw_loss_and_grad(model.family, out.raw, y[idx])
            except NumericError as e:
                raise TrainingError(f"At epoch {epoch}, batch {b}: {e}", epoch=epoch, batch=b) from e
            if not np.isfinite(loss):
                raise TrainingError(f"Non-finite loss at epoch {epoch}, batch {b}", epoch=epoch, batch=b)
            grads = backward(weights, model, out.cache, grad_raw)
            try:
                state, weights = nadam_step(state, weights, grads)
            except NumericError as e:
                raise TrainingError(f"At epoch {epoch}, batch {b}: {e}", epoch=epoch, batch=b) from e
            total += loss * len(idx)

        mean_nll = total / n
        history.append(EpochRecord(epoch, mean_nll))
        logger.info(f"epoch {epoch}/{config.epochs} mean NLL {mean_nll:.6f}")

        if checkpoint_path and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            save_checkpoint(
                checkpoint_path, weights, state, config,
                epoch=epoch, rng_state=rng.bit_generator.state, history=history,
            )

    return TrainResult(
        weights=weights,
        history=history,
        optimizer=state,
        rng_state=rng.bit_generator.state,
        epoch=max(start, config.epochs),
    )


def write_loss_csv(history: list[EpochRecord], path: str | Path) -> Path:
    """Write ``epoch,mean_nll`` rows; values use repr so reruns compare byte-for-byte."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "mean_nll"])
        for record in history:
            writer.writerow([record.epoch, repr(record.mean_nll)])
    return path


# =============================================================================
# Evaluation
# =============================================================================

@dataclass
class EvalReport:
    """Held-out fit: mean log-likelihood and per-category mean NLL."""

    family: str
    mean_log_likelihood: float
    per_category_nll: list[float]
    sample_count: int

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "mean_log_likelihood": self.mean_log_likelihood,
            "per_category_nll": self.per_category_nll,
            "sample_count": self.sample_count,
        }


def _report(params: CountParams, counts: np.ndarray) -> EvalReport:
    nll = nll_matrix(params, counts)
    per_sample = nll.mean(axis=1)
    return EvalReport(
        family=params.family,
        mean_log_likelihood=-float(per_sample.mean()),
        per_category_nll=[float(v) for v in nll.mean(axis=0)],
        sample_count=int(counts.shape[0]),
    )


def evaluate(
    weights: ModelWeights,
    config: ModelConfig | TrainConfig,
    samples: list[GeoSample],
) -> EvalReport:
    """Infer-mode evaluation; weights and running statistics are not modified."""
    model = config.model if isinstance(config, TrainConfig) else config
    if not samples:
        raise ParameterError("Evaluation needs at least one sample")
    counts = _check_counts(samples, model)
    params = predict(weights, model, sample_inputs(samples, model))
    return _report(params, counts)


def intercept_report(train_set: list[GeoSample], test_set: list[GeoSample]) -> EvalReport:
    """Held-out fit of the rate-only Poisson model, λ_c = training mean of category c."""
    if not train_set or not test_set:
        raise ParameterError("intercept_report needs non-empty train and test sets")
    train_counts = stack_counts(train_set)
    test_counts = stack_counts(test_set)
    if train_counts.shape[1] != test_counts.shape[1]:
        raise ShapeError(
            f"Train/test category counts differ: {train_counts.shape[1]} vs {test_counts.shape[1]}"
        )
    rates = np.maximum(train_counts.mean(axis=0), PARAM_FLOOR)
    params = CountParams("poisson", np.broadcast_to(rates, test_counts.shape).copy())
    return _report(params, test_counts)


# =============================================================================
# Checkpoints
# =============================================================================

@dataclass(eq=False)
class Checkpoint:
    """Everything needed to continue training or to evaluate."""

    config: TrainConfig
    weights: ModelWeights
    optimizer: NadamState
    epoch: int = 0
    rng_state: dict | None = None
    history: list[EpochRecord] = field(default_factory=list)


def save_checkpoint(
    path: str | Path,
    weights: ModelWeights,
    optimizer: NadamState,
    config: TrainConfig,
    epoch: int = 0,
    rng_state: dict | None = None,
    history: list[EpochRecord] | None = None,
) -> Path:
    """Persist weights, optimizer state and config echo in the checkpoint container."""
    meta = {
        "package_version": __version__,
        "config": config.to_dict(),
        "seed": config.seed,
        "epoch": epoch,
        "weights_version": weights.version,
        "optimizer": {"t": optimizer.t, "config": optimizer.config.to_dict()},
        "rng_state": rng_state,
        "history": [[r.epoch, r.mean_nll] for r in history or []],
    }
    tensors = {
        "param": weights.params,
        "buffer": weights.buffers,
        "adam_m": optimizer.m,
        "adam_v": optimizer.v,
    }
    path = write_container(path, meta, tensors)
    logger.info(f"Saved checkpoint {path} (epoch {epoch})")
    return path


def _expect_names(group: str, got: dict[str, np.ndarray], shapes: dict[str, tuple[int, ...]]) -> dict[str, np.ndarray]:
    if set(got) != set(shapes):
        missing = sorted(set(shapes) - set(got))
        extra = sorted(set(got) - set(shapes))
        raise CheckpointError(f"{group} tensors do not match the config (missing {missing}, extra {extra})")
    for name, shape in shapes.items():
        if got[name].shape != shape:
            raise CheckpointError(f"{group} tensor '{name}' has shape {got[name].shape}, config implies {shape}")
    return {name: got[name] for name in shapes}


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Restore a checkpoint written by ``save_checkpoint``.

    Raises:
        CheckpointError: corrupt payload, version mismatch, or tensors that
            do not fit the echoed config
    """
    container = read_container(path)
    meta = container.meta
    try:
        config = TrainConfig.from_dict(meta["config"])
        config.validate()
        optimizer_meta = meta["optimizer"]
        nadam = NadamConfig.from_dict(optimizer_meta["config"])
        epoch = int(meta["epoch"])
        version = int(meta.get("weights_version", 0))
        history = [EpochRecord(int(e), float(v)) for e, v in meta.get("history", [])]
    except (KeyError, TypeError, ValueError, ConfigError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from e

    p_shapes = parameter_shapes(config.model)
    params = _expect_names("param", container.group("param"), p_shapes)
    buffers = _expect_names("buffer", container.group("buffer"), buffer_shapes(config.model))
    m = _expect_names("adam_m", container.group("adam_m"), p_shapes)
    v = _expect_names("adam_v", container.group("adam_v"), p_shapes)

    return Checkpoint(
        config=config,
        weights=ModelWeights(params=params, buffers=buffers, version=version),
        optimizer=NadamState(config=nadam, m=m, v=v, t=int(optimizer_meta["t"])),
        epoch=epoch,
        rng_state=meta.get("rng_state"),
        history=history,
    )


def check_family(checkpoint: Checkpoint, family: str | None) -> None:
    """Reject a requested family that differs from the checkpoint's."""
    if family is None:
        return
    wanted = FAMILIES.normalize(family)
    if wanted != checkpoint.config.family:
        raise ConfigError(
            f"Checkpoint holds a {checkpoint.config.family} model, not {wanted}"
        )
