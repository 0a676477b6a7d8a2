import json
import math

import numpy as np
import pytest

from conftest import make_sample
from overhead_counts import trainer
from overhead_counts.counts import SyntheticConfig, generate_synthetic, split_dataset
from overhead_counts.dists import sample_nll
from overhead_counts.errors import (
    CheckpointError,
    ConfigError,
    ParameterError,
    ShapeError,
    TrainingError,
)
from overhead_counts.net import glorot_init, predict
from overhead_counts.optim import NadamConfig, init_state
from overhead_counts.trainer import (
    EpochRecord,
    TrainConfig,
    check_family,
    evaluate,
    infer_input_shape,
    intercept_report,
    load_checkpoint,
    sample_inputs,
    save_checkpoint,
    train,
    write_loss_csv,
)


def _feature_samples(rng, n, counts_fn, dim=3):
    return [
        make_sample(f"f{i:04d}", counts_fn(i), features=tuple(rng.normal(size=dim)))
        for i in range(n)
    ]


def _two_group_samples(rng, n):
    """Half the samples see feature pattern A and rate 1, half pattern B and rate 8."""
    samples = []
    for i in range(n):
        group = i % 2
        features = (1.0, 0.0, 0.0) if group == 0 else (0.0, 1.0, 0.0)
        counts = rng.poisson(1.0 if group == 0 else 8.0, size=4)
        samples.append(make_sample(f"g{i:04d}", counts, features=features))
    return samples


class TestTrainConfig:
    """Validation and JSON round-trip of the training configuration."""

    def test_defaults(self):
        config = TrainConfig()
        assert config.epochs == 30
        assert config.nadam.learning_rate == 2e-5
        assert config.family == "poisson"

    def test_batch_size_must_allow_statistics(self, features_config):
        with pytest.raises(ConfigError, match="batch_size"):
            TrainConfig(batch_size=1, model=features_config).validate()

    def test_bad_learning_rate_is_config_error(self, features_config):
        config = TrainConfig(model=features_config, nadam=NadamConfig(learning_rate=-1.0))
        with pytest.raises(ConfigError, match="learning_rate"):
            config.validate()

    def test_top_level_family_overrides_model(self):
        config = TrainConfig.from_dict({"family": "nb", "epochs": 3, "model": {"family": "poisson"}})
        assert config.family == "nb"
        assert config.epochs == 3

    def test_round_trip(self, desk_config):
        config = TrainConfig(epochs=4, batch_size=8, seed=9, model=desk_config, checkpoint_every=2)
        assert TrainConfig.from_dict(config.to_dict()).to_dict() == config.to_dict()


class TestInputs:
    """Turning samples into network inputs."""

    def test_missing_features(self, features_config):
        samples = [make_sample("a", [1, 2, 3, 4])]
        with pytest.raises(ParameterError, match="Sample a has no feature vector"):
            sample_inputs(samples, features_config)

    def test_missing_tile(self, desk_config):
        with pytest.raises(ParameterError, match="has no tile"):
            sample_inputs([make_sample("a", [0] * 5)], desk_config)

    def test_mixed_shapes(self, features_config):
        samples = [
            make_sample("a", [0] * 4, features=(1.0, 2.0, 3.0)),
            make_sample("b", [0] * 4, features=(1.0, 2.0)),
        ]
        with pytest.raises(ShapeError, match="mixed input shapes"):
            sample_inputs(samples, features_config)

    def test_infer_input_shape(self):
        samples = [make_sample("a", [0], pixels=np.zeros((6, 6, 3)))]
        assert infer_input_shape(samples, "tile") == (6, 6, 3)
        samples = [make_sample("b", [0], features=(0.0, 1.0))]
        assert infer_input_shape(samples, "Features") == (2,)

    def test_trailing_singleton_batch_is_merged(self):
        batches = trainer._batches(np.arange(9), 4)
        assert [len(b) for b in batches] == [4, 5]
        np.testing.assert_array_equal(np.concatenate(batches), np.arange(9))


class TestTrain:
    """The training loop."""

    def test_deterministic(self, features_config, rng):
        samples = _feature_samples(rng, 2, lambda i: [i, 1, 2, 0])
        config = TrainConfig(epochs=1, batch_size=2, seed=4, model=features_config)
        a = train(config, samples)
        b = train(config, samples)
        assert a.history[0].mean_nll == b.history[0].mean_nll
        for name in a.weights.params:
            np.testing.assert_array_equal(a.weights.params[name], b.weights.params[name])

    def test_recovers_sample_means_on_constant_features(self, features_config, rng):
        samples = [
            make_sample(f"k{i:04d}", rng.poisson([1.0, 2.0, 4.0, 8.0]), features=(1.0, 1.0, 1.0))
            for i in range(64)
        ]
        config = TrainConfig(
            epochs=2000, batch_size=64, seed=0, model=features_config,
            nadam=NadamConfig(learning_rate=0.02),
        )
        result = train(config, samples)
        assert result.optimizer.t == 2000

        losses = [r.mean_nll for r in result.history]
        assert all(b < a for a, b in zip(losses[:5], losses[1:5]))
        sample_means = np.array([s.histogram.counts for s in samples], dtype=float).mean(axis=0)
        rates = predict(result.weights, features_config, sample_inputs(samples, features_config)).mean
        np.testing.assert_allclose(rates, np.broadcast_to(sample_means, rates.shape), rtol=0.01)

    def test_beats_rate_only_baseline(self, features_config, rng):
        samples = _two_group_samples(rng, 200)
        train_set, test_set = split_dataset(samples, 0.2, seed=0)
        config = TrainConfig(
            epochs=200, batch_size=32, seed=1, model=features_config,
            nadam=NadamConfig(learning_rate=0.02),
        )
        result = train(config, train_set)
        model_report = evaluate(result.weights, config, test_set)
        baseline = intercept_report(train_set, test_set)
        assert model_report.mean_log_likelihood > baseline.mean_log_likelihood + 0.5

    def test_poisson_head_beats_gaussian_on_poisson_data(self, features_config, rng):
        features_config.category_count = 5
        rates = [0.5, 1.0, 1.5, 2.0, 2.5]
        samples = _feature_samples(rng, 5000, lambda i: rng.poisson(rates))
        train_set, test_set = split_dataset(samples, 0.25, seed=0)

        scores = {}
        for family in ("poisson", "gaussian"):
            config = TrainConfig.from_dict({
                "epochs": 60, "batch_size": 150, "seed": 0, "family": family,
                "model": features_config.to_dict(), "nadam": {"learning_rate": 0.02},
            })
            result = train(config, train_set)
            scores[family] = evaluate(result.weights, config, test_set).mean_log_likelihood
        assert scores["poisson"] > scores["gaussian"] + 0.05

    def test_tile_mode_on_synthetic_data(self, desk_config):
        samples = generate_synthetic(SyntheticConfig(category_count=5, tile_size=8, channels=1, n_samples=40, seed=2))
        config = TrainConfig(epochs=3, batch_size=8, seed=0, model=desk_config, nadam=NadamConfig(learning_rate=0.01))
        result = train(config, samples)
        assert [r.epoch for r in result.history] == [1, 2, 3]
        assert all(math.isfinite(r.mean_nll) for r in result.history)
        assert result.optimizer.t == 15
        assert result.weights.version == 15

    def test_needs_two_samples(self, features_config, rng):
        with pytest.raises(ParameterError, match="at least 2 samples"):
            train(TrainConfig(model=features_config), _feature_samples(rng, 1, lambda i: [0] * 4))

    def test_category_count_mismatch(self, features_config, rng):
        samples = _feature_samples(rng, 4, lambda i: [0, 1])
        with pytest.raises(ShapeError, match="Histograms have 2 categories, model expects 4"):
            train(TrainConfig(epochs=1, batch_size=2, model=features_config), samples)

    def test_non_finite_loss_names_epoch_and_batch(self, features_config, rng, monkeypatch):
        samples = _feature_samples(rng, 4, lambda i: [0, 1, 2, 3])

        def poisoned(family, raw, counts):
            return float("nan"), [np.zeros_like(r) for r in raw]

        monkeypatch.setattr(trainer, "raw_loss_and_grad", poisoned)
        with pytest.raises(TrainingError, match="epoch 1, batch 0") as excinfo:
            train(TrainConfig(epochs=2, batch_size=2, model=features_config), samples)
        assert excinfo.value.epoch == 1
        assert excinfo.value.batch == 0

    def test_loss_csv_is_reproducible(self, features_config, rng, tmp_path):
        samples = _feature_samples(rng, 6, lambda i: [i % 3, 1, 0, 2])
        config = TrainConfig(epochs=3, batch_size=3, model=features_config, nadam=NadamConfig(learning_rate=0.01))
        first = write_loss_csv(train(config, samples).history, tmp_path / "a" / "loss.csv")
        second = write_loss_csv(train(config, samples).history, tmp_path / "b" / "loss.csv")
        assert first.read_bytes() == second.read_bytes()
        lines = first.read_text().splitlines()
        assert lines[0] == "epoch,mean_nll"
        assert [line.split(",")[0] for line in lines[1:]] == ["1", "2", "3"]


class TestEvaluate:
    """Held-out log-likelihood."""

    def test_zero_weights_on_empty_histograms(self, features_config, rng):
        weights = glorot_init(features_config, seed=0)
        for value in weights.params.values():
            value[...] = 0.0
        samples = _feature_samples(rng, 5, lambda i: [0] * 4)
        report = evaluate(weights, features_config, samples)
        assert report.mean_log_likelihood == pytest.approx(-math.log(2.0), rel=1e-12)
        assert report.sample_count == 5

    def test_matches_per_sample_loop(self, features_config, rng):
        weights = glorot_init(features_config, seed=3)
        samples = _feature_samples(rng, 9, lambda i: rng.poisson(2.0, size=4))
        report = evaluate(weights, features_config, samples)

        params = predict(weights, features_config, sample_inputs(samples, features_config))
        expected = -sum(sample_nll(params.row(i), s.histogram) for i, s in enumerate(samples)) / len(samples)
        assert report.mean_log_likelihood == pytest.approx(expected, rel=1e-12)
        assert len(report.per_category_nll) == 4

    def test_does_not_touch_weights(self, features_config, rng):
        weights = glorot_init(features_config, seed=3)
        before = weights.copy()
        samples = _feature_samples(rng, 4, lambda i: [1, 0, 0, 1])
        first = evaluate(weights, features_config, samples)
        second = evaluate(weights, features_config, samples)
        assert first == second
        for name in before.buffers:
            np.testing.assert_array_equal(weights.buffers[name], before.buffers[name])

    def test_intercept_uses_training_means(self):
        train_set = [make_sample("a", [2, 0]), make_sample("b", [4, 0])]
        test_set = [make_sample("c", [3, 0])]
        report = intercept_report(train_set, test_set)
        # rate 3 for category 0; floor for the all-zero category costs ~1e-8
        expected_nll0 = 3.0 - 3.0 * math.log(3.0) + math.lgamma(4.0)
        assert report.per_category_nll[0] == pytest.approx(expected_nll0, rel=1e-12)
        assert report.per_category_nll[1] == pytest.approx(0.0, abs=1e-7)
        assert report.family == "poisson"


class TestCheckpoints:
    """Saving, loading and resuming."""

    def _config(self, features_config, epochs, every=0):
        return TrainConfig(
            epochs=epochs, batch_size=4, seed=3, model=features_config,
            nadam=NadamConfig(learning_rate=0.01), checkpoint_every=every,
        )

    def test_resume_is_bit_exact(self, features_config, rng, tmp_path):
        samples = _feature_samples(rng, 10, lambda i: [i % 4, 1, 2, 0])
        straight = train(self._config(features_config, 2), samples)

        path = tmp_path / "ckpt.npz"
        train(self._config(features_config, 1, every=1), samples, checkpoint_path=path)
        checkpoint = load_checkpoint(path)
        assert checkpoint.epoch == 1
        resumed = train(self._config(features_config, 2), samples, resume=checkpoint)

        assert [r.mean_nll for r in resumed.history] == [r.mean_nll for r in straight.history]
        for name in straight.weights.params:
            np.testing.assert_array_equal(resumed.weights.params[name], straight.weights.params[name])
        for name in straight.weights.buffers:
            np.testing.assert_array_equal(resumed.weights.buffers[name], straight.weights.buffers[name])
        assert resumed.optimizer.t == straight.optimizer.t

    def test_round_trip_and_config_echo(self, features_config, tmp_path):
        config = self._config(features_config, 5)
        config.validate()
        weights = glorot_init(features_config, seed=1)
        state = init_state(weights, config.nadam)
        history = [EpochRecord(1, 1.25), EpochRecord(2, 1.0)]
        path = save_checkpoint(tmp_path / "c.npz", weights, state, config, epoch=2, history=history)

        loaded = load_checkpoint(path)
        assert loaded.config.to_dict() == config.to_dict()
        assert loaded.epoch == 2
        assert loaded.history == history
        assert loaded.rng_state is None
        for name, value in weights.params.items():
            np.testing.assert_array_equal(loaded.weights.params[name], value)

    def test_resume_needs_shuffle_state(self, features_config, rng, tmp_path):
        config = self._config(features_config, 2)
        config.validate()
        weights = glorot_init(features_config, seed=1)
        path = save_checkpoint(tmp_path / "c.npz", weights, init_state(weights, config.nadam), config, epoch=1)
        with pytest.raises(CheckpointError, match="no shuffle state"):
            train(config, _feature_samples(rng, 4, lambda i: [0] * 4), resume=load_checkpoint(path))

    def test_truncated_file(self, features_config, tmp_path):
        config = self._config(features_config, 1)
        config.validate()
        weights = glorot_init(features_config, seed=1)
        path = save_checkpoint(tmp_path / "c.npz", weights, init_state(weights), config)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(CheckpointError, match="corrupt payload"):
            load_checkpoint(path)

    def test_not_an_archive(self, tmp_path):
        path = tmp_path / "junk.npz"
        path.write_bytes(b"definitely not a checkpoint")
        with pytest.raises(CheckpointError, match="corrupt payload"):
            load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "future.npz"
        header = {"format": "overhead-counts-checkpoint", "version": 2, "tensors": []}
        np.savez(path, __meta__=np.frombuffer(json.dumps(header).encode("utf-8"), dtype=np.uint8))
        with pytest.raises(CheckpointError, match="unsupported checkpoint version 2"):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(tmp_path / "nope.npz")

    def test_family_check(self, features_config, tmp_path):
        config = self._config(features_config, 1)
        config.validate()
        weights = glorot_init(features_config, seed=1)
        loaded = load_checkpoint(save_checkpoint(tmp_path / "c.npz", weights, init_state(weights), config))
        check_family(loaded, "Poisson")
        check_family(loaded, None)
        with pytest.raises(ConfigError, match="holds a poisson model, not nb"):
            check_family(loaded, "nb")
