import math

import numpy as np
import pytest
from helpers import build_model_with_encoder

from tcflow import diffcore as dc
from tcflow import data as dt
from tcflow.conditioners import EncoderConfig
from tcflow.flow import ConditionerConfig, FlowConfig, gaussian_log_density, nll_loss
from tcflow.train import (
    AdamState,
    SerializationError,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    load_model,
    save_model,
    train_model,
)


def small_cfgs(n_layers=2, multiplier=2, cond_layers=3):
    return FlowConfig(n_layers, ConditionerConfig(multiplier, cond_layers, 0.1, 1.5))


def prepared_sine(n_steps=400, n_channels=2, noise=0.1, seed=0):
    ds = dt.generate_synthetic("sine", n_steps, n_channels, noise=noise, seed=seed)
    return dt.pad_even_channels(dt.normalize_minmax(ds))


class TestAdam:
    def _param(self, value, name="p"):
        return dc.Parameter(np.asarray(value, dtype=float), name)

    def test_zero_gradient_is_a_fixed_point(self):
        p = self._param([1.0, -2.0])
        state = AdamState([p])
        adam_step([p], {"p": np.zeros(2)}, state, lr=1e-3)
        np.testing.assert_array_equal(p.value, [1.0, -2.0])

    def test_first_step_matches_hand_computation(self):
        # bias correction makes the first update -lr * g/(|g| + eps)
        p = self._param([0.0])
        state = AdamState([p])
        adam_step([p], {"p": np.ones(1)}, state, lr=1e-3)
        assert p.value[0] == pytest.approx(-1e-3, rel=1e-6)

    def test_parameter_groups_updated_independently(self):
        a = self._param([0.0], "a")
        b = self._param([0.0], "b")
        state = AdamState([a, b])
        adam_step([a, b], {"a": np.ones(1), "b": np.zeros(1)}, state, lr=1e-3)
        assert a.value[0] != 0.0
        assert b.value[0] == 0.0

    def test_nan_gradient_names_parameter(self):
        p = self._param([0.0], "w3")
        state = AdamState([p])
        with pytest.raises(FloatingPointError, match="w3"):
            adam_step([p], {"w3": np.array([np.nan])}, state, lr=1e-3)

    def test_global_norm_clip_rescales(self):
        p = self._param(np.zeros(4))
        state = AdamState([p])
        big = np.full(4, 100.0)
        adam_step([p], {"p": big}, state, lr=1.0, clip_norm=1.0)
        # after clipping, every coordinate sees the same (scaled) gradient
        assert np.isfinite(p.value).all()
        assert np.allclose(p.value, p.value[0])


class TestTrainModel:
    def test_identity_initialized_first_loss_is_base_nll(self):
        ds = prepared_sine()
        model = build_model_with_encoder(2, 2, EncoderConfig("passthrough", lookback=4))
        batch = ds.values[10:30]
        ctx = np.stack([ds.values[i - 4 : i] for i in range(10, 30)])
        loss = nll_loss(model, batch, model.encoder.encode_batch(ctx))
        expected = -gaussian_log_density(batch).mean()
        assert float(loss.value) == pytest.approx(expected)

    def test_batch_loss_is_mean_of_pointwise_nll(self):
        ds = prepared_sine()
        model = build_model_with_encoder(2, 2, EncoderConfig("none"), seed=3)
        batch = ds.values[:16]
        per_point = -model.log_prob(batch)
        assert float(nll_loss(model, batch).value) == pytest.approx(per_point.mean())

    def test_white_noise_converges_to_gaussian_entropy(self):
        rng = np.random.default_rng(0)
        values = rng.standard_normal((1000, 2))
        ds = dt.TimeSeriesDataset(values, norm_stats=(np.full(2, -1.0), np.full(2, 1.0)))
        model, report = train_model(
            ds, EncoderConfig("none"), small_cfgs(),
            TrainConfig(epochs=5, batch_size=256, seed=1),
        )
        # Monte-Carlo oracle: mean NLL of the true density on a fresh sample
        fresh = rng.standard_normal((10000, 2))
        oracle = float(-gaussian_log_density(fresh).mean())
        assert math.isclose(oracle, math.log(2 * math.pi) + 1.0, rel_tol=0.02)
        assert abs(report.best_val_loss - oracle) < 0.15

    def test_fixed_seed_reproduces_report(self):
        ds = prepared_sine(300)
        cfg = TrainConfig(epochs=3, batch_size=64, seed=7)
        _, r1 = train_model(ds, EncoderConfig("passthrough", lookback=4), small_cfgs(), cfg)
        _, r2 = train_model(ds, EncoderConfig("passthrough", lookback=4), small_cfgs(), cfg)
        assert r1.train_losses == r2.train_losses
        assert r1.val_losses == r2.val_losses
        assert r1.best_epoch == r2.best_epoch

    def test_best_epoch_at_most_first_epoch_loss(self):
        ds = prepared_sine(500, seed=3)
        _, report = train_model(
            ds, EncoderConfig("passthrough", lookback=6), small_cfgs(),
            TrainConfig(epochs=8, batch_size=128, seed=2),
        )
        assert report.best_val_loss <= report.val_losses[0]
        assert report.best_epoch == int(np.argmin(report.val_losses)) + 1

    def test_training_reduces_loss_on_sine(self):
        ds = prepared_sine(600, noise=0.2, seed=5)
        _, report = train_model(
            ds, EncoderConfig("passthrough", lookback=6), small_cfgs(n_layers=3),
            TrainConfig(epochs=10, batch_size=128, seed=0),
        )
        assert report.best_val_loss < report.val_losses[0]

    def test_heldout_clean_continuation_within_twice_train_nll(self):
        ds = prepared_sine(700, noise=0.4, seed=11)
        model, report = train_model(
            ds, EncoderConfig("passthrough", lookback=6), small_cfgs(n_layers=2),
            TrainConfig(epochs=8, batch_size=128, seed=4),
        )
        train_nll = report.train_losses[-1]
        assert train_nll > 0  # noise level keeps the optimum above zero
        continuation = dt.generate_synthetic("sine", 300, 2, noise=0.4, seed=99)
        continuation = dt.pad_even_channels(
            dt.normalize_with_stats(continuation, ds.norm_stats))
        from tcflow.score import score_series
        series = score_series(model, continuation)
        assert np.median(series.scores) <= 2.0 * train_nll

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_surfaces_structured_error(self):
        ds = prepared_sine(300)
        with pytest.raises((TrainingDiverged, FloatingPointError)):
            train_model(
                ds, EncoderConfig("none"), small_cfgs(),
                TrainConfig(epochs=10, batch_size=64, learning_rate=1e12,
                            clip_norm=0.0, seed=0),
            )

    def test_unnormalized_dataset_rejected(self):
        ds = dt.generate_synthetic("sine", 200, 2, seed=0)
        with pytest.raises(ValueError, match="normalized"):
            train_model(ds, EncoderConfig("none"), small_cfgs(), TrainConfig(epochs=1))

    def test_stateful_training_runs_and_tracks_validation(self):
        ds = prepared_sine(160, seed=2)
        cfg = EncoderConfig("lstm-stateful", lookback=8, lstm_layers=1)
        model, report = train_model(ds, cfg, small_cfgs(n_layers=2),
                                    TrainConfig(epochs=2, seed=0))
        assert len(report.val_losses) == 2
        assert np.isfinite(report.val_losses).all()
        assert model.encoder.kind == "lstm-stateful"


class TestSerialization:
    def _trained(self, tmp_path, encoder_kind="passthrough"):
        ds = prepared_sine(300)
        enc = EncoderConfig(encoder_kind, lookback=4)
        model, _ = train_model(ds, enc, small_cfgs(), TrainConfig(epochs=2, seed=0))
        path = tmp_path / "model.tcf"
        save_model(model, path)
        return model, path, ds

    def test_round_trip_is_bit_exact(self, tmp_path):
        model, path, _ = self._trained(tmp_path)
        loaded = load_model(path)
        for a, b in zip(model.parameters(), loaded.parameters()):
            assert a.name == b.name
            np.testing.assert_array_equal(a.value, b.value)
        np.testing.assert_array_equal(model.norm_stats[0], loaded.norm_stats[0])

    def test_loaded_model_scores_identically(self, tmp_path):
        from tcflow.score import score_series

        model, path, ds = self._trained(tmp_path)
        loaded = load_model(path)
        a = score_series(model, ds).scores
        b = score_series(loaded, ds).scores
        np.testing.assert_array_equal(a, b)

    def test_truncated_file_rejected(self, tmp_path):
        _, path, _ = self._trained(tmp_path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 64])
        with pytest.raises(SerializationError, match="truncated"):
            load_model(path)

    def test_version_mismatch_names_both_versions(self, tmp_path):
        _, path, _ = self._trained(tmp_path)
        raw = path.read_bytes()
        patched = raw.replace(b'"format_version": 1', b'"format_version": 9', 1)
        path.write_bytes(patched)
        with pytest.raises(SerializationError, match=r"9.*expected 1"):
            load_model(path)

    def test_garbage_file_rejected(self, tmp_path):
        path = tmp_path / "junk.tcf"
        path.write_bytes(b"not a model at all")
        with pytest.raises(SerializationError, match="not a model"):
            load_model(path)

    def test_report_csv_written(self, tmp_path):
        ds = prepared_sine(300)
        _, report = train_model(ds, EncoderConfig("none"), small_cfgs(),
                                TrainConfig(epochs=3, seed=0))
        out = tmp_path / "report.csv"
        report.to_csv(out)
        lines = out.read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,best"
        assert len(lines) == 1 + len(report.train_losses)
