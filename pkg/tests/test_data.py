import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcflow import data as dt


class TestLoadCsv:
    def test_basic_labeled_file(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("1.0,2.0,0\n3.0,4.0,1\n5.0,6.0,0\n")
        ds = dt.load_csv(path, has_labels=True)
        assert ds.values.shape == (3, 2)
        assert ds.labels.tolist() == [False, True, False]

    def test_header_populates_channel_names(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("temp,rpm\n1.0,2.0\n3.0,4.0\n")
        ds = dt.load_csv(path)
        assert ds.channel_names == ["temp", "rpm"]
        assert ds.n_steps == 2

    def test_non_binary_label_reports_coordinates(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("1.0,0\n2.0,2\n")
        with pytest.raises(dt.DataError, match="row 2"):
            dt.load_csv(path, has_labels=True)

    def test_ragged_rows_rejected(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("1.0,2.0\n3.0\n")
        with pytest.raises(dt.DataError, match="ragged"):
            dt.load_csv(path)

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("")
        with pytest.raises(dt.DataError, match="empty"):
            dt.load_csv(path)

    def test_non_numeric_cell_reports_coordinates(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("1.0,2.0\n3.0,oops\n")
        with pytest.raises(dt.DataError, match="row 2, column 2"):
            dt.load_csv(path)

    def test_save_load_round_trip(self, tmp_path):
        ds = dt.generate_synthetic("sine", 120, 3, noise=0.1, seed=4)
        ds = dt.inject_anomaly(ds, dt.AnomalySpec("spike", 60, 1, 4.0, (0,)))
        path = tmp_path / "d.csv"
        dt.save_csv(ds, path)
        back = dt.load_csv(path, has_labels=True)
        np.testing.assert_array_equal(back.values, ds.values)
        np.testing.assert_array_equal(back.labels, ds.labels)
        assert back.channel_names == ds.channel_names


class TestNormalize:
    def test_maps_endpoints_and_midpoint(self):
        ds = dt.TimeSeriesDataset(np.array([[0.0], [5.0], [10.0]]))
        out = dt.normalize_minmax(ds)
        np.testing.assert_allclose(out.values[:, 0], [-1.0, 0.0, 1.0])
        lo, hi = out.norm_stats
        assert lo[0] == 0.0 and hi[0] == 10.0

    def test_all_zero_channel_becomes_half_before_normalization(self):
        values = np.zeros((4, 2))
        values[:, 1] = [1.0, 2.0, 3.0, 4.0]
        replaced = dt.replace_zero_channels(values)
        np.testing.assert_array_equal(replaced[:, 0], 0.5)
        np.testing.assert_array_equal(replaced[:, 1], values[:, 1])

    def test_constant_channel_normalizes_to_zero(self):
        ds = dt.TimeSeriesDataset(np.column_stack([np.full(5, 3.3), np.arange(5.0)]))
        out = dt.normalize_minmax(ds)
        np.testing.assert_array_equal(out.values[:, 0], 0.0)

    def test_test_values_beyond_train_range_exceed_one(self):
        train = dt.normalize_minmax(dt.TimeSeriesDataset(np.array([[0.0], [10.0]])))
        test = dt.normalize_with_stats(dt.TimeSeriesDataset(np.array([[15.0]])), train.norm_stats)
        assert test.values[0, 0] == pytest.approx(2.0)

    def test_affine_inverse_recovers_originals(self):
        rng = np.random.default_rng(0)
        values = rng.normal(3.0, 2.0, (50, 4))
        ds = dt.normalize_minmax(dt.TimeSeriesDataset(values))
        recovered = dt.denormalize(ds.values, ds.norm_stats)
        np.testing.assert_allclose(recovered, values, atol=1e-12)


class TestPadEvenChannels:
    def test_odd_gets_constant_half_channel(self):
        ds = dt.TimeSeriesDataset(np.zeros((5, 3)))
        out = dt.pad_even_channels(ds)
        assert out.n_channels == 4
        np.testing.assert_array_equal(out.values[:, 3], 0.5)

    def test_even_unchanged(self):
        ds = dt.TimeSeriesDataset(np.zeros((5, 4)))
        assert dt.pad_even_channels(ds) is ds

    def test_idempotent(self):
        ds = dt.TimeSeriesDataset(np.zeros((5, 3)))
        once = dt.pad_even_channels(ds)
        twice = dt.pad_even_channels(once)
        np.testing.assert_array_equal(once.values, twice.values)


class TestSplit:
    def test_sequential_tail_arithmetic(self):
        train, val = dt.split_train_val(1000, 10, "sequential-tail")
        assert val.min() == 800 and val.max() == 999 and val.size == 200
        assert train.max() <= 789

    @pytest.mark.parametrize("mode", ["random-sections", "sequential-tail"])
    def test_disjoint(self, mode):
        train, val = dt.split_train_val(500, 7, mode, np.random.default_rng(3))
        assert not set(train.tolist()) & set(val.tolist())

    def test_random_sections_reproducible_per_seed(self):
        a = dt.split_train_val(400, 5, "random-sections", np.random.default_rng(9))
        b = dt.split_train_val(400, 5, "random-sections", np.random.default_rng(9))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_random_sections_cover_a_fifth(self):
        _, val = dt.split_train_val(1000, 5, "random-sections", np.random.default_rng(1))
        assert val.size == 200

    def test_too_short_series_rejected(self):
        with pytest.raises(dt.DataError):
            dt.split_train_val(20, 2, "sequential-tail")

    @settings(max_examples=60, deadline=None)
    @given(
        n_steps=st.integers(100, 2000),
        lookback=st.integers(1, 15),
        mode=st.sampled_from(["random-sections", "sequential-tail"]),
        seed=st.integers(0, 1 << 16),
    )
    def test_gap_property(self, n_steps, lookback, mode, seed):
        try:
            train, val = dt.split_train_val(n_steps, lookback, mode, np.random.default_rng(seed))
        except dt.DataError:
            return  # legitimately too short for the requested layout
        distance = np.abs(train[:, None] - val[None, :]).min()
        assert distance > lookback


class TestGenerator:
    def test_noiseless_sine_hits_unit_amplitude(self):
        ds = dt.generate_synthetic("sine", 300, 2, noise=0.0, seed=0)
        for d in range(2):
            assert np.abs(ds.values[:, d]).max() == pytest.approx(1.0)
        offset = 50  # half the period between the two channels
        np.testing.assert_allclose(ds.values[:-offset, 1], ds.values[offset:, 0], atol=1e-12)

    def test_increasing_is_nondecreasing_without_noise(self):
        ds = dt.generate_synthetic("increasing", 200, 3, noise=0.0, seed=1)
        assert (np.diff(ds.values, axis=0) >= 0).all()

    def test_same_seed_identical(self):
        a = dt.generate_synthetic("wave", 150, 2, noise=0.1, seed=42)
        b = dt.generate_synthetic("wave", 150, 2, noise=0.1, seed=42)
        np.testing.assert_array_equal(a.values, b.values)

    def test_unknown_family_rejected(self):
        with pytest.raises(dt.DataError, match="family"):
            dt.generate_synthetic("square", 200, 2)

    @pytest.mark.parametrize("family", dt.FAMILIES)
    def test_all_families_produce_finite_values(self, family):
        ds = dt.generate_synthetic(family, 250, 3, noise=0.05, seed=7)
        assert ds.values.shape == (250, 3)
        assert np.isfinite(ds.values).all()


class TestInjectAnomaly:
    def _base(self):
        return dt.generate_synthetic("sine", 200, 2, noise=0.0, seed=0)

    def test_single_step_spike_labels_one_point(self):
        out = dt.inject_anomaly(self._base(), dt.AnomalySpec("spike", 50, 1, 3.0, (0,)))
        assert out.labels.sum() == 1 and out.labels[50]
        assert out.values[50, 0] != self._base().values[50, 0]
        np.testing.assert_array_equal(out.values[:, 1], self._base().values[:, 1])

    def test_cutoff_zeroes_range(self):
        out = dt.inject_anomaly(self._base(), dt.AnomalySpec("cutoff", 30, 10, channels=(1,)))
        np.testing.assert_array_equal(out.values[30:40, 1], 0.0)
        assert out.labels[30:40].all()

    def test_zero_magnitude_mean_shift_sets_labels_only(self):
        base = self._base()
        out = dt.inject_anomaly(base, dt.AnomalySpec("mean-shift", 60, 5, 0.0))
        np.testing.assert_array_equal(out.values, base.values)
        assert out.labels[60:65].all() and out.labels.sum() == 5

    def test_overlapping_same_channel_rejected(self):
        out = dt.inject_anomaly(self._base(), dt.AnomalySpec("platform", 40, 20, 0.3, (0,)))
        with pytest.raises(dt.DataError, match="overlaps"):
            dt.inject_anomaly(out, dt.AnomalySpec("spike", 50, 1, 3.0, (0,)))

    def test_disjoint_channels_may_overlap_in_time(self):
        out = dt.inject_anomaly(self._base(), dt.AnomalySpec("platform", 40, 20, 0.3, (0,)))
        out = dt.inject_anomaly(out, dt.AnomalySpec("spike", 50, 1, 3.0, (1,)))
        assert out.labels[40:60].all()

    def test_labels_are_union_of_ranges(self):
        out = self._base()
        ranges = [(20, 5), (80, 1), (140, 12)]
        for start, length in ranges:
            out = dt.inject_anomaly(out, dt.AnomalySpec("mean-shift", start, length, 2.0, (0,)))
        expected = np.zeros(200, dtype=bool)
        for start, length in ranges:
            expected[start : start + length] = True
        np.testing.assert_array_equal(out.labels, expected)

    def test_out_of_range_rejected(self):
        with pytest.raises(dt.DataError, match="outside"):
            dt.inject_anomaly(self._base(), dt.AnomalySpec("spike", 199, 5))
