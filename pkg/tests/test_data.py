import numpy as np
import pytest

from poolad.data import (AnomalySpec, TimeSeries, denormalize, full_cover_view,
                         gen_sine, inject_anomaly, load_csv, normalize,
                         save_csv, segment)
from poolad.errors import DataError, ParseError


def write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestLoadCsv:
    def test_basic_readback(self, tmp_path):
        ts = load_csv(write(tmp_path, "t,v\n1,0.0\n2,1.0\n3,2.0"))
        assert ts.m == 3 and ts.n == 1
        assert np.array_equal(ts.values[:, 0], [0.0, 1.0, 2.0])
        assert np.array_equal(ts.timestamps, [1, 2, 3])

    def test_label_column(self, tmp_path):
        ts = load_csv(write(tmp_path, "t,v,label\n1,5,1\n2,5,0"), has_labels=True)
        assert np.array_equal(ts.labels, [1, 0])
        assert ts.n == 1

    def test_non_numeric_cell_names_row(self, tmp_path):
        with pytest.raises(ParseError, match="row 1"):
            load_csv(write(tmp_path, "t,v\n1,abc"))

    def test_ragged_row(self, tmp_path):
        with pytest.raises(ParseError, match="ragged"):
            load_csv(write(tmp_path, "t,v\n1,0.0\n2,1.0,9"))

    def test_non_increasing_timestamps(self, tmp_path):
        with pytest.raises(ParseError, match="timestamp"):
            load_csv(write(tmp_path, "t,v\n2,0.0\n1,1.0"))

    def test_no_timestamp_column(self, tmp_path):
        ts = load_csv(write(tmp_path, "a,b\n1,2\n3,4"))
        assert ts.n == 2 and ts.timestamps is None

    def test_save_load_round_trip(self, tmp_path):
        ts = gen_sine(50, 3, seed=1)
        ts.labels = np.zeros(50, dtype=np.int64)
        ts.labels[7] = 1
        path = tmp_path / "rt.csv"
        save_csv(ts, path)
        back = load_csv(path, has_labels=True)
        assert np.array_equal(back.values, ts.values)
        assert np.array_equal(back.labels, ts.labels)


class TestNormalize:
    def test_constant_column(self):
        ts = TimeSeries(np.array([[2.0], [2.0], [2.0]]))
        out, record = normalize(ts)
        assert np.allclose(out.values, 0.0)
        assert record[0] == (2.0, 1.0)

    def test_two_point_column(self):
        out, _ = normalize(TimeSeries(np.array([[0.0], [2.0]])))
        assert np.allclose(out.values[:, 0], [-0.70710678, 0.70710678])

    def test_idempotent(self):
        ts = gen_sine(100, 2, seed=3)
        once, _ = normalize(ts)
        twice, _ = normalize(once)
        assert np.allclose(once.values, twice.values, atol=1e-9)

    def test_round_trip(self):
        ts = gen_sine(64, 2, seed=5)
        normed, record = normalize(ts)
        back = denormalize(normed, record)
        assert np.allclose(back.values, ts.values, atol=1e-9)


class TestSegment:
    def test_counts(self):
        ts = TimeSeries(np.arange(20, dtype=float).reshape(10, 2))
        view = segment(ts, 5, 5)
        assert view.per_dim_count == 2
        assert view.segments.shape == (4, 5)

    def test_exact_fit(self):
        ts = TimeSeries(np.arange(5, dtype=float).reshape(5, 1))
        view = segment(ts, 5, 1)
        assert view.per_dim_count == 1

    def test_too_long(self):
        ts = TimeSeries(np.arange(4, dtype=float).reshape(4, 1))
        with pytest.raises(DataError):
            segment(ts, 5, 1)

    def test_round_trip_concatenation(self):
        # stride = L and L | m: concatenated windows reproduce each column
        ts = gen_sine(40, 2, seed=0)
        view = segment(ts, 8, 8)
        for d in range(2):
            rows = [view.segments[i] for i in range(len(view.segments))
                    if view.origins[i, 0] == d]
            assert np.array_equal(np.concatenate(rows), ts.values[:, d])

    def test_full_cover_reaches_end(self):
        ts = gen_sine(37, 1, seed=0)
        view = full_cover_view(ts, 8, 5)
        assert view.covered_length == 37


class TestInjectAnomaly:
    def test_spike_on_constant_column(self):
        ts = TimeSeries(np.zeros((20, 1)))
        spec = AnomalySpec("spike", 5, 1, 3.0, (0,))
        out = inject_anomaly(ts, spec, seed=0)
        assert out.values[5, 0] == pytest.approx(3.0)
        assert out.labels[5] == 1 and out.labels.sum() == 1

    def test_flip(self):
        ts = TimeSeries(np.array([[1.0], [2.0], [3.0], [9.0]]))
        out = inject_anomaly(ts, AnomalySpec("flip", 0, 3, 1.0, (0,)), 0)
        assert np.array_equal(out.values[:3, 0], [3.0, 2.0, 1.0])
        assert np.array_equal(out.labels, [1, 1, 1, 0])

    def test_determinism(self):
        ts = gen_sine(100, 2, seed=1)
        spec = AnomalySpec("contextual", 10, 8, 2.0, (1,))
        a = inject_anomaly(ts, spec, seed=7)
        b = inject_anomaly(ts, spec, seed=7)
        assert np.array_equal(a.values, b.values)

    def test_untouched_outside_window(self):
        ts = gen_sine(100, 2, seed=2)
        spec = AnomalySpec("scale", 30, 10, 1.5, (0,))
        out = inject_anomaly(ts, spec, 0)
        mask = np.ones(100, dtype=bool)
        mask[30:40] = False
        assert np.array_equal(out.values[mask], ts.values[mask])
        assert np.array_equal(out.values[:, 1], ts.values[:, 1])
        assert set(np.flatnonzero(out.labels)) == set(range(30, 40))

    @pytest.mark.parametrize("kind", ["spike", "contextual", "flip",
                                      "speedup", "scale"])
    def test_all_kinds_label_window_only(self, kind):
        ts = gen_sine(128, 2, seed=3)
        out = inject_anomaly(ts, AnomalySpec(kind, 40, 12, 2.0, (0,)), 0)
        assert np.array_equal(np.flatnonzero(out.labels), np.arange(40, 52))

    def test_bad_spec(self):
        ts = gen_sine(20, 1)
        with pytest.raises(DataError):
            inject_anomaly(ts, AnomalySpec("spike", 15, 10, 1.0, (0,)), 0)
