import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kunet.data import (ETT_COLUMNS, IngestConfig, channel_flatten, channel_unflatten, collect, load_csv, split,
                        split_rows, synthetic_ett, window_count, windows, write_csv)
from kunet.errors import ConfigError, DataError, IngestError


def write(tmp_path, text, name="d.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestLoadCsv:
    def test_toy_file(self, tmp_path):
        path = write(tmp_path, "date,a,b\n2020-01-01 00:00:00,1,2\n2020-01-01 01:00:00,3,4\n"
                               "2020-01-01 02:00:00,5,6\n")
        table = load_csv(path)
        assert (table.n_rows, table.n_channels) == (3, 2)
        np.testing.assert_array_equal(table.values, [[1, 2], [3, 4], [5, 6]])
        assert table.channels == ("a", "b")

    def test_non_numeric_cell(self, tmp_path):
        path = write(tmp_path, "date,a,b\n2020-01-01,1,2\n2020-01-02,1,oops\n")
        with pytest.raises(IngestError, match=r"line 3.*'b'"):
            load_csv(path)

    def test_bad_timestamp(self, tmp_path):
        with pytest.raises(IngestError, match="line 2"):
            load_csv(write(tmp_path, "date,a\nyesterday,1\n"))

    def test_non_monotonic(self, tmp_path):
        path = write(tmp_path, "date,a\n2020-01-02,1\n2020-01-01,2\n")
        with pytest.raises(DataError, match="line 3"):
            load_csv(path)

    def test_ett_schema(self, tmp_path):
        path = write_csv(synthetic_ett(50), tmp_path / "ett.csv")
        assert path.read_text().splitlines()[0] == "date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT"
        table = load_csv(path)
        assert table.n_channels == 7 == len(ETT_COLUMNS)
        np.testing.assert_array_equal(table.values, synthetic_ett(50).values)

    def test_missing_rejected_and_reported(self, tmp_path):
        path = write(tmp_path, "date,a\n2020-01-01,1\n2020-01-02,\n2020-01-03,3\n")
        table = load_csv(path)
        assert table.n_rows == 2
        assert table.report.rejected_rows == [3]
        assert "rejected_rows = 1" in table.report.to_text()

    def test_missing_forward_filled(self, tmp_path):
        path = write(tmp_path, "date,a,b\n2020-01-01,1,5\n2020-01-02,NaN,6\n")
        table = load_csv(path, IngestConfig(missing="ffill"))
        np.testing.assert_array_equal(table.values, [[1, 5], [1, 6]])
        assert table.report.filled_cells == 1
        assert not np.isnan(table.values).any()

    def test_column_selection_and_limit(self, tmp_path):
        path = write_csv(synthetic_ett(30), tmp_path / "ett.csv")
        table = load_csv(path, IngestConfig(columns=("OT",), max_rows=10))
        assert table.values.shape == (10, 1)
        with pytest.raises(DataError):
            load_csv(path, IngestConfig(columns=("XX",)))

    def test_ragged_row(self, tmp_path):
        with pytest.raises(IngestError, match="line 2"):
            load_csv(write(tmp_path, "date,a,b\n2020-01-01,1\n"))


class TestSplit:
    def test_ratio(self):
        s = split(1000)
        assert (s.train, s.val, s.test) == ((0, 700), (700, 800), (800, 1000))

    def test_ett_hourly(self):
        s = split(20000, "ett_months", interval_s=3600)
        assert [b - a for a, b in (s.train, s.val, s.test)] == [8640, 2880, 2880]

    def test_ett_quarter_hourly(self):
        s = split(70000, "ett_months", interval_s=900)
        assert [b - a for a, b in (s.train, s.val, s.test)] == [34560, 11520, 11520]

    def test_interval_from_timestamps(self):
        s = split(synthetic_ett(14400), "ett_months")
        assert s.test == (11520, 14400)

    def test_too_short(self):
        with pytest.raises(DataError):
            split(1000, "ett_months", interval_s=3600)
        with pytest.raises(DataError):
            split(3)

    def test_unknown_scheme(self):
        with pytest.raises(ConfigError):
            split(100, "random")


class TestWindows:
    def test_count_example(self):
        assert window_count(10, 4, 2) == 5
        assert len(collect(windows(np.arange(10.0), 4, 2))) == 5

    def test_exactly_one(self):
        b = collect(windows(np.arange(6.0), 4, 2))
        np.testing.assert_array_equal(b.inputs[0, :, 0], [0, 1, 2, 3])
        np.testing.assert_array_equal(b.targets[0, :, 0], [4, 5])

    def test_too_short_warns(self):
        with pytest.warns(UserWarning):
            assert list(windows(np.arange(5.0), 4, 2)) == []

    def test_stride_enumeration_oracle(self):
        n, lookback, horizon = 23, 4, 3
        got = collect(windows(np.arange(float(n)), lookback, horizon, stride=lookback)).starts.tolist()
        expected = [t for t in range(0, n, lookback) if t + lookback + horizon <= n]
        assert got == expected

    def test_batches_cover_everything(self):
        batches = list(windows(np.arange(30.0), 5, 2, batch_size=7))
        assert [len(b) for b in batches] == [7, 7, 7, 3]

    @given(st.integers(0, 200), st.integers(1, 30), st.integers(1, 30), st.integers(1, 5))
    def test_count_formula(self, n, lookback, horizon, stride):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            produced = sum(len(b) for b in windows(np.arange(float(n)), lookback, horizon, stride))
        assert produced == window_count(n, lookback, horizon, stride) == max(0, (n - lookback - horizon) // stride + 1)

    def test_targets_never_leave_their_split(self):
        n, lookback, horizon = 200, 12, 6
        values = np.arange(float(n))[:, None]
        s = split(n)
        for which in ("train", "val", "test"):
            rows, offset = split_rows(values, s, which, lookback)
            b = collect(windows(rows, lookback, horizon, offset=offset))
            lo, hi = s[which]
            assert b.targets.min() >= lo and b.targets.max() < hi
            # inputs may reach back into the previous split but never past the look-back
            assert b.inputs.min() >= max(0, lo - lookback)

    def test_sentinel_at_boundary(self):
        n, lookback, horizon = 100, 8, 4
        values = np.zeros((n, 1))
        s = split(n)
        values[s.val[0] - 1] = 1e9                    # last train row
        rows, offset = split_rows(values, s, "val", lookback)
        b = collect(windows(rows, lookback, horizon, offset=offset))
        assert not np.any(b.targets == 1e9)
        rows, offset = split_rows(values, s, "train", lookback)
        b = collect(windows(rows, lookback, horizon, offset=offset))
        assert np.all(b.starts + lookback + horizon <= s.train[1])


class TestChannelFlatten:
    def test_single_channel(self, rng):
        x = rng.normal(size=(3, 5, 1))
        np.testing.assert_array_equal(channel_flatten(x), x)

    def test_ordering(self):
        x = np.arange(2 * 4 * 3, dtype=float).reshape(2, 4, 3)
        flat = channel_flatten(x)
        for row, (b, c) in enumerate([(b, c) for b in range(2) for c in range(3)]):
            np.testing.assert_array_equal(flat[row, :, 0], x[b, :, c])

    @given(st.integers(1, 4), st.integers(1, 6), st.integers(1, 5))
    def test_round_trip(self, b, length, m):
        x = np.random.default_rng(b * 31 + m).normal(size=(b, length, m))
        np.testing.assert_array_equal(channel_unflatten(channel_flatten(x), m), x)

    def test_bad_unflatten(self):
        with pytest.raises(DataError):
            channel_unflatten(np.ones((5, 3, 1)), 2)


def test_synthetic_is_seeded_and_periodic():
    a, b = synthetic_ett(500, seed=3), synthetic_ett(500, seed=3)
    np.testing.assert_array_equal(a.values, b.values)
    assert np.all(np.diff(a.timestamps).astype(int) == 3600)
    ot = a.values[:, -1] - a.values[:, -1].mean()
    day = np.corrcoef(ot[:-24], ot[24:])[0, 1]
    half = np.corrcoef(ot[:-12], ot[12:])[0, 1]
    assert day > half
