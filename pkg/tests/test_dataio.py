import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aecfx.dataio import (
    NormStats,
    Schema,
    SeriesFile,
    WindowSet,
    apply_norm,
    concat_windowsets,
    contiguous_runs,
    fit_norm,
    invert_norm,
    load_schema,
    load_series,
    make_windows,
)
from aecfx.exceptions import ConfigurationError, DataError

SCHEMA = Schema(channels=("a", "b"), timestamp="t", label="y")


def write(tmp_path, text, name="f.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def series(values, labels=None, path="mem"):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    chans = tuple(f"c{i}" for i in range(values.shape[1]))
    return SeriesFile(values, chans, None, None if labels is None else np.asarray(labels, np.int8), path)


# -- loading -------------------------------------------------------------------


def test_load_three_rows(tmp_path):
    p = write(tmp_path, "t,a,b,y\n0,1.0,2.0,0\n1,1.5,2.5,1\n2,2.0,3.0,0\n")
    s = load_series(p, SCHEMA)
    assert s.values.shape == (3, 2)
    assert s.channels == ("a", "b")
    np.testing.assert_array_equal(s.labels, [0, 1, 0])
    np.testing.assert_array_equal(s.timestamps, [0, 1, 2])


def test_unlabeled_schema_accepts_missing_label(tmp_path):
    p = write(tmp_path, "t,a,b\n0,1,2\n1,3,4\n")
    s = load_series(p, Schema(channels=("a", "b"), timestamp="t"))
    assert s.labels is None


def test_bad_cell_cites_line(tmp_path):
    p = write(tmp_path, "t,a,b,y\n0,1,2,0\n1,oops,4,0\n")
    with pytest.raises(DataError, match=r"'a'.*line\(s\) \[3\]"):
        load_series(p, SCHEMA)


def test_missing_column(tmp_path):
    p = write(tmp_path, "t,a,y\n0,1,0\n")
    with pytest.raises(DataError, match="missing columns \\['b'\\]"):
        load_series(p, SCHEMA)


def test_empty_file(tmp_path):
    with pytest.raises(DataError, match="empty"):
        load_series(write(tmp_path, ""), SCHEMA)
    with pytest.raises(DataError, match="no data rows"):
        load_series(write(tmp_path, "t,a,b,y\n", "h.csv"), SCHEMA)


def test_non_monotonic_timestamps(tmp_path):
    p = write(tmp_path, "t,a,b,y\n0,1,2,0\n2,1,2,0\n2,1,2,0\n")
    with pytest.raises(DataError, match="strictly increasing at line 4"):
        load_series(p, SCHEMA)


def test_bad_label_value(tmp_path):
    p = write(tmp_path, "t,a,b,y\n0,1,2,0\n1,1,2,3\n")
    with pytest.raises(DataError, match="0 or 1"):
        load_series(p, SCHEMA)


def test_datetime_timestamps_and_semicolons(tmp_path):
    text = (
        "datetime;a;b;anomaly\n"
        "2020-03-09 10:14:33;1.0;2.0;0.0\n"
        "2020-03-09 10:14:34;1.1;2.1;1.0\n"
    )
    p = write(tmp_path, text)
    s = load_series(p, Schema(("a", "b"), "datetime", "anomaly", ";"))
    assert s.timestamps[1] - s.timestamps[0] == pytest.approx(1.0)
    np.testing.assert_array_equal(s.labels, [0, 1])


def test_schema_yaml(tmp_path):
    p = write(tmp_path, "delimiter: ';'\nchannels: [x, y]\nlabel: anomaly\n", "schema.yaml")
    s = load_schema(p)
    assert s.channels == ("x", "y") and s.delimiter == ";" and s.timestamp is None
    with pytest.raises(ConfigurationError, match="unknown schema keys"):
        load_schema(write(tmp_path, "channels: [x]\ncolour: red\n", "bad.yaml"))
    with pytest.raises(ConfigurationError, match="channels"):
        load_schema(write(tmp_path, "label: y\n", "bad2.yaml"))


# -- normalization ---------------------------------------------------------------


def test_min_max_examples():
    stats = fit_norm([series([0.0, 5.0, 10.0])])
    np.testing.assert_array_equal(apply_norm(series([0.0, 5.0, 10.0]), stats).values[:, 0], [0, 0.5, 1])
    assert apply_norm(series([12.0]), stats).values[0, 0] == pytest.approx(1.2)


def test_constant_channel_maps_to_zero():
    stats = fit_norm([series([7.0, 7.0])])
    np.testing.assert_array_equal(apply_norm(series([7.0, 7.0]), stats).values[:, 0], [0, 0])


def test_fit_uses_all_training_files():
    stats = fit_norm([series([1.0, 2.0]), series([-3.0, 0.0])])
    assert stats.minimum[0] == -3.0 and stats.maximum[0] == 2.0


def test_fit_empty_raises():
    with pytest.raises(DataError):
        fit_norm([])


def test_stats_invariant_and_round_trip():
    with pytest.raises(DataError):
        NormStats([1.0], [0.0])
    stats = NormStats([0.0, 1.0], [2.0, 3.0], ("a", "b"))
    again = NormStats.from_dict(stats.to_dict())
    assert again.channels == ("a", "b")
    np.testing.assert_array_equal(again.maximum, stats.maximum)


@settings(max_examples=50)
@given(st.integers(0, 2**31 - 1))
def test_normalize_then_invert_is_identity(seed):
    rng = np.random.default_rng(seed)
    train = series(rng.normal(size=(20, 3)) * rng.uniform(0.1, 100, 3))
    stats = fit_norm([train])
    test = series(rng.normal(size=(7, 3)) * 50)
    back = invert_norm(apply_norm(test, stats).values, stats)
    np.testing.assert_allclose(back, test.values, rtol=0, atol=1e-12 * max(1.0, np.abs(test.values).max()))


def test_training_windows_lie_in_unit_box():
    rng = np.random.default_rng(0)
    train = series(rng.normal(size=(100, 2)))
    stats = fit_norm([train])
    ws = make_windows(apply_norm(train, stats), 16, 3)
    assert ws.windows.min() >= 0.0 and ws.windows.max() <= 1.0


# -- windows -------------------------------------------------------------------


def test_window_counts():
    assert len(make_windows(series(np.zeros(64)), 64, 1)) == 1
    assert len(make_windows(series(np.zeros(66)), 64, 1)) == 3


@given(st.integers(1, 200), st.integers(1, 40), st.integers(1, 9))
def test_window_count_formula(total, length, stride):
    s = series(np.arange(total, dtype=float))
    with pytest.warns(UserWarning) if total < length else _nullcontext():
        ws = make_windows(s, length, stride)
    expected = 0 if total < length else (total - length) // stride + 1
    assert len(ws) == expected
    assert ws.windows.shape[1:] == (1, length)
    if expected:
        assert [p[1] for p in ws.provenance] == list(range(0, total - length + 1, stride))
        np.testing.assert_array_equal(ws.windows[-1, 0], s.values[ws.provenance[-1][1]:][:length, 0])


class _nullcontext:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def test_short_series_gives_empty_set_with_warning():
    with pytest.warns(UserWarning, match="shorter than window"):
        ws = make_windows(series(np.zeros((5, 2))), 8)
    assert len(ws) == 0 and ws.windows.shape == (0, 2, 8)


def test_label_rules():
    labels = np.zeros(10, dtype=np.int8)
    labels[7] = 1
    s = series(np.zeros(10), labels)
    np.testing.assert_array_equal(make_windows(s, 4, 1).labels, [0, 0, 0, 0, 1, 1, 1])
    labels[6] = 1
    s = series(np.zeros(10), labels)
    np.testing.assert_array_equal(make_windows(s, 4, 1, "fraction:0.5").labels, [0, 0, 0, 0, 1, 1, 1])
    np.testing.assert_array_equal(make_windows(s, 4, 1, "fraction:0.6").labels, [0] * 7)
    with pytest.raises(ConfigurationError):
        make_windows(s, 4, 1, "majority")


def test_windows_respect_offset_and_file_boundaries():
    a = series(np.arange(10.0), path="a.csv").slice(3, 10)
    b = series(np.arange(100.0, 106.0), path="b.csv")
    merged = concat_windowsets([make_windows(a, 4), make_windows(b, 4)], 4)
    assert merged.provenance[0] == ("a.csv", 3)
    assert merged.provenance[-1] == ("b.csv", 2)
    # no window mixes values of the two files
    for w in merged.windows[:, 0]:
        assert (w < 100).all() or (w >= 100).all()


def test_window_set_save_load(tmp_path):
    rng = np.random.default_rng(0)
    s = series(rng.random((30, 2)), (rng.random(30) > 0.8).astype(int), path="x.csv")
    ws = make_windows(s, 8, 2)
    ws.save(tmp_path / "w")
    back = WindowSet.load(tmp_path / "w")
    assert back.windows.tobytes() == ws.windows.tobytes()
    np.testing.assert_array_equal(back.labels, ws.labels)
    assert back.provenance == ws.provenance
    assert (back.length, back.stride, back.label_rule) == (8, 2, "any")
    with pytest.raises(DataError):
        WindowSet.load(tmp_path / "missing")


def test_subset():
    ws = make_windows(series(np.arange(10.0), np.arange(10) % 2), 2, 1)
    sub = ws.subset(np.array([True, False] * 4 + [True]))
    assert len(sub) == 5
    assert sub.provenance[1][1] == 2


def test_contiguous_runs():
    assert contiguous_runs([True, True, False, True]) == [(0, 2), (3, 4)]
    assert contiguous_runs([False, False]) == []
