import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cglubnf import dataio
from cglubnf.dataio import DataSchema


def _write(tmp_path, text, name="obs.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


HEADER = "timestamp,station_id,lat,lon,target\n"


def test_load_three_rows(tmp_path):
    p = _write(tmp_path, HEADER + "2024-01-01T00:00:00,A,51.5,-0.1,3.0\n"
               "2024-01-01T01:00:00,A,51.5,-0.1,4.0\n2024-01-01T00:00:00,B,51.6,-0.2,5.0\n")
    table, stations = dataio.load_csv(p)
    assert table.eta == 3
    assert stations.ids == ("A", "B")
    np.testing.assert_array_equal(stations.coords, [[51.5, -0.1], [51.6, -0.2]])


def test_empty_target_is_absent(tmp_path):
    p = _write(tmp_path, HEADER + "2024-01-01T00:00:00,A,1,1,3.0\n"
               "2024-01-01T01:00:00,A,1,1,\n2024-01-01T02:00:00,A,1,1,5.0\n")
    table, _ = dataio.load_csv(p)
    assert table.eta == 2
    assert not table.observed[1]
    assert np.isnan(table.target[1])


def test_duplicate_key(tmp_path):
    p = _write(tmp_path, HEADER + "2024-01-01T00:00:00,A,1,1,3.0\n2024-01-01T00:00:00,A,1,1,4.0\n")
    with pytest.raises(dataio.DuplicateKeyError):
        dataio.load_csv(p)


def test_missing_column(tmp_path):
    p = _write(tmp_path, "timestamp,station_id,lat,target\n2024-01-01T00:00:00,A,1,3.0\n")
    with pytest.raises(dataio.MissingColumnError):
        dataio.load_csv(p)


def test_missing_covariate_column(tmp_path):
    p = _write(tmp_path, HEADER + "2024-01-01T00:00:00,A,1,1,3.0\n")
    with pytest.raises(dataio.MissingColumnError):
        dataio.load_csv(p, DataSchema(covariates=("wind",)))


def test_unparsable_timestamp(tmp_path):
    p = _write(tmp_path, HEADER + "yesterday,A,1,1,3.0\n")
    with pytest.raises(dataio.TimestampError):
        dataio.load_csv(p)


def test_misaligned_timestamp_in_file(tmp_path):
    p = _write(tmp_path, HEADER + "2024-01-01T00:30:00,A,1,1,3.0\n")
    with pytest.raises(dataio.TimestampError):
        dataio.load_csv(p)


def test_error_kinds_are_distinct():
    kinds = {dataio.MissingColumnError, dataio.TimestampError, dataio.DuplicateKeyError}
    assert len(kinds) == 3
    assert all(issubclass(k, dataio.DataError) for k in kinds)


def test_malformed_coordinates_dropped_or_strict(tmp_path):
    p = _write(tmp_path, HEADER + "2024-01-01T00:00:00,A,1,1,3.0\n2024-01-01T00:00:00,B,abc,1,4.0\n")
    table, stations = dataio.load_csv(p)
    assert table.eta == 1 and stations.ids == ("A",)
    with pytest.raises(dataio.DataError):
        dataio.load_csv(p, DataSchema(strict=True))


def test_covariates_loaded(tmp_path):
    p = _write(tmp_path, "timestamp,station_id,lat,lon,target,wind,temp\n"
               "2024-01-01T00:00:00,A,1,1,3.0,2.5,10\n2024-01-01T01:00:00,A,1,1,,3.5,\n")
    table, _ = dataio.load_csv(p, DataSchema(covariates=("temp",)))
    assert table.covariate_names == ("temp",)
    assert table.covariates.shape == (2, 1)
    assert table.covariates[0, 0] == 10 and np.isnan(table.covariates[1, 0])


def test_write_csv_roundtrip(tmp_path):
    p = _write(tmp_path, "timestamp,station_id,lat,lon,target,wind\n"
               "2024-01-01T00:00:00,A,1.5,2,3.25,0.5\n2024-01-01T01:00:00,B,1,1,,\n")
    table, _ = dataio.load_csv(p, DataSchema(covariates=("wind",)))
    out = tmp_path / "back.csv"
    dataio.write_csv(out, table)
    again, _ = dataio.load_csv(out, DataSchema(covariates=("wind",)))
    np.testing.assert_array_equal(again.times, table.times)
    np.testing.assert_array_equal(again.target, table.target)
    np.testing.assert_array_equal(again.covariates, table.covariates)


# --- time -------------------------------------------------------------------

T0 = np.datetime64("2024-03-01T00:00:00", "s")


def test_discretize_reference_point():
    assert dataio.discretize_time([T0], T0).tolist() == [0]


def test_discretize_hourly_offset():
    assert dataio.discretize_time([T0 + np.timedelta64(5, "h")], T0).tolist() == [5]


def test_discretize_misaligned():
    with pytest.raises(dataio.TimestampError):
        dataio.discretize_time([T0 + np.timedelta64(30, "m")], T0)


def test_discretize_negative():
    with pytest.raises(dataio.NegativeIndexError):
        dataio.discretize_time([T0 - np.timedelta64(1, "h")], T0)


def test_discretize_daily():
    assert dataio.discretize_time([T0 + np.timedelta64(3, "D")], T0, 86400).tolist() == [3]


# --- z-score ----------------------------------------------------------------

def test_zscore_example():
    z = dataio.zscore_fit([1.0, 2.0, 3.0])
    assert z.mean[0] == 2.0
    assert z.std[0] == pytest.approx(np.sqrt(2 / 3), abs=1e-15)
    assert z.std[0] == pytest.approx(0.81650, abs=1e-5)
    np.testing.assert_allclose(dataio.zscore_apply(np.array([[1.0], [2.0], [3.0]]), z).ravel(),
                               [-1.22474, 0, 1.22474], atol=1e-5)


def test_zscore_constant_column():
    z = dataio.zscore_fit([5.0, 5.0])
    assert z.std[0] == 1.0
    np.testing.assert_array_equal(dataio.zscore_apply(np.array([[5.0], [5.0]]), z), [[0.0], [0.0]])


def test_zscore_apply_mean_is_zero():
    z = dataio.zscore_fit(np.array([[1.0, 10.0], [4.0, -2.0], [7.0, 3.0]]))
    np.testing.assert_array_equal(z.apply(z.mean[None, :]), [[0.0, 0.0]])


def test_zscore_empty():
    with pytest.raises(dataio.DataError):
        dataio.zscore_fit(np.zeros((0, 2)))


@settings(max_examples=60)
@given(arrays(float, st.tuples(st.integers(2, 40), st.integers(1, 4)), elements=st.floats(-1e4, 1e4)))
def test_zscore_standardizes(x):
    z = dataio.zscore_fit(x)
    y = z.apply(x)
    for j in range(x.shape[1]):
        if np.ptp(x[:, j]) > 1e-6 * max(1.0, np.abs(x[:, j]).max()):
            assert abs(y[:, j].mean()) < 1e-12 * max(1.0, np.abs(y[:, j]).max()) * len(x)
            assert abs(y[:, j].std() - 1.0) < 1e-9


# --- adjacency --------------------------------------------------------------

def _stations(coords):
    return dataio.StationSet(tuple(f"S{i}" for i in range(len(coords))), np.asarray(coords, dtype=float))


def test_adjacency_examples():
    g = dataio.build_adjacency(_stations([[0, 0], [3, 4], [3, 4]]), sigma_d=5.0)
    assert np.all(np.diag(g.adjacency) == 0)
    assert g.adjacency[0, 1] == pytest.approx(0.367879, abs=1e-6)
    assert g.adjacency[1, 2] == 1.0


def test_default_sigma_is_median_distance():
    coords = np.array([[0, 0], [0, 1], [0, 3]], dtype=float)
    g = dataio.build_adjacency(_stations(coords))
    assert g.sigma_d == 2.0  # distances 1, 2, 3


def test_adjacency_rejects_bad_sigma():
    with pytest.raises(ValueError):
        dataio.build_adjacency(_stations([[0, 0], [1, 1]]), sigma_d=0.0)


def test_haversine_distance_known_value():
    # one degree of latitude on a 6371 km sphere
    d = dataio.pairwise_distances(np.array([[0.0, 0.0], [1.0, 0.0]]), haversine=True)
    assert d[0, 1] == pytest.approx(6371.0 * np.pi / 180, rel=1e-12)


@settings(max_examples=50)
@given(arrays(float, st.tuples(st.integers(1, 10), st.just(2)), elements=st.floats(-90, 90)),
       st.one_of(st.none(), st.floats(0.01, 100)))
def test_adjacency_properties(coords, sigma):
    A = dataio.build_adjacency(_stations(coords), sigma_d=sigma).adjacency
    assert np.array_equal(A, A.T)
    assert np.all(np.diag(A) == 0)
    assert np.all((A >= 0) & (A <= 1))


# --- samples ----------------------------------------------------------------

def _frame(rows):
    return pd.DataFrame(rows, columns=["timestamp", "station_id", "lat", "lon", "target", "wind"])


def test_assemble_rows_equal_eta():
    df = _frame([
        ["2024-01-01T00:00:00", "A", 0.0, 0.0, 1.0, 3.0],
        ["2024-01-01T01:00:00", "A", 0.0, 0.0, 2.0, 4.0],
        ["2024-01-01T00:00:00", "B", 1.0, 1.0, 5.0, 5.0],
        ["2024-01-01T01:00:00", "B", 1.0, 1.0, 7.0, None],
        ["2024-01-01T02:00:00", "B", 1.0, 1.0, None, 1.0],
    ])
    table, _ = dataio.table_from_frame(df, DataSchema(covariates=("wind",)))
    stats = dataio.PreprocessStats.fit(table)
    s = dataio.assemble_samples(table, stats)
    assert len(s) == table.eta == 4
    assert 4 not in s.rows  # the absent-target cell
    assert np.all(table.observed[s.rows])
    assert s.d_prepro == 4
    np.testing.assert_allclose(stats.denormalize_target(s.labels), table.target[s.rows], atol=1e-12, rtol=0)
    assert np.all(np.isfinite(s.features))


def test_stats_fit_on_observed_rows_only():
    df = _frame([
        ["2024-01-01T00:00:00", "A", 0.0, 0.0, 1.0, 0.0],
        ["2024-01-01T01:00:00", "A", 0.0, 0.0, 3.0, 0.0],
        ["2024-01-01T02:00:00", "A", 0.0, 0.0, None, 0.0],
    ])
    table, _ = dataio.table_from_frame(df, DataSchema(covariates=("wind",)))
    stats = dataio.PreprocessStats.fit(table)
    assert stats.target_mean == 2.0 and stats.target_std == 1.0


def test_stats_dict_roundtrip():
    from cglubnf.synthetic import synthetic_table

    table, _ = synthetic_table(steps=48, covariates=1, seed=2)
    stats = dataio.PreprocessStats.fit(table)
    back = dataio.PreprocessStats.from_dict(stats.to_dict())
    a = dataio.assemble_samples(table, stats)
    b = dataio.assemble_samples(table, back)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_feature_covariate_mismatch():
    from cglubnf.synthetic import synthetic_table

    table, _ = synthetic_table(steps=24, seed=0)
    stats = dataio.PreprocessStats.fit(table)
    with pytest.raises(ValueError):
        dataio.build_features(np.arange(3), np.zeros((3, 2)), np.zeros((3, 2)), stats)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.7))
def test_samples_invert_to_raw(seed, frac_missing):
    from cglubnf.synthetic import synthetic_table

    table, _ = synthetic_table(steps=24, seed=seed % 1000)
    rng = np.random.default_rng(seed)
    y = table.target.copy()
    y[rng.random(len(y)) < frac_missing] = np.nan
    if np.isfinite(y).sum() == 0:
        return
    table = table.with_targets(y)
    stats = dataio.PreprocessStats.fit(table)
    s = dataio.assemble_samples(table, stats)
    assert len(s) == table.eta
    np.testing.assert_allclose(stats.denormalize_target(s.labels), y[s.rows], rtol=0, atol=1e-12)
