import gzip
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clops.etl import (FREQ, MIN_LENGTH, CleaningError, ParseReport, SchemaError, SplitError, TimeSeriesRecord,
                       aggregate_series, apply_split, check_leakage, clean_series, make_split, parse_trace)
from clops.store import ChecksumError, export_store, import_store, read_header
from clops.synthetic import SynthParams, gen_synthetic

AZURE_HEADER = "timestamp,vm_id,subscription_id,avg_cpu,min_cpu,max_cpu\n"


def parse(text, kind="azure2017"):
    report = ParseReport()
    rows = list(parse_trace(io.StringIO(text), kind, report))
    return rows, report


def record(sid, attr, values, start="2020-01-01T00:00:00"):
    v = np.asarray(values, dtype=np.float64)
    return TimeSeriesRecord(sid, attr, np.datetime64(start), v[None], np.zeros((0, len(v))),
                            np.zeros(0), np.isnan(v)[None])


# -- parsing ------------------------------------------------------------------------

def test_parse_valid_azure_row():
    rows, report = parse(AZURE_HEADER + "300,vm1,sub1,10.5,2.0,30.0\n")
    assert len(rows) == 1 and report.skipped == 0
    assert rows[0].metrics == {"avg_cpu": 10.5, "min_cpu": 2.0, "max_cpu": 30.0}
    assert (rows[0].entity_id, rows[0].top_level_attr, rows[0].timestamp) == ("vm1", "sub1", 300)


def test_parse_empty_metric_is_null():
    rows, _ = parse(AZURE_HEADER + "300,vm1,sub1,,2.0,30.0\n")
    assert rows[0].metrics["avg_cpu"] is None


def test_parse_bad_timestamp_skipped():
    rows, report = parse(AZURE_HEADER + "abc,vm1,sub1,1,2,3\n600,vm1,sub1,1,2,3\n")
    assert len(rows) == 1
    assert report.skipped == 1 and report.reasons["bad_timestamp"] == 1


def test_parse_missing_column():
    with pytest.raises(SchemaError, match="avg_cpu"):
        parse("timestamp,vm_id,subscription_id,min_cpu\n0,a,b,1\n")


# -- aggregation ------------------------------------------------------------------------

def test_duplicate_timestamp_keeps_first():
    rows, _ = parse(AZURE_HEADER + "0,vm1,s,1,0,2\n0,vm1,s,9,0,9\n300,vm1,s,2,0,3\n")
    (rec,) = aggregate_series(rows, "azure2017")
    np.testing.assert_array_equal(rec.targets[0], [1.0, 2.0])


def test_gap_inserts_null():
    rows, _ = parse(AZURE_HEADER + "0,vm1,s,1,0,2\n600,vm1,s,3,0,3\n")
    (rec,) = aggregate_series(rows, "azure2017")
    assert rec.length == 3
    assert np.isnan(rec.targets[0, 1]) and rec.missing_mask[0].tolist() == [False, True, False]
    assert rec.start == np.datetime64("2016-11-15T00:00:00")


def test_irregular_bin_averages():
    text = ("timestamp,container_id,app_du,cpu_util_percent,mem_util_percent\n"
            "10,c1,a,10,1\n100,c1,a,20,2\n250,c1,a,60,3\n310,c1,a,5,5\n")
    rows, _ = parse(text, "ali2018")
    (rec,) = aggregate_series(rows, "ali2018")
    np.testing.assert_allclose(rec.targets[:, 0], [30.0, 2.0])
    np.testing.assert_allclose(rec.targets[:, 1], [5.0, 5.0])


# -- cleaning -------------------------------------------------------------------------

def wiggle(n, seed=0):
    return np.random.default_rng(seed).uniform(0, 100, n)


def test_min_length_threshold():
    assert MIN_LENGTH == 672
    kept, report = clean_series([record("a", "x", wiggle(671)), record("b", "x", wiggle(672))])
    assert [s.series_id for s in kept] == ["b"]
    assert report.rejected == {"a": "too_short"}


def test_constant_rejected():
    kept, report = clean_series([record("c", "x", np.full(700, 7.0)), record("d", "x", wiggle(700))])
    assert report.rejected == {"c": "constant"}


def test_too_missing_rejected_and_empty_is_error():
    v = wiggle(700)
    v[:20] = np.nan
    with pytest.raises(CleaningError):
        clean_series([record("m", "x", v)])


def test_imputation_carries_forward():
    v = wiggle(700)
    v[[0, 10, 11]] = np.nan
    (rec,), _ = clean_series([record("m", "x", v)])
    t = rec.targets[0]
    assert t[0] == np.float32(v[1]) and t[10] == t[9] and t[11] == t[9]
    assert rec.missing_mask[0, 10]


def test_clean_is_idempotent():
    v = wiggle(700, 3)
    v[5] = np.nan
    once, _ = clean_series([record("m", "x", v), record("n", "y", wiggle(800, 4))])
    twice, _ = clean_series(once)
    assert all(a.equals(b) for a, b in zip(once, twice)) and len(once) == len(twice)


# -- splitting ----------------------------------------------------------------------------

def even_collection(n_attrs=100, per=10, T=800):
    return gen_synthetic(n_attrs * per, T, seed=0, params=SynthParams(series_per_attr=per))


def test_split_count_formula():
    plan = make_split(even_collection(), frac=0.10, seed=0)
    assert len(plan.traintest_attrs) == 10
    assert len(plan.pretrain_attrs) == 90


def test_split_is_seeded():
    series = even_collection(20, 5)
    assert make_split(series, 0.2, seed=4) == make_split(series, 0.2, seed=4)


def test_split_bad_frac():
    with pytest.raises(SplitError):
        make_split(even_collection(5, 2), frac=1.5)


def ragged_collection(seed):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(60):
        n = int(rng.integers(700, 1000))
        offset = int(rng.integers(0, 3)) * 48 if rng.random() < 0.3 else 0
        start = np.datetime64("2020-01-01T00:00:00") + (1000 - n - offset) * FREQ
        out.append(record(f"s{i:02d}", f"g{int(rng.integers(0, 15)):02d}", wiggle(n, i), str(start)))
    return out


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_split_invariants_over_seeds(seed):
    series = ragged_collection(seed % 7)
    plan = make_split(series, 0.25, seed, H=24, windows=2)
    pre, tt = apply_split(series, plan)
    assert not plan.pretrain_attrs & plan.traintest_attrs
    assert not {s.top_level_attr for s in pre} & {s.top_level_attr for s in tt}
    assert all(s.end == plan.end_timestamp for s in tt)
    if pre:
        assert max(s.end for s in pre) < plan.test_start
    check_leakage(pre, tt, plan)


def test_leakage_detected():
    series = even_collection(10, 2, T=700)
    plan = make_split(series, 0.3, seed=1, H=24, windows=2)
    pre, tt = apply_split(series, plan)
    with pytest.raises(SplitError):
        check_leakage(pre + tt[:1], tt, plan)


# -- store ----------------------------------------------------------------------------

def test_store_round_trip(tmp_path):
    series = gen_synthetic(5, 700, seed=2)
    series[0].missing_mask[0, 3] = True
    path = tmp_path / "c.cts"
    export_store(series, path, kind="synthetic")
    back = import_store(path)
    assert len(back) == 5 and all(a.equals(b) for a, b in zip(series, back))
    assert read_header(path)["format"] == "CTS1"


def test_store_truncated(tmp_path):
    path = tmp_path / "c.cts"
    export_store(gen_synthetic(3, 700, seed=2), path)
    raw = gzip.decompress(path.read_bytes())
    path.write_bytes(gzip.compress(raw[: len(raw) // 2]))
    with pytest.raises(ChecksumError):
        import_store(path)
    path.write_bytes(path.read_bytes()[:40])
    with pytest.raises(ChecksumError):
        import_store(path)


def test_store_empty(tmp_path):
    path = tmp_path / "e.cts"
    export_store([], path)
    assert import_store(path) == []


# -- synthetic generator ----------------------------------------------------------------

def test_synthetic_deterministic():
    a = gen_synthetic(4, 300, seed=0)
    b = gen_synthetic(4, 300, seed=0)
    assert all(x.targets.tobytes() == y.targets.tobytes() for x, y in zip(a, b))


def test_synthetic_constant_when_flat():
    p = SynthParams(daily_amp=(0.0, 0.0), hourly_amp=(0.0, 0.0), noise_std=0.0)
    series = gen_synthetic(3, 700, seed=1, params=p)
    assert all(np.ptp(s.targets) == 0 for s in series)
    with pytest.raises(CleaningError):
        clean_series(series)


def test_synthetic_size():
    series = gen_synthetic(1000, 2000, seed=0)
    assert sum(s.targets.size for s in series) == 2_000_000
