import datetime as dt
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedtwin import data as D
from fedtwin.errors import ConfigError, DataError
from fedtwin.numerics import SeededRng

DAY0 = dt.date(2020, 3, 1)


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return path


def series_records(values, region="NV", start=DAY0):
    return [D.DailyRecord(region, start + dt.timedelta(days=i), float(v)) for i, v in enumerate(values)]


# -- ingestion ----------------------------------------------------------------

def test_fixture_files_parse(fixtures_dir):
    assert len(D.ingest_cases(fixtures_dir / "cases.csv")) == 3
    acts = D.ingest_actions(fixtures_dir / "actions.csv")
    assert len(acts) == 3
    assert sum(a.end is None for a in acts) == 1


def test_invalid_date_names_line(tmp_path):
    p = write(tmp_path, "c.csv", "region,date,confirmed\nNV,2020-03-01,4\nNV,2020-13-40,5\n")
    with pytest.raises(DataError, match="line 3"):
        D.ingest_cases(p)


def test_negative_count_is_rejected(tmp_path):
    p = write(tmp_path, "c.csv", "region,date,confirmed\nNV,2020-03-01,-4\n")
    with pytest.raises(DataError, match="line 2"):
        D.ingest_cases(p)


def test_duplicate_keeps_last_with_warning(tmp_path):
    p = write(tmp_path, "c.csv", "region,date,confirmed\nNV,2020-03-05,10\nNV,2020-03-05,12\n")
    with pytest.warns(D.DataWarning):
        recs = D.ingest_cases(p)
    assert [(r.region, r.date, r.confirmed) for r in recs] == [("NV", dt.date(2020, 3, 5), 12.0)]


def test_records_sorted_and_cumulative_differenced(tmp_path):
    p = write(tmp_path, "c.csv", "region,date,confirmed\nNV,2020-03-03,9\nAZ,2020-03-01,1\nNV,2020-03-01,3\n"
                                  "NV,2020-03-02,7\n")
    recs = D.ingest_cases(p, cumulative=True)
    assert [(r.region, r.confirmed) for r in recs] == [("AZ", 1.0), ("NV", 3.0), ("NV", 4.0), ("NV", 2.0)]


def test_missing_header_column(tmp_path):
    with pytest.raises(DataError, match="missing"):
        D.ingest_cases(write(tmp_path, "c.csv", "region,day,confirmed\n"))


def test_actions_closed_open_and_reversed(tmp_path):
    p = write(tmp_path, "a.csv", "region,plan,start,end\nNV,mask policy,2020-04-01,2020-06-01\nNV,stay,2020-04-02,\n")
    closed, open_ = D.ingest_actions(p)
    assert (closed.start, closed.end) == (dt.date(2020, 4, 1), dt.date(2020, 6, 1))
    assert open_.end is None and open_.active_on(dt.date(2030, 1, 1))
    bad = write(tmp_path, "b.csv", "region,plan,start,end\nNV,stay,2020-04-02,2020-04-01\n")
    with pytest.raises(DataError):
        D.ingest_actions(bad)


# -- moving average -----------------------------------------------------------

def brute_force_average(series, window):
    return [sum(series[max(0, t - window + 1):t + 1]) / len(series[max(0, t - window + 1):t + 1])
            for t in range(len(series))]


def test_moving_average_examples():
    assert D.moving_average([5.0] * 8).tolist() == [5.0] * 8
    assert D.moving_average([1, 2, 3, 4, 5, 6, 7], 7)[-1] == 4.0
    xs = [0.3, 9.1, -2.0]
    assert D.moving_average(xs, 1).tolist() == xs
    assert D.moving_average([]).tolist() == []
    with pytest.raises(ConfigError):
        D.moving_average([1.0], 0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), max_size=40), st.integers(1, 10))
def test_moving_average_matches_brute_force(series, window):
    assert D.moving_average(series, window).tolist() == brute_force_average(series, window)


# -- plan vectors -------------------------------------------------------------

def test_plan_vector_examples():
    cat = D.PlanCatalog(D.DEFAULT_PLANS)
    start = dt.date(2020, 4, 1)
    iv = [D.PlanInterval("NV", D.DEFAULT_PLANS[2], start, dt.date(2020, 4, 10))]
    assert D.encode_plan_vector(start - dt.timedelta(days=1), iv, cat).tolist() == [0] * 6
    assert D.encode_plan_vector(start, iv, cat).tolist() == [0, 0, 1, 0, 0, 0]
    assert D.encode_plan_vector(dt.date(2020, 4, 10), iv, cat).tolist() == [0, 0, 1, 0, 0, 0]
    iv.append(D.PlanInterval("NV", D.DEFAULT_PLANS[5], start, None))
    assert D.encode_plan_vector(dt.date(2020, 4, 5), iv, cat).tolist() == [0, 0, 1, 0, 0, 1]


def test_plan_outside_catalog_is_config_error():
    cat = D.PlanCatalog(("a", "b"))
    with pytest.raises(ConfigError):
        D.encode_plan_vector(DAY0, [D.PlanInterval("NV", "c", DAY0, None)], cat)


def test_plan_vectors_match_interval_membership():
    cat = D.PlanCatalog(("a", "b", "c"))
    rng = SeededRng(17)
    for _ in range(200):
        intervals = []
        for _ in range(rng.randrange(5)):
            s = DAY0 + dt.timedelta(days=rng.randrange(30))
            e = None if rng.random() < 0.3 else s + dt.timedelta(days=rng.randrange(10))
            intervals.append(D.PlanInterval("NV", cat.names[rng.randrange(3)], s, e))
        day = DAY0 + dt.timedelta(days=rng.randrange(40))
        expect = [int(any(iv.plan_name == name and iv.start <= day and (iv.end is None or day <= iv.end)
                          for iv in intervals)) for name in cat.names]
        assert D.encode_plan_vector(day, intervals, cat).tolist() == expect


# -- normalization ------------------------------------------------------------

def test_normalize_examples():
    scaled, sc = D.normalize([0.0, 5.0, 10.0])
    assert scaled.tolist() == [0.0, 0.5, 1.0]
    scaled, sc = D.normalize([7.0, 7.0])
    assert scaled.tolist() == [0.0, 0.0] and (sc.min, sc.max) == (7.0, 8.0)
    xs = np.array([3.3, -1.25, 8.0, 0.1])
    scaled, sc = D.normalize(xs)
    np.testing.assert_allclose(sc.inverse(scaled), xs, rtol=0, atol=1e-12)


# -- windowing ----------------------------------------------------------------

@pytest.mark.parametrize("days, expected", [(21, 1), (28, 8), (60, 40)])
def test_sample_counts(days, expected):
    ds = D.build_samples(series_records(range(days)), [], D.PlanCatalog(("a",)))
    assert ds.m == expected == max(0, days - 20)


def test_short_series_is_empty_with_warning():
    with pytest.warns(D.DataWarning):
        ds = D.build_samples(series_records(range(20)), [], D.PlanCatalog(("a",)))
    assert ds.m == 0


def test_window_layout_against_manual_pipeline():
    counts = [float(3 * i % 17 + i) for i in range(30)]
    cat = D.PlanCatalog(("a", "b"))
    ivs = [D.PlanInterval("NV", "b", DAY0 + dt.timedelta(days=16), DAY0 + dt.timedelta(days=18))]
    ds = D.build_samples(series_records(counts), ivs, cat)
    smooth = np.log1p(brute_force_average(counts, 7))
    scaled = (smooth - smooth.min()) / (smooth.max() - smooth.min())
    s = ds.samples[0]  # anchor t = 13
    np.testing.assert_allclose(s.history[:, 0], scaled[0:14], rtol=0, atol=1e-15)
    np.testing.assert_allclose(s.targets, scaled[14:21], rtol=0, atol=1e-15)
    assert s.history[:, 1:].sum() == 0
    assert s.future_plans[:, 1].tolist() == [0, 0, 1, 1, 1, 0, 0]
    assert ds.dates[0] == DAY0 + dt.timedelta(days=13)


def test_gaps_are_interpolated():
    recs = series_records([0.0, 0.0, 10.0])
    gappy = [recs[0], D.DailyRecord("NV", DAY0 + dt.timedelta(days=2), 10.0)]
    dates, values = D._fill_gaps(gappy)
    assert len(dates) == 3 and values.tolist() == [0.0, 5.0, 10.0]


def test_samples_are_bounded_and_binary():
    for ds in D.gen_synthetic(3, 60, seed=4):
        for s in ds.samples:
            assert 0.0 <= s.history[:, 0].min() and s.history[:, 0].max() <= 1.0
            assert set(np.unique(s.future_plans)) <= {0.0, 1.0}


# -- split --------------------------------------------------------------------

def test_chronological_split():
    ds = D.build_samples(series_records(range(30)), [], D.PlanCatalog(("a",)))
    train, test = D.train_test_split(ds, 0.2)
    assert (train.m, test.m) == (8, 2)
    assert max(train.dates) < min(test.dates)
    assert D.train_test_split(ds, 0.0)[1].m == 0
    one = D.build_samples(series_records(range(21)), [], D.PlanCatalog(("a",)))
    assert [p.m for p in D.train_test_split(one, 0.2)] == [0, 1]


# -- synthetic generator ------------------------------------------------------

def test_generator_determinism_and_count():
    a = D.gen_synthetic(5, 40, seed=3)
    b = D.gen_synthetic(5, 40, seed=3)
    assert len(a) == 5
    for x, y in zip(a, b):
        assert all(np.array_equal(s.history, t.history) and np.array_equal(s.targets, t.targets)
                   for s, t in zip(x.samples, y.samples))


def test_generator_prefix_stability():
    few, many = D.gen_synthetic(2, 40, seed=9), D.gen_synthetic(4, 40, seed=9)
    for x, y in zip(few, many[:2]):
        assert np.array_equal(x.samples[5].history, y.samples[5].history)


def test_generator_rejects_short_spans():
    with pytest.raises(ConfigError):
        D.gen_synthetic(1, 20)


def test_generator_parameter_ranges():
    cat = D.PlanCatalog()
    effects = D.shared_effects(cat, 0)
    assert all(0.01 <= e <= 0.08 for e in effects)
    for i in range(10):
        c = D.synthesize_client(i, 90, cat, effects, seed=0)
        assert 20 <= c.initial <= 100 and 0.02 <= c.growth <= 0.12
        assert np.all(np.abs(c.noise) <= 0.02)
        assert set(np.unique(c.schedule)) <= {0.0, 1.0} and c.schedule.any()
        # the counts follow the stated multiplicative law exactly
        step = np.exp(c.growth - c.schedule[:-1] @ np.array(effects)) * (1 + c.noise[:-1])
        np.testing.assert_allclose(c.counts[1:], c.counts[:-1] * step, rtol=1e-13)


def test_suppressive_plan_lowers_the_trajectory():
    rng = SeededRng(1)
    noise = [rng.uniform(-0.02, 0.02) for _ in range(60)]
    on = D.simulate_counts(50.0, 0.1, [0.3], np.ones((60, 1)), noise)
    off = D.simulate_counts(50.0, 0.1, [0.3], np.zeros((60, 1)), noise)
    assert np.all(on <= off) and on[-1] < off[-1]


def test_generated_series_is_roughly_stationary():
    # several suppression cycles and no collapse to zero over a long horizon
    cat = D.PlanCatalog(("mask",))
    for seed in range(4):
        c = D.synthesize_client(0, 365, cat, [0.3], seed)
        log_c = np.log(c.counts)
        head, tail = log_c[:-90], log_c[-90:]
        assert tail.min() >= head.min() - 1.0 and tail.max() <= head.max() + 1.0
        starts = np.flatnonzero(np.diff(c.schedule[:, 0]) > 0)
        assert len(starts) >= 5
