import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twin.attention import AttentionConfig, project_inherent
from twin.datagen import planted_params
from twin.features import inherent_block
from twin.numerics import count_flops
from twin.retrieval import CacheMiss, GsuKind
from twin.serving import (COMPUTE_ON_MISS, STRICT, DriftingParams, FlopModel, ProjectionCache, SyncSchedule,
                          VirtualClock, covered_ids, flops_raw, flops_twin_online, inherent_projector,
                          measured_flops, reduction_ratio, refresh_cache, run_scenario, sample_requests)

DEFAULT = FlopModel(L=10_000, H=144, C=40, J=5, d_k=32, d_out=32, n_heads=4)


@pytest.fixture(scope="module")
def planted(tiny_world):
    tables, params = planted_params(tiny_world, AttentionConfig.for_schema(tiny_world.schema), seed=0)
    return tiny_world, tables, params


def fresh_rows(world, tables, params, ids):
    K_h = inherent_block(world.catalog.attributes(ids), world.schema, tables)
    return np.concatenate([project_inherent(K_h, h) for h in params.heads], axis=1)


class TestSchedule:
    def test_defaults(self):
        s = SyncSchedule()
        assert (s.param_sync_period, s.cache_refresh_period, s.coverage_fraction) == (5.0, 15.0, 0.97)

    @pytest.mark.parametrize("kw", [dict(param_sync_period=0), dict(cache_refresh_period=-1),
                                    dict(coverage_fraction=0.0), dict(coverage_fraction=1.5)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SyncSchedule(**kw)

    def test_last_times(self):
        s = SyncSchedule(5, 15)
        assert s.last_sync(12.3) == 10 and s.last_refresh(12.3) == 0 and s.last_refresh(31) == 30

    def test_zero_refresh_follows_sync(self):
        s = SyncSchedule(5, 0)
        assert s.last_refresh(12.3) == s.last_sync(12.3) == 10

    def test_clock_monotone(self):
        c = VirtualClock()
        assert c.advance_to(3.0) == 3.0
        with pytest.raises(ValueError):
            c.advance_to(2.0)


class TestCache:
    def test_refresh_matches_fresh_projection(self, planted):
        world, tables, params = planted
        cache = ProjectionCache()
        refresh_cache(cache, world, tables, params, SyncSchedule(coverage_fraction=1.0))
        ids = np.arange(len(world.catalog))
        rows, misses = cache.lookup(ids)
        assert misses == 0
        np.testing.assert_array_equal(rows, fresh_rows(world, tables, params, ids))
        # per-request projection of a few ids agrees bit for bit with the pool build
        some = np.array([5, 77, 3])
        np.testing.assert_array_equal(rows[some], fresh_rows(world, tables, params, some))

    def test_versions_increment(self, planted):
        world, tables, params = planted
        cache = ProjectionCache()
        assert cache.version == 0
        got = [refresh_cache(cache, world, tables, params, SyncSchedule()) for _ in range(3)]
        assert got == [1, 2, 3]

    def test_no_version_published(self):
        with pytest.raises(LookupError):
            ProjectionCache().lookup([0])

    def test_coverage_three_percent_miss(self, planted):
        world, tables, params = planted
        cache = ProjectionCache(COMPUTE_ON_MISS, fallback=inherent_projector(world.schema, tables, params,
                                                                             world.catalog))
        refresh_cache(cache, world, tables, params, SyncSchedule(coverage_fraction=0.97))
        n = len(world.catalog)
        _, misses = cache.lookup(np.arange(n))
        assert misses == n - int(np.ceil(0.97 * n))
        assert misses / n == pytest.approx(0.03, abs=1 / n)

    def test_covered_ids_by_popularity(self):
        rank = np.array([3, 0, 4, 1, 2])
        np.testing.assert_array_equal(covered_ids(rank, 0.4), [1, 3])
        np.testing.assert_array_equal(covered_ids(rank, 1.0), np.arange(5))

    def test_compute_on_miss_equals_fresh(self, planted):
        world, tables, params = planted
        proj = inherent_projector(world.schema, tables, params, world.catalog)
        cache = ProjectionCache(COMPUTE_ON_MISS, fallback=proj)
        refresh_cache(cache, world, tables, params, SyncSchedule(coverage_fraction=0.5))
        ids = np.arange(len(world.catalog))
        with count_flops() as c:
            rows, misses = cache.lookup(ids)
        assert misses == len(ids) // 2
        np.testing.assert_array_equal(rows, fresh_rows(world, tables, params, ids))
        assert c.macs["miss"] > 0

    def test_strict_miss_lists_ids(self, planted):
        world, tables, params = planted
        cache = ProjectionCache(STRICT)
        refresh_cache(cache, world, tables, params, SyncSchedule(coverage_fraction=0.5))
        uncovered = int(np.flatnonzero(world.catalog.popularity_rank >= len(world.catalog) // 2)[0])
        with pytest.raises(CacheMiss) as e:
            cache.lookup([uncovered, uncovered])
        assert e.value.ids == [uncovered]

    def test_unknown_policy(self):
        with pytest.raises(ValueError):
            ProjectionCache("lazy")

    @pytest.mark.parametrize("H", [8, 144, 512])
    def test_gather_cost_independent_of_H(self, H):
        cache = ProjectionCache(STRICT)
        cache.refresh(lambda ids: np.ones((ids.size, 4)) * H, np.arange(100))
        with count_flops() as c:
            cache.lookup(np.arange(37))
        assert c.total_reads == 37
        assert c.total_macs == 0

    def test_published_rows_read_only(self):
        cache = ProjectionCache()
        cache.refresh(lambda ids: np.zeros((ids.size, 2)), np.arange(3))
        with pytest.raises(ValueError):
            cache.acquire().entry.rows[0, 0] = 1.0

    def test_handle_pins_version(self):
        cache = ProjectionCache(STRICT)
        cache.refresh(lambda ids: np.full((ids.size, 2), 1.0), np.arange(4))
        h = cache.acquire()
        cache.refresh(lambda ids: np.full((ids.size, 2), 2.0), np.arange(4))
        assert h.version == 1 and cache.version == 2
        np.testing.assert_array_equal(h.lookup([0, 3])[0], 1.0)
        np.testing.assert_array_equal(cache.lookup([0, 3])[0], 2.0)

    def test_readers_never_see_torn_version(self):
        cache = ProjectionCache(STRICT)
        n = 2000
        cache.refresh(lambda ids: np.zeros((ids.size, 4)), np.arange(n))
        stop = threading.Event()
        errors = []

        def writer():
            v = 1
            while not stop.is_set():
                cache.refresh(lambda ids, v=v: np.full((ids.size, 4), float(v)), np.arange(n))
                v += 1

        def reader():
            for _ in range(300):
                h = cache.acquire()
                rows, _ = h.lookup(np.arange(n))
                if np.unique(rows).size != 1 or rows[0, 0] != h.version - 1:
                    errors.append((h.version, np.unique(rows)))

        w = threading.Thread(target=writer)
        readers = [threading.Thread(target=reader) for _ in range(3)]
        w.start()
        for r in readers:
            r.start()
        for r in readers:
            r.join()
        stop.set()
        w.join()
        assert not errors
        assert cache.version > 1


class TestFlops:
    def test_raw_default(self):
        assert flops_raw(DEFAULT).total == 4 * 10_000 * 184 * 32 == 235_520_000

    def test_twin_default(self):
        assert flops_twin_online(DEFAULT).total == 4 * 10_000 * (32 + 40 + 5) == 3_080_000

    def test_reduction_default(self):
        assert reduction_ratio(DEFAULT) == pytest.approx(1 - 3.08e6 / 2.3552e8)
        assert 0.985 <= reduction_ratio(DEFAULT) < 0.99

    def test_reduction_wide(self):
        wide = FlopModel(L=10_000, H=208, C=40, J=5)
        assert reduction_ratio(wide) >= 0.99

    def test_single_row(self):
        one = FlopModel(L=1, H=144, C=40, J=5)
        assert flops_raw(one).total == 4 * 184 * 32
        assert flops_twin_online(one).total == 4 * 77

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 10_000), st.integers(1, 300), st.integers(0, 6), st.integers(1, 64), st.integers(1, 8))
    def test_linear_in_L(self, L, H, J, d, heads):
        m = FlopModel(L=L, H=H, C=8 * J, J=J, d_k=d, d_out=d, n_heads=heads)
        m2 = FlopModel(L=2 * L, H=H, C=8 * J, J=J, d_k=d, d_out=d, n_heads=heads)
        assert flops_raw(m2).total == 2 * flops_raw(m).total
        assert flops_twin_online(m2).total == 2 * flops_twin_online(m).total

    def test_no_cross_features(self):
        b = flops_twin_online(FlopModel(L=100, H=16, C=0, J=0, d_k=4))
        assert b.cross == 0 and b.bias == 0 and b.total == 4 * 100 * 4

    @pytest.mark.parametrize("m", [FlopModel(L=8, H=16, C=8, J=1, d_k=4, d_out=4),
                                   FlopModel(L=300, H=144, C=40, J=5),
                                   FlopModel(L=57, H=20, C=0, J=0, d_k=3, d_out=5, n_heads=2)])
    def test_measured_equals_analytic(self, m):
        meas = measured_flops(m, seed=1)
        raw, twin = flops_raw(m), flops_twin_online(m)
        r, t = meas.raw_breakdown(), meas.twin_breakdown()
        assert (r.total, r.dot, r.query) == (raw.total, raw.dot, raw.query)
        assert (t.total, t.query, t.reads) == (twin.total, twin.query, twin.reads)
        assert r.total * twin.total == t.total * raw.total
        assert meas.refresh.total_macs == m.n_heads * m.L * m.H * m.d_k

    def test_zero_behaviors(self):
        meas = measured_flops(FlopModel(L=0, H=16, C=8, J=1, d_k=4, d_out=4))
        assert meas.raw.total_macs == 0 and meas.twin.total_macs == 0

    def test_cross_width_checked(self):
        with pytest.raises(ValueError):
            measured_flops(FlopModel(L=4, H=16, C=7, J=1))

    @pytest.mark.parametrize("kw", [dict(H=0), dict(L=-1), dict(n_heads=0)])
    def test_invalid_model(self, kw):
        with pytest.raises(ValueError):
            FlopModel(**{**dict(L=1, H=1, C=0, J=0), **kw})


class TestDrift:
    def test_zero_drift_is_constant(self, planted):
        _, tables, params = planted
        walk = DriftingParams(tables, params, 0.0, 5.0, seed=0)
        t, p = walk.at(4)
        assert p is params
        assert all(t[k] is tables[k] for k in tables)

    def test_deterministic_and_scaled(self, planted):
        _, tables, params = planted
        a = DriftingParams(tables, params, 0.05, 5.0, seed=3).at(2)
        b = DriftingParams(tables, params, 0.05, 5.0, seed=3).at(2)
        np.testing.assert_array_equal(a[0]["video_id"].weights, b[0]["video_id"].weights)
        step = a[1].heads[0].W_h - params.heads[0].W_h
        rms = np.sqrt(np.mean(params.heads[0].W_h ** 2))
        # two steps of 0.05 * sqrt(5) relative standard deviation each
        assert np.std(step) / rms == pytest.approx(0.05 * np.sqrt(5) * np.sqrt(2), rel=0.1)

    def test_negative_rejected(self, planted):
        _, tables, params = planted
        with pytest.raises(ValueError):
            DriftingParams(tables, params, -0.1, 5.0, seed=0)


class TestScenario:
    def test_zero_drift_perfect(self, planted):
        world, tables, params = planted
        reqs = sample_requests(world, 15, 60.0, seed=0)
        rep = run_scenario(world, tables, params, SyncSchedule(), reqs, 0.0, seed=0)
        np.testing.assert_array_equal(rep.hits(GsuKind.TWIN_CP), 1.0)
        assert len(rep.rows) == 15

    def test_zero_period_perfect_under_drift(self, planted):
        world, tables, params = planted
        reqs = sample_requests(world, 15, 60.0, seed=1)
        rep = run_scenario(world, tables, params, SyncSchedule(5, 0), reqs, 0.1, seed=1)
        np.testing.assert_array_equal(rep.hits(GsuKind.TWIN_CP), 1.0)

    def test_stale_below_one_above_soft(self, planted):
        world, tables, params = planted
        reqs = sample_requests(world, 30, 60.0, seed=2)
        rep = run_scenario(world, tables, params, SyncSchedule(5, 15), reqs, 0.05, seed=2)
        twin = rep.hits(GsuKind.TWIN_CP).mean()
        assert rep.hits(GsuKind.SIM_SOFT).mean() < twin < 1.0
        np.testing.assert_array_equal(rep.hits(GsuKind.ORACLE), 1.0)

    def test_staleness_bounded_by_period(self, planted):
        world, tables, params = planted
        reqs = sample_requests(world, 20, 90.0, seed=3)
        rep = run_scenario(world, tables, params, SyncSchedule(5, 15), reqs, 0.05, seed=3,
                           methods=[GsuKind.TWIN_CP])
        st_ = np.array([r["staleness"] for r in rep.rows])
        assert np.all((st_ >= 0) & (st_ < 15))
        assert rep.summary["twin_gather_reads"] == sum(r["L"] for r in rep.rows)

    def test_report_files(self, planted, tmp_path):
        world, tables, params = planted
        reqs = sample_requests(world, 5, 30.0, seed=4)
        rep = run_scenario(world, tables, params, SyncSchedule(), reqs, 0.05, seed=4)
        rep.write_csv(tmp_path / "r.csv")
        rep.write_json(tmp_path / "s.json")
        header = (tmp_path / "r.csv").read_text().splitlines()[0].split(",")
        assert {"staleness", "hit_TwinCP", "hit_SimHard", "misses"} <= set(header)
        assert "hit_TwinCP_stderr" in (tmp_path / "s.json").read_text()

    def test_deterministic(self, planted):
        world, tables, params = planted
        reqs = sample_requests(world, 10, 30.0, seed=5)
        a = run_scenario(world, tables, params, SyncSchedule(), reqs, 0.05, seed=5)
        b = run_scenario(world, tables, params, SyncSchedule(), reqs, 0.05, seed=5)
        assert a.rows == b.rows

    def test_requests_sorted(self, tiny_world):
        reqs = sample_requests(tiny_world, 50, 100.0, seed=0)
        times = [r.time for r in reqs]
        assert times == sorted(times) and all(0 <= t < 100 for t in times)


@pytest.mark.slow
def test_hit_rate_non_increasing_in_refresh_period(tiny_world):
    periods = [0, 5, 15, 60]
    means = np.zeros((20, len(periods)))
    for seed in range(20):
        tables, params = planted_params(tiny_world, AttentionConfig.for_schema(tiny_world.schema), seed=seed)
        reqs = sample_requests(tiny_world, 25, 120.0, seed=seed)
        for j, p in enumerate(periods):
            rep = run_scenario(tiny_world, tables, params, SyncSchedule(5, p), reqs, 0.05, seed=seed,
                               methods=[GsuKind.TWIN_CP])
            means[seed, j] = rep.hits(GsuKind.TWIN_CP).mean()
    m = means.mean(axis=0)
    se = means.std(axis=0, ddof=1) / np.sqrt(20)
    for j in range(len(periods) - 1):
        # adjacent periods may overlap within stderr; anything further apart must be ordered
        assert m[j + 1] <= m[j] + se[j] + se[j + 1]
        for i in range(j + 2, len(periods)):
            assert m[i] <= m[j]
