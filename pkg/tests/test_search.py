import numpy as np
import pytest

from framequant.quantize import QuantParams, quant_error
from framequant.search import (
    DegenerateDistributionError,
    SearchConfig,
    SearchSpace,
    SearchSpaceCollapseError,
    btbi_search,
    build_search_space,
    calibrate_site,
    calibrate_site_detailed,
    exhaustive_search,
    minmax_bounds,
    percentile_bounds,
)
from framequant.tensor import Tensor, frame_slice, percentile


def gaussian_frame(seed, n=4096, mu=0.0, sigma=1.0):
    rng = np.random.Generator(np.random.Philox(seed))
    return Tensor(rng.normal(mu, sigma, n))


def outlier_frame(seed, n=20000, rate=0.001, scale=100.0):
    rng = np.random.Generator(np.random.Philox(seed))
    x = rng.normal(0.0, 1.0, n)
    k = max(1, int(rate * n))
    idx = rng.choice(n, size=k, replace=False)
    x[idx] = scale * np.sign(rng.normal(size=k))
    return Tensor(x)


class TestSearchSpace:
    def test_grid_cardinality(self):
        space = build_search_space(gaussian_frame(0), SearchConfig(grid_points=32))
        assert space.lb_grid.size == 32
        assert space.ub_grid.size == 32

    def test_endpoints_match_percentiles(self):
        frame = gaussian_frame(1, n=100000)
        space = build_search_space(frame, SearchConfig(grid_points=2))
        v = np.sort(frame.data)

        def oracle(k):
            p = k / 100 * (v.size - 1)
            lo = int(np.floor(p))
            return v[lo] + (p - lo) * (v[min(lo + 1, v.size - 1)] - v[lo])

        assert space.lb_grid[0] == pytest.approx(oracle(0.1), abs=1e-12)
        assert space.lb_grid[-1] == pytest.approx(oracle(10.0), abs=1e-12)
        assert space.ub_grid[0] == pytest.approx(oracle(90.0), abs=1e-12)
        assert space.ub_grid[-1] == pytest.approx(oracle(99.9), abs=1e-12)

    def test_uniform_steps(self):
        space = build_search_space(gaussian_frame(2), SearchConfig(grid_points=17))
        assert np.allclose(np.diff(space.lb_grid), space.delta_l)
        assert np.allclose(np.diff(space.ub_grid), space.delta_u)

    def test_constant_frame_is_degenerate(self):
        with pytest.raises(DegenerateDistributionError, match="degenerate"):
            build_search_space(Tensor(np.full(100, 3.0)), SearchConfig())

    def test_near_constant_frame_collapses(self):
        # >80% mass at one value: p10 == p90 -> grids would overlap
        x = np.concatenate([np.full(900, 1.0), np.linspace(0, 2, 100)])
        with pytest.raises(SearchSpaceCollapseError):
            build_search_space(Tensor(x), SearchConfig())

    def test_relu_like_frame_pins_lb_axis(self):
        x = np.concatenate([np.zeros(500), np.linspace(0.1, 3.0, 500)])
        space = build_search_space(Tensor(x), SearchConfig(grid_points=8))
        assert space.lb_grid.size == 1
        assert space.lb_grid[0] == 0.0
        assert space.ub_grid.size == 8

    def test_invariant_lb_below_ub(self):
        with pytest.raises(SearchSpaceCollapseError):
            SearchSpace(
                lb_grid=np.array([0.0, 0.6]),
                ub_grid=np.array([0.5, 1.0]),
                delta_l=0.6,
                delta_u=0.5,
            )


class TestBtbi:
    def test_zero_error_start_prunes_immediately(self):
        # All values on the 2-bit grid of (0.25, 1.0); the percentile start
        # snaps exactly onto those bounds, so the search sees zero error and
        # prunes every neighbor.
        vals = np.concatenate([
            np.full(11, 0.25),
            np.full(490, 0.5),
            np.full(400, 0.75),
            np.full(100, 1.0),
        ])
        frame = Tensor(vals)
        cfg = SearchConfig(grid_points=8, epsilon_rel=0.01)
        space = build_search_space(frame, cfg)
        res = btbi_search(frame, space, cfg, bits=2)
        assert res.error_min == 0.0
        assert (res.lb_star, res.ub_star) == (0.25, 1.0)
        assert res.states_visited <= 5

    @pytest.mark.parametrize("grid", [5, 9, 17])
    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_unpruned_equals_exhaustive(self, grid, seed):
        frame = gaussian_frame(seed, n=2000)
        cfg = SearchConfig(grid_points=grid, epsilon_rel=1e12)
        space = build_search_space(frame, cfg)
        b = btbi_search(frame, space, cfg, bits=4)
        e = exhaustive_search(frame, space, bits=4)
        assert b.error_min == e.error_min
        assert (b.lb_star, b.ub_star) == (e.lb_star, e.ub_star)
        assert b.states_visited == grid * grid

    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
    def test_monotone_improvement_and_termination(self, seed):
        frame = gaussian_frame(seed)
        cfg = SearchConfig(grid_points=16)
        space = build_search_space(frame, cfg)
        i0 = int(np.argmin(np.abs(space.lb_grid - percentile(frame, 1))))
        j0 = int(np.argmin(np.abs(space.ub_grid - percentile(frame, 99))))
        start_err = quant_error(
            frame, QuantParams(float(space.lb_grid[i0]), float(space.ub_grid[j0]), 4)
        )
        res = btbi_search(frame, space, cfg, bits=4)
        assert res.error_min <= start_err
        assert res.states_visited <= cfg.grid_points**2

    def test_max_states_cap(self):
        frame = gaussian_frame(5)
        cfg = SearchConfig(grid_points=16, epsilon_rel=1e12, max_states=7)
        space = build_search_space(frame, cfg)
        res = btbi_search(frame, space, cfg, bits=4)
        assert res.states_visited == 7

    def test_outliers_pull_ub_below_max(self):
        # Low-bit regime: wasting grid range on 100x outliers is far worse
        # than clipping them, so the searched ub stays at data scale.
        frame = outlier_frame(3)
        cfg = SearchConfig()
        space = build_search_space(frame, cfg)
        res = btbi_search(frame, space, cfg, bits=2)
        assert res.ub_star <= percentile(frame, 99.9)
        assert res.ub_star < float(frame.data.max())
        mm_err = quant_error(frame, minmax_bounds(frame, 2))
        assert res.error_min < mm_err

    def test_trace_records_visits(self):
        frame = gaussian_frame(6, n=500)
        cfg = SearchConfig(grid_points=6)
        space = build_search_space(frame, cfg)
        res = btbi_search(frame, space, cfg, bits=4, keep_trace=True)
        assert res.trace is not None
        assert len(res.trace) == res.states_visited
        lbs, ubs, errs = zip(*res.trace)
        assert min(errs) == res.error_min

    def test_error_min_matches_recomputation(self):
        frame = gaussian_frame(7, n=1000)
        cfg = SearchConfig(grid_points=8)
        space = build_search_space(frame, cfg)
        res = btbi_search(frame, space, cfg, bits=4)
        again = quant_error(frame, QuantParams(res.lb_star, res.ub_star, 4))
        assert res.error_min == again

    def test_rejects_bad_bits(self):
        frame = gaussian_frame(8, n=500)
        cfg = SearchConfig(grid_points=4)
        space = build_search_space(frame, cfg)
        with pytest.raises(ValueError):
            btbi_search(frame, space, cfg, bits=0)

    def test_deterministic(self):
        frame = gaussian_frame(9, n=1500)
        cfg = SearchConfig(grid_points=12)
        space = build_search_space(frame, cfg)
        a = btbi_search(frame, space, cfg, bits=2)
        b = btbi_search(frame, space, cfg, bits=2)
        assert a == b


class TestExhaustive:
    def test_grid2_is_four_evaluations(self):
        frame = gaussian_frame(10, n=500)
        space = build_search_space(frame, SearchConfig(grid_points=2))
        res = exhaustive_search(frame, space, bits=4)
        assert res.states_visited == 4

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_oracle_never_worse_than_btbi(self, seed):
        frame = gaussian_frame(seed, n=1000)
        cfg = SearchConfig(grid_points=10)
        space = build_search_space(frame, cfg)
        assert (
            exhaustive_search(frame, space, bits=4).error_min
            <= btbi_search(frame, space, cfg, bits=4).error_min
        )

    def test_tie_break_smallest_ub_then_largest_lb(self):
        # Dyadic construction whose two grid-global optima tie exactly at
        # 1 bit: (0, 0.5625) and (0.4375, 1.0) are mirror images on the
        # symmetric data {0, 0.5, 1}.
        frame = Tensor(np.array([0.0, 0.5, 1.0]))
        space = SearchSpace(
            lb_grid=np.array([0.0, 0.4375]),
            ub_grid=np.array([0.5625, 1.0]),
            delta_l=0.4375,
            delta_u=0.4375,
        )
        e1 = quant_error(frame, QuantParams(0.0, 0.5625, 1))
        e2 = quant_error(frame, QuantParams(0.4375, 1.0, 1))
        assert e1 == e2  # genuine tie, exact in floats
        others = (
            quant_error(frame, QuantParams(0.0, 1.0, 1)),
            quant_error(frame, QuantParams(0.4375, 0.5625, 1)),
        )
        assert all(e1 < o for o in others)
        res = exhaustive_search(frame, space, bits=1)
        assert (res.lb_star, res.ub_star) == (0.0, 0.5625)

    def test_pinned_regression_gaussian_g9(self):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(2024)))
        frame = Tensor(rng.normal(0.0, 1.0, 4096))
        space = build_search_space(frame, SearchConfig(grid_points=9))
        res = exhaustive_search(frame, space, bits=4)
        assert res.lb_star == pytest.approx(-2.5871306536864873, abs=0)
        assert res.ub_star == pytest.approx(2.5826927227572005, abs=0)
        assert res.error_min == pytest.approx(0.011088996846482058, rel=1e-12)


class TestBaselines:
    def test_minmax_simple(self):
        frame = Tensor(np.arange(11.0))
        p = minmax_bounds(frame, 8)
        assert (p.lb, p.ub) == (0.0, 10.0)

    def test_percentile_endpoints_equal_minmax(self):
        frame = gaussian_frame(12, n=999)
        a = percentile_bounds(frame, 0, 100, 8)
        b = minmax_bounds(frame, 8)
        assert (a.lb, a.ub) == (b.lb, b.ub)

    def test_degenerate_constant(self):
        with pytest.raises(DegenerateDistributionError):
            minmax_bounds(Tensor(np.full(10, 2.0)), 8)
        with pytest.raises(DegenerateDistributionError):
            percentile_bounds(Tensor(np.full(10, 2.0)), 1, 99, 8)

    def test_outlier_excluded_by_percentile(self):
        # Moderate-outlier regime (the documented "heavy tail" case): the
        # grid coarseness minmax pays exceeds the cost of clipping the
        # outlier. (With an extreme spike, e.g. 1e6, raw MSE prefers minmax
        # because the clipped residual dominates.)
        rng = np.random.Generator(np.random.Philox(13))
        x = rng.normal(0, 1, 5000)
        x[0] = 20.0
        frame = Tensor(x)
        p = percentile_bounds(frame, 0.1, 99.9, 4)
        m = minmax_bounds(frame, 4)
        assert p.ub < 15.0 and m.ub == 20.0
        assert quant_error(frame, p) < quant_error(frame, m)

    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
    def test_heavy_tail_dominance_chain(self, seed):
        frame = outlier_frame(seed, rate=0.001, scale=10.0)
        cfg = SearchConfig()
        space = build_search_space(frame, cfg)
        bt = btbi_search(frame, space, cfg, bits=4).error_min
        pc = quant_error(frame, percentile_bounds(frame, 0.1, 99.9, 4))
        mm = quant_error(frame, minmax_bounds(frame, 4))
        assert bt <= pc <= mm


class TestCalibrateSite:
    def test_per_tensor_single_entry(self):
        t = gaussian_frame(14, n=2000)
        scheme = calibrate_site(t, False, SearchConfig(), 8)
        assert not scheme.per_frame
        assert scheme.frame_count == 1

    def test_three_frames_distinct_intervals(self):
        rng = np.random.Generator(np.random.Philox(15))
        frames = np.stack([rng.normal(mu, 1.0, 3000) for mu in (0.0, 2.0, 4.0)])
        t = Tensor(frames, frame_axis=0)
        scheme = calibrate_site(t, True, SearchConfig(), 4)
        assert scheme.frame_count == 3
        intervals = [(p.lb, p.ub) for p in scheme.params]
        assert len(set(intervals)) == 3
        for i, (lo, hi) in enumerate(intervals):
            f = frame_slice(t, i)
            assert lo <= percentile(f, 10)
            assert hi >= percentile(f, 90)

    @pytest.mark.parametrize("bits", [2, 4, 8])
    def test_per_frame_total_error_not_worse(self, bits):
        rng = np.random.Generator(np.random.Philox([16, bits]))
        frames = np.stack([rng.normal(mu, 1.0, 2000) for mu in (0.0, 2.0, 4.0)])
        t = Tensor(frames, frame_axis=0)
        cfg = SearchConfig()
        per_frame = calibrate_site(t, True, cfg, bits)
        per_tensor = calibrate_site(t, False, cfg, bits)
        from framequant.quantize import quantize_per_frame
        from framequant.tensor import mse

        err_pf = mse(t, quantize_per_frame(t, per_frame))
        err_pt = mse(t, quantize_per_frame(t, per_tensor))
        assert err_pf <= err_pt

    def test_constant_frame_falls_back_with_warning(self):
        frames = np.stack([np.full(500, 1.0), np.linspace(0, 1, 500)])
        t = Tensor(frames, frame_axis=0)
        with pytest.warns(RuntimeWarning, match="minmax"):
            scheme, records = calibrate_site_detailed(t, True, SearchConfig(), 8)
        assert records[0].fallback
        assert not records[1].fallback
        assert scheme.params[0].ub > scheme.params[0].lb

    def test_requires_frame_axis_when_per_frame(self):
        with pytest.raises(ValueError, match="frame_axis"):
            calibrate_site(gaussian_frame(17, n=100), True, SearchConfig(), 8)

    def test_thread_count_does_not_change_result(self, monkeypatch):
        rng = np.random.Generator(np.random.Philox(18))
        t = Tensor(rng.normal(0, 1, (4, 2000)), frame_axis=0)
        monkeypatch.setenv("PMQ_THREADS", "1")
        seq = calibrate_site(t, True, SearchConfig(), 4)
        monkeypatch.setenv("PMQ_THREADS", "4")
        par = calibrate_site(t, True, SearchConfig(), 4)
        assert seq == par

    def test_bad_pmq_threads(self, monkeypatch):
        t = Tensor(np.random.Generator(np.random.Philox(19)).normal(0, 1, (2, 500)),
                   frame_axis=0)
        monkeypatch.setenv("PMQ_THREADS", "zero")
        with pytest.raises(ValueError, match="PMQ_THREADS"):
            calibrate_site(t, True, SearchConfig(), 4)

    def test_subsample_is_deterministic(self):
        frame = gaussian_frame(20, n=50000)
        cfg = SearchConfig(subsample=2000, subsample_seed=1)
        space = build_search_space(frame, cfg)
        a = btbi_search(frame, space, cfg, bits=4)
        b = btbi_search(frame, space, cfg, bits=4)
        assert a == b
