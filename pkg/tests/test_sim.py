import numpy as np
import pytest

from sltmpc.polytope import HPolytope, box
from sltmpc.sim import (
    BenchResult,
    bench_solve_times,
    box_bounds,
    roa_grid,
    sample_disturbance,
    simulate,
    tube_polygons,
    write_bench_csv,
    write_roa_csv,
    write_trajectory_csv,
    write_tubes_csv,
)


class TestSampleDisturbance:
    def test_degenerate_box_returns_zero(self):
        W = box([0.0, 0.0], [0.0, 0.0], constraint_set=False)
        rng = np.random.default_rng(0)
        np.testing.assert_array_equal(sample_disturbance(W, rng), np.zeros(2))

    def test_samples_stay_in_bounds(self, data):
        rng = np.random.default_rng(1)
        for _ in range(10_000):
            w = sample_disturbance(data.W, rng)
            assert np.all(w >= -0.1 - 1e-15) and np.all(w <= 0.1 + 1e-15)

    def test_empirical_mean_near_zero(self, data):
        # Statistical oracle: mean of n uniform samples on [-r, r] has
        # standard deviation r/sqrt(3 n); require a 3-sigma band.
        rng = np.random.default_rng(2)
        n = 200_000
        ws = np.array([sample_disturbance(data.W, rng) for _ in range(n)])
        bound = 3 * 0.1 / np.sqrt(3 * n)
        assert np.all(np.abs(ws.mean(axis=0)) <= bound)

    def test_vertex_mode_hits_corners(self, data):
        rng = np.random.default_rng(3)
        for _ in range(100):
            w = sample_disturbance(data.W, rng, mode="vertex")
            assert np.all(np.isin(np.abs(w), [0.1]))

    def test_non_box_rejected(self):
        H = np.array([[1.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
        P = HPolytope(H, np.ones(3))
        with pytest.raises(ValueError, match="box"):
            sample_disturbance(P, np.random.default_rng(0))


class TestBoxBounds:
    def test_detects_box(self, data):
        lo, hi = box_bounds(data.X)
        np.testing.assert_array_equal(lo, [-1.5, -1.5])
        np.testing.assert_array_equal(hi, [0.5, 1.5])

    def test_rejects_general_polytope(self):
        H = np.array([[1.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
        assert box_bounds(HPolytope(H, np.ones(3))) is None


@pytest.fixture(scope="module")
def coarse_grid(setup):
    xs = np.arange(-1.5, 0.5 + 1e-9, 0.25)
    ys = np.arange(-1.5, 1.5 + 1e-9, 0.25)
    return np.array([[x, y] for x in xs for y in ys])


@pytest.fixture(scope="module")
def coarse_roa(setup, coarse_grid):
    return roa_grid(setup, points=coarse_grid)


class TestRoaGrid:
    def test_point_outside_state_set_infeasible(self, setup):
        grid = roa_grid(setup, points=np.array([[2.0, 0.0]]))
        for statuses in grid.statuses.values():
            assert statuses == ["infeasible"]

    def test_origin_feasible_for_all_variants(self, setup):
        grid = roa_grid(setup, points=np.array([[0.0, 0.0]]))
        for statuses in grid.statuses.values():
            assert statuses == ["feasible"]

    def test_nesting_on_coarse_grid(self, coarse_roa):
        ft = coarse_roa.statuses["fixed_tube_baseline"]
        pa = coarse_roa.statuses["primary_async"]
        fs = coarse_roa.statuses["full_sltmpc"]
        assert not any(a == "feasible" and b != "feasible" for a, b in zip(ft, pa))
        assert not any(a == "feasible" and b != "feasible" for a, b in zip(pa, fs))

    def test_no_solver_failures_on_coarse_grid(self, coarse_roa):
        for statuses in coarse_roa.statuses.values():
            assert "solver-failure" not in statuses


class TestBench:
    def test_minimum_repeats_enforced(self, setup):
        with pytest.raises(ValueError):
            bench_solve_times(setup, n_repeats=10)

    def test_smoke_and_ratios(self, setup):
        bench = bench_solve_times(setup, n_repeats=30)
        assert set(bench.summary) == {"fixed_tube_baseline", "primary_async", "full_sltmpc"}
        for s in bench.summary.values():
            assert 0 < s["median_ms"] <= s["p95_ms"]
        # Ratio bookkeeping is self-consistent (a variant against itself is 1).
        pa = bench.summary["primary_async"]["mean_ms"]
        assert pa / pa == 1.0
        assert bench.ratios["primary_over_full"] == pytest.approx(
            pa / bench.summary["full_sltmpc"]["mean_ms"])
        # The fusing problem must stay close to the baseline's cost scale
        # (same order), far below the full tube optimization.
        assert bench.ratios["primary_over_fixed"] <= 8.0
        assert bench.ratios["primary_over_full"] <= 0.25


class TestCsvOutput:
    def test_trajectory_schema(self, setup, tmp_path):
        log = simulate(setup, seed=0, steps=6)
        path = tmp_path / "trajectory.csv"
        write_trajectory_csv(log, path)
        lines = path.read_text().splitlines()
        assert lines[0].startswith("# config_hash=")
        assert lines[1] == ("k,x1,x2,u1,w1,w2,lambda_0,lambda_1,lambda_2,"
                            "objective,solve_time_ms,mem_event")
        assert len(lines) == 2 + 6
        first = lines[2].split(",")
        assert first[0] == "0"
        assert first[-1] in ("none", "discard") or first[-1].startswith(("insert", "replace"))

    def test_float_precision_full_17_digits(self, setup, tmp_path):
        log = simulate(setup, seed=0, steps=3)
        path = tmp_path / "trajectory.csv"
        write_trajectory_csv(log, path)
        row = path.read_text().splitlines()[2].split(",")
        x1 = float(row[1])
        assert x1 == log.records[0].x[0]  # value-preserving round trip

    def test_reproducible_canonical_bytes(self, setup):
        a = simulate(setup, seed=123, steps=10)
        b = simulate(setup, seed=123, steps=10)
        assert a.canonical_bytes() == b.canonical_bytes()
        c = simulate(setup, seed=124, steps=10)
        assert a.canonical_bytes() != c.canonical_bytes()

    def test_roa_csv_schema(self, setup, tmp_path, coarse_roa):
        path = tmp_path / "roa.csv"
        write_roa_csv(coarse_roa, path)
        lines = path.read_text().splitlines()
        assert lines[0].startswith("# config_hash=")
        assert lines[1] == "x1,x2,variant,status"
        n_cells = coarse_roa.points.shape[0]
        assert len(lines) == 2 + 3 * n_cells

    def test_tubes_csv_schema(self, setup, tmp_path):
        polys = tube_polygons(setup.data.X.H, setup.drs_entry.tubes.t_x)
        write_tubes_csv({0: polys}, tmp_path / "tubes.csv", cfg_hash=setup.cfg_hash)
        lines = (tmp_path / "tubes.csv").read_text().splitlines()
        assert lines[1] == "entry_id,step_i,vertex_index,vx1,vx2"
        first = lines[2].split(",")
        assert first[:3] == ["0", "0", "0"]

    def test_bench_csv_schema(self, setup, tmp_path):
        bench = BenchResult(times={}, summary={"fixed_tube_baseline":
                                               {"mean_ms": 1.0, "median_ms": 1.0, "p95_ms": 2.0}},
                            ratios={}, cfg_hash="abc")
        write_bench_csv(bench, tmp_path / "bench.csv")
        lines = (tmp_path / "bench.csv").read_text().splitlines()
        assert lines[0] == "# config_hash=abc"
        assert lines[1] == "variant,mean_ms,median_ms,p95_ms"


class TestTubePolygons:
    def test_zero_step_is_origin(self, setup):
        polys = tube_polygons(setup.data.X.H, setup.drs_entry.tubes.t_x)
        np.testing.assert_array_equal(polys[0], np.zeros((1, 2)))

    def test_polygons_respect_tightenings(self, setup):
        t_x = setup.drs_entry.tubes.t_x
        polys = tube_polygons(setup.data.X.H, t_x)
        for i in range(1, len(polys)):
            for v in polys[i]:
                assert np.all(setup.data.X.H @ v <= t_x[i] + 1e-9)

    def test_polygons_grow_with_step(self, setup):
        polys = tube_polygons(setup.data.X.H, setup.drs_entry.tubes.t_x)
        assert len(polys[1]) >= 3
        # Monotone tubes: later cross sections contain earlier vertices.
        t_x = setup.drs_entry.tubes.t_x
        for v in polys[1]:
            assert np.all(setup.data.X.H @ v <= t_x[4] + 1e-9)


class TestClosedLoopConstraintSatisfaction:
    def test_states_and_inputs_inside_sets(self, setup):
        from sltmpc.polytope import contains
        log = simulate(setup, seed=11, steps=20)
        for rec in log.records:
            assert contains(setup.data.X, rec.x, 1e-6)
            assert contains(setup.data.U, rec.u, 1e-6)
