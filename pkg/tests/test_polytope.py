import numpy as np
import pytest
from scipy.optimize import linprog

from sltmpc.polytope import (
    DEFAULT_TOL,
    HPolytope,
    PolytopeError,
    VertexSet,
    box,
    box_vertices,
    check_containment_certificate,
    contains,
    hrep_from_vertices_2d,
    mapped_support,
    minkowski_sum_2d,
    pontryagin_tighten,
    scale,
    support,
    vertices_2d,
)

from conftest import random_polytope_2d

A_BENCH = np.array([[1.05, 0.25], [0.0, 1.0]])


def lp_support(P: HPolytope, eta) -> float:
    """Independent oracle: support via an LP over the H-representation."""
    res = linprog(-np.asarray(eta, dtype=float), A_ub=P.H, b_ub=P.h,
                  bounds=[(None, None)] * P.dim, method="highs")
    assert res.status == 0
    return -res.fun


class TestSupport:
    def test_box_support(self):
        W = box_vertices([-0.1, -0.1], [0.1, 0.1])
        assert support(W, [1.0, 1.0]) == pytest.approx(0.2, abs=1e-15)

    def test_zero_direction(self):
        W = box_vertices([-0.1, -0.1], [0.1, 0.1])
        assert support(W, [0.0, 0.0]) == 0.0

    def test_matches_lp_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            P = random_polytope_2d(rng)
            V = vertices_2d(P)
            eta = rng.standard_normal(2)
            assert support(V, eta) == pytest.approx(lp_support(P, eta), abs=1e-9)

    def test_empty_vertex_set_rejected(self):
        with pytest.raises(PolytopeError):
            VertexSet(np.zeros((0, 2)))

    def test_dimension_mismatch(self):
        W = box_vertices([-1, -1], [1, 1])
        with pytest.raises(PolytopeError):
            support(W, [1.0, 0.0, 0.0])

    def test_subadditivity(self):
        rng = np.random.default_rng(1)
        V = VertexSet(rng.standard_normal((7, 2)))
        for _ in range(200):
            e1, e2 = rng.standard_normal(2), rng.standard_normal(2)
            assert support(V, e1 + e2) <= support(V, e1) + support(V, e2) + 1e-12


class TestMappedSupport:
    def test_identity_map(self):
        rng = np.random.default_rng(2)
        V = VertexSet(rng.standard_normal((5, 2)))
        eta = rng.standard_normal(2)
        assert mapped_support(np.eye(2), V, eta) == pytest.approx(support(V, eta))

    def test_zero_map(self):
        V = box_vertices([-1, -1], [1, 1])
        assert mapped_support(np.zeros((2, 2)), V, [1.0, 2.0]) == 0.0

    def test_bench_plant_row(self):
        # Enumerating the four box corners of +-0.1 under the benchmark A
        # along e1 gives 0.1 * (1.05 + 0.25) = 0.13.
        W = box_vertices([-0.1, -0.1], [0.1, 0.1])
        assert mapped_support(A_BENCH, W, [1.0, 0.0]) == pytest.approx(0.13, abs=1e-15)

    def test_shape_mismatch(self):
        W = box_vertices([-0.1, -0.1], [0.1, 0.1])
        with pytest.raises(PolytopeError):
            mapped_support(np.eye(3), W, [1.0, 0.0, 0.0])


class TestPontryagin:
    def test_bench_boxes(self):
        X = box([-1.5, -1.5], [0.5, 1.5])
        W = box_vertices([-0.1, -0.1], [0.1, 0.1])
        inner = pontryagin_tighten(X, W)
        expected = box([-1.4, -1.4], [0.4, 1.4], constraint_set=False)
        np.testing.assert_allclose(inner.h, expected.h, atol=1e-15)

    def test_singleton_zero_is_identity(self):
        P = box([-1, -2], [3, 4])
        out = pontryagin_tighten(P, VertexSet(np.zeros((1, 2))))
        np.testing.assert_array_equal(out.h, P.h)

    def test_brute_force_grid_agreement(self):
        # Oracle: x is in P (-) S iff x + s stays in P for all vertices s
        # (sufficient for polytopes: support is attained at vertices).
        rng = np.random.default_rng(3)
        for _ in range(25):
            P = random_polytope_2d(rng)
            S = VertexSet(rng.uniform(-0.2, 0.2, (5, 2)))
            inner = pontryagin_tighten(P, S)
            xs = rng.uniform(-1.2, 1.2, (300, 2))
            member = np.array([contains(inner, x, 1e-9) for x in xs])
            oracle = np.array([all(contains(P, x + s, 1e-9) for s in S.points) for x in xs])
            # Exclude points within tolerance of the boundary.
            margin = np.array([np.max(inner.H @ x - inner.h) for x in xs])
            decisive = np.abs(margin) > 1e-6
            assert np.array_equal(member[decisive], oracle[decisive])

    def test_empty_result_flagged_not_raised(self):
        P = box([-0.1, -0.1], [0.1, 0.1])
        S = VertexSet(np.array([[0.5, 0.5], [-0.5, -0.5]]))
        out = pontryagin_tighten(P, S)
        assert out.is_empty

    def test_tighten_then_add_stays_inside(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            P = random_polytope_2d(rng)
            S = VertexSet(rng.uniform(-0.1, 0.1, (4, 2)))
            inner = pontryagin_tighten(P, S)
            if inner.is_empty:
                continue
            for v in vertices_2d(inner).points:
                for s in S.points:
                    assert contains(P, v + s, 1e-9)


class TestScale:
    def test_identity(self):
        P = box([-1, -1], [1, 1])
        np.testing.assert_array_equal(scale(P, 1.0).h, P.h)

    def test_zero_collapses(self):
        P = box([-1, -1], [1, 1])
        out = scale(P, 0.0)
        assert np.all(out.h == 0.0)
        assert contains(out, [0.0, 0.0], 0.0)
        assert not contains(out, [1e-6, 0.0], 0.0)

    def test_half_unit_box(self):
        P = box([-1, -1], [1, 1])
        np.testing.assert_allclose(scale(P, 0.5).h, 0.5 * np.ones(4))

    def test_negative_rejected(self):
        with pytest.raises(PolytopeError):
            scale(box([-1, -1], [1, 1]), -0.5)

    def test_composition_exact_for_binary_scalings(self):
        rng = np.random.default_rng(5)
        P = random_polytope_2d(rng)
        lhs = scale(scale(P, 0.5), 0.25)
        rhs = scale(P, 0.125)
        np.testing.assert_array_equal(lhs.h, rhs.h)

    def test_composition_generic_to_ulp(self):
        rng = np.random.default_rng(5)
        P = random_polytope_2d(rng)
        lhs = scale(scale(P, 0.7), 0.3)
        rhs = scale(P, 0.7 * 0.3)
        np.testing.assert_allclose(lhs.h, rhs.h, rtol=4e-16)


class TestContains:
    def test_origin_in_constraint_sets(self):
        assert contains(box([-1.5, -1.5], [0.5, 1.5]), [0, 0], 0.0)

    def test_boundary_vertex_zero_tol(self):
        assert contains(box([-1, -1], [1, 1]), [1.0, 1.0], 0.0)

    def test_outside_by_twice_tol(self):
        tol = 1e-6
        assert not contains(box([-1, -1], [1, 1]), [1.0 + 2 * tol, 0.0], tol)


class TestVertices2d:
    def test_unit_box(self):
        V = vertices_2d(box([-1, -1], [1, 1]))
        assert len(V) == 4
        got = {tuple(np.round(v, 12)) for v in V.points}
        assert got == {(1, 1), (-1, 1), (-1, -1), (1, -1)}

    def test_triangle(self):
        H = np.array([[0.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
        h = np.array([0.0, 1.0, 1.0])
        V = vertices_2d(HPolytope(H, h))
        assert len(V) == 3

    def test_redundant_row_dropped(self):
        H = np.vstack([box([-1, -1], [1, 1]).H, [[1.0, 0.0]]])
        h = np.concatenate([box([-1, -1], [1, 1]).h, [5.0]])
        assert len(vertices_2d(HPolytope(H, h))) == 4

    def test_vertices_tight_on_two_rows(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            P = random_polytope_2d(rng)
            for v in vertices_2d(P).points:
                resid = P.h - P.H @ v
                assert np.min(resid) >= -1e-9
                assert np.sum(resid <= 1e-7) >= 2

    def test_unbounded_rejected(self):
        H = np.array([[1.0, 0.0], [0.0, 1.0], [0.4, 0.6]])
        h = np.ones(3)
        with pytest.raises(PolytopeError, match="unbounded"):
            vertices_2d(HPolytope(H, h))

    def test_empty_rejected(self):
        H = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        h = np.array([-1.0, -1.0, 1.0, 1.0])
        with pytest.raises(PolytopeError, match="empty"):
            vertices_2d(HPolytope(H, h))

    def test_ccw_order(self):
        V = vertices_2d(box([-1, -1], [1, 1])).points
        area2 = 0.0
        for i in range(len(V)):
            p, q = V[i], V[(i + 1) % len(V)]
            area2 += p[0] * q[1] - q[0] * p[1]
        assert area2 > 0


class TestHrepRoundTrip:
    def test_hull_to_hrep_membership(self):
        rng = np.random.default_rng(7)
        pts = rng.standard_normal((20, 2))
        V = vertices_2d(random_polytope_2d(rng))
        P = hrep_from_vertices_2d(V)
        for v in V.points:
            assert contains(P, v, 1e-9)

    def test_minkowski_box_sum(self):
        V1 = box_vertices([-1, -1], [1, 1])
        V2 = box_vertices([-0.5, -0.5], [0.5, 0.5])
        S = minkowski_sum_2d(V1, V2)
        assert support(S, [1.0, 0.0]) == pytest.approx(1.5)
        assert support(S, [1.0, 1.0]) == pytest.approx(3.0)


class TestContainmentCertificate:
    def test_zero_action_case(self):
        X = box([-1, -1], [1, 1])
        Y = box([-2, -2], [2, 2])
        W = box_vertices([-0.1, -0.1], [0.1, 0.1])
        ok = check_containment_certificate(np.zeros((4, 4)), 0.0, 1.0, np.eye(2), np.zeros((2, 2)), X, Y, W)
        assert ok

    def test_identity_containment(self):
        X = box([-1, -1], [1, 1])
        ok = check_containment_certificate(np.eye(4), 1.0, 1.0, np.eye(2), np.zeros((2, 2)), X, X,
                          VertexSet(np.zeros((1, 2))))
        assert ok

    def test_violated_offsets_rejected(self):
        X = box([-1, -1], [1, 1])
        small = box([-0.5, -0.5], [0.5, 0.5])
        # alpha A X = X cannot fit inside 0.5 X; the identity certificate fails.
        ok = check_containment_certificate(np.eye(4), 1.0, 1.0, np.eye(2), np.zeros((2, 2)), X, small,
                          VertexSet(np.zeros((1, 2))))
        assert not ok

    def test_certificate_implies_sampled_containment(self, setup, seed_entry):
        data, term = setup.data, setup.terminal
        A_cl = data.model.A + data.model.B @ term.K_f
        e = seed_entry
        assert check_containment_certificate(e.lam_cert, e.alpha, e.alpha, A_cl, e.tubes.gamma,
                            term.X_f, term.X_f, data.W_vertices)
        rng = np.random.default_rng(8)
        scaled = scale(term.X_f, e.alpha)
        for _ in range(1000):
            lam = rng.dirichlet(np.ones(len(term.X_f_vertices)))
            xf = e.alpha * (lam @ term.X_f_vertices.points)
            wv = data.W_vertices.points
            w = wv[0] + rng.uniform(0, 1, 2) * (wv[2] - wv[0])
            assert contains(scaled, A_cl @ xf + e.tubes.gamma @ w, DEFAULT_TOL)

    def test_dimension_mismatch(self):
        X = box([-1, -1], [1, 1])
        with pytest.raises(PolytopeError):
            check_containment_certificate(np.eye(3), 1.0, 1.0, np.eye(2), np.zeros((2, 2)), X, X,
                         VertexSet(np.zeros((1, 2))))


class TestHPolytopeInvariants:
    def test_zero_row_rejected(self):
        with pytest.raises(PolytopeError):
            HPolytope(np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]]), np.ones(3))

    def test_too_few_rows_rejected(self):
        with pytest.raises(PolytopeError):
            HPolytope(np.array([[1.0, 0.0], [0.0, 1.0]]), np.ones(2))

    def test_constraint_set_needs_interior_origin(self):
        H = box([-1, -1], [1, 1]).H
        with pytest.raises(PolytopeError):
            HPolytope(H, np.array([1.0, 1.0, 0.0, 1.0]), constraint_set=True)

    def test_is_empty_flag(self):
        P = box([-1, -1], [1, 1])
        assert not P.is_empty
