import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drmpc import nlp, risk
from drmpc.errors import InvalidArgument
from drmpc.predict import ObstacleGeometry, normalized_halfspaces, polytope_from_state
from drmpc.risk import RiskSpec

from oracles import (cvar_bruteforce, random_convex_polygon, distance_to_exterior_grid, dr_bound_conic, dr_bound_grid,
                     random_rectangle_samples)


class TestDistance:
    def test_outside_is_zero(self):
        poly = polytope_from_state(ObstacleGeometry(1.0, 1.0), [0, 0, 0])
        assert risk.distance_to_safe_region([3.0, 0.2], poly) == 0.0

    def test_unit_box_center(self):
        poly = polytope_from_state(ObstacleGeometry(1.0, 1.0), [0, 0, 0])
        assert risk.distance_to_safe_region([0.0, 0.0], poly) == 1.0

    def test_grid_projection_oracle(self):
        rng = np.random.default_rng(7)
        h = 2e-3
        for _ in range(100):
            poly, verts = random_convex_polygon(rng)
            y = verts.mean(axis=0) + rng.uniform(-1.5, 1.5, 2)
            ref = distance_to_exterior_grid(y, verts, h)
            got = risk.distance_to_safe_region(y, poly)
            if ref == 0.0:
                assert got == 0.0
            else:
                assert abs(got - ref) <= 2 * h

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-math.pi, math.pi))
    def test_lemma_identity(self, px, py, heading):
        poly = polytope_from_state(ObstacleGeometry(1.3, 0.4), [0.2, -0.1, heading])
        s = normalized_halfspaces(poly)
        y = np.array([px, py])
        lhs = max(float(np.min(s.c @ y + s.d)), 0.0)
        norms = np.linalg.norm(poly.G, axis=1)
        rhs = float(np.min(np.maximum(s.d - (poly.G / norms[:, None]) @ y, 0.0)))
        assert lhs == pytest.approx(rhs, abs=1e-12)
        assert risk.distance_to_safe_region(y, poly) == pytest.approx(lhs, abs=1e-12)
        if not np.all(poly.G @ y <= poly.g):
            assert risk.distance_to_safe_region(y, poly) == 0.0


class TestCvar:
    def test_constant(self):
        for a in (0.0, 0.3, 0.95, 0.999):
            assert risk.cvar_empirical([2.5] * 7, a) == pytest.approx(2.5, abs=1e-14)

    def test_worked_example(self):
        assert risk.cvar_empirical([0, 0, 0, 10], 0.95) == pytest.approx(10.0, abs=1e-12)

    def test_limits(self):
        rng = np.random.default_rng(1)
        x = rng.exponential(size=17)
        assert risk.cvar_empirical(x, 0.0) == pytest.approx(x.mean(), abs=1e-12)
        assert risk.cvar_empirical(x, 1 - 1e-9) == pytest.approx(x.max(), abs=1e-12)

    def test_bruteforce(self):
        rng = np.random.default_rng(2)
        for _ in range(300):
            x = rng.normal(size=int(rng.integers(1, 40))) * rng.uniform(0.1, 10)
            a = float(rng.uniform(0, 0.999))
            assert risk.cvar_empirical(x, a) == pytest.approx(cvar_bruteforce(x, a), abs=1e-10)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30), st.floats(0.0, 0.999))
    def test_between_mean_and_max(self, xs, a):
        v = risk.cvar_empirical(xs, a)
        scale = 1e-9 * max(1.0, max(abs(x) for x in xs))
        assert np.mean(xs) - scale <= v <= max(xs) + scale

    def test_bad_input(self):
        with pytest.raises(InvalidArgument):
            risk.cvar_empirical([], 0.5)
        with pytest.raises(InvalidArgument):
            risk.cvar_empirical([1.0], 1.0)


class TestSaa:
    def test_far_point(self):
        C, D = random_rectangle_samples(np.random.default_rng(0), 10)
        assert risk.saa_risk((C, D), [50.0, 50.0], 0.95) == 0.0

    def test_single_sample(self):
        poly = polytope_from_state(ObstacleGeometry(1.0, 0.5), [0, 0, 0.3])
        s = normalized_halfspaces(poly)
        for a in (0.0, 0.5, 0.99):
            assert risk.saa_risk([s], [0.1, 0.1], a) == pytest.approx(risk.distance_to_safe_region([0.1, 0.1], poly))

    def test_cross_module(self):
        rng = np.random.default_rng(3)
        geom = ObstacleGeometry(1.0, 0.5)
        states = rng.normal(scale=0.5, size=(20, 3))
        polys = [polytope_from_state(geom, x) for x in states]
        y = np.array([0.2, 0.1])
        ref = risk.cvar_empirical([risk.distance_to_safe_region(y, p) for p in polys], 0.9)
        assert risk.saa_risk([normalized_halfspaces(p) for p in polys], y, 0.9) == pytest.approx(ref, abs=1e-10)


class TestBound:
    def test_theta_zero_is_saa(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            C, D = random_rectangle_samples(rng, 8, spread=0.6)
            y = rng.normal(scale=0.7, size=2)
            spec = RiskSpec(0.9, 0.01, 0.0, 8)
            assert risk.dr_cvar_upper_bound((C, D), y, spec) == pytest.approx(risk.saa_risk((C, D), y, 0.9), abs=1e-10)

    def test_monotone_in_theta_and_alpha(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            C, D = random_rectangle_samples(rng, 6, spread=0.6)
            y = rng.normal(scale=0.7, size=2)
            vals = [risk.dr_bound(C, D, y, th, 0.9).value for th in (0.0, 1e-5, 1e-4, 1e-3, 1e-1)]
            assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))
            vals = [risk.dr_bound(C, D, y, 1e-3, a).value for a in (0.1, 0.5, 0.9, 0.99)]
            assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))
            assert vals[0] >= risk.saa_risk((C, D), y, 0.1) - 1e-12

    def test_tiny_grid_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            lo = rng.uniform(-1, 0, 2)
            hi = lo + rng.uniform(0.3, 1.5, 2)
            C = np.array([[[-1.0], [1.0]], [[-1.0], [1.0]]])
            D = np.stack([hi, -lo], 1)
            y = np.array([rng.uniform(-0.5, 0.5)])
            theta = float(rng.choice([0.0, 0.05, 0.3]))
            alpha = float(rng.choice([0.5, 0.9]))
            got = risk.dr_bound(C, D, y, theta, alpha).value
            assert got == pytest.approx(dr_bound_grid(C, D, y, theta, alpha), abs=1e-3)

    def test_conic_oracle(self):
        rng = np.random.default_rng(8)
        for _ in range(15):
            N = int(rng.integers(1, 11))
            C, D = random_rectangle_samples(rng, N, spread=0.5)
            y = rng.normal(scale=0.6, size=2)
            theta = float(rng.choice([0.0, 1e-3, 1e-2, 0.1]))
            alpha = float(rng.uniform(0.5, 0.97))
            got = risk.dr_bound(C, D, y, theta, alpha).value
            assert got == pytest.approx(dr_bound_conic(C, D, y, theta, alpha), abs=1e-6)

    def test_inner_solution_is_feasible_and_attains_value(self):
        rng = np.random.default_rng(9)
        C, D = random_rectangle_samples(rng, 12, spread=0.5)
        y = np.array([0.1, -0.2])
        spec = RiskSpec(0.95, 0.01, 0.05, 12)
        b = risk.dr_inner_solution((C, D), y, spec)
        assert risk.block_violation((C, D), y, b.block, spec) <= 1e-9
        assert risk.block_objective(b.block, spec) == pytest.approx(b.value, abs=1e-9)

    def test_gradient_finite_differences(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            C, D = random_rectangle_samples(rng, 10, spread=0.5)
            y = rng.normal(scale=0.6, size=2) + np.array([3.0, 4.0]) * rng.integers(0, 2)
            b = risk.dr_bound(C, D, y, 5e-3, 0.9)
            h = 1e-6
            fd = [(risk.dr_bound(C, D, y + e, 5e-3, 0.9).value - risk.dr_bound(C, D, y - e, 5e-3, 0.9).value) / (2 * h)
                  for e in np.eye(2) * h]
            np.testing.assert_allclose(b.gradient, fd, atol=1e-4)

    def test_far_field_floor(self):
        # r >= 1/sqrt(m) keeps the bound above theta * omega / (2 (1 - alpha)),
        # and far from every sample it approaches that floor
        C, D = random_rectangle_samples(np.random.default_rng(0), 5, spread=0.2)
        for y, rel in ((np.array([30.0, 0.0]), 0.01), (np.array([0.5, 0.5]), None)):
            v = risk.dr_bound(C, D, y, 1e-4, 0.95).value
            floor = 1e-4 * math.sqrt(y @ y + 2) / (2 * 0.05)
            assert v >= floor - 1e-12
            if rel is not None:
                assert v <= (1 + rel) * floor

    def test_spec_validation(self):
        for kw in (dict(alpha=1.0), dict(alpha=0.0), dict(delta=-1.0), dict(theta=-1e-6), dict(N=0)):
            base = dict(alpha=0.9, delta=0.01, theta=0.0, N=5)
            base.update(kw)
            with pytest.raises(InvalidArgument):
                RiskSpec(**base)


def _fixed_y_problem(block, y):
    yb = nlp.VariableBlock(block.position, 2, lower=y, upper=y, init=y)
    names = block.names()

    def lhs(xs, spec):
        val = xs[names["z"]][0] + xs[names["s"]].mean() / (1 - spec.alpha)
        if names["lam"] in xs:
            val += xs[names["lam"]][0] * spec.theta / (1 - spec.alpha)
        return val

    return yb, names, lhs


class TestBlock:
    def test_counts(self):
        C, D = random_rectangle_samples(np.random.default_rng(0), 1)
        blk = risk.build_dr_constraint_block((C, D), RiskSpec(0.95, 0.01, 5e-5, 1), 1)
        sizes = {v.name: v.size for v in blk.variables}
        assert sizes == {"risk_1_z": 1, "risk_1_lam": 1, "risk_1_s": 1, "risk_1_rho": 4}
        rows = {c.name.split("_")[-1]: (c.kind, c.size) for c in blk.constraints}
        assert rows == {"budget": ("ineq", 1), "hinge": ("ineq", 1), "floor": ("ineq", 1), "ball": ("ineq", 1),
                        "simplex": ("eq", 1)}
        C, D = random_rectangle_samples(np.random.default_rng(0), 7)
        blk = risk.build_dr_constraint_block((C, D), RiskSpec(0.95, 0.01, 5e-5, 7), 3, tag="o1")
        assert sum(v.size for v in blk.variables) == 2 + 7 + 7 * 4
        assert sum(c.size for c in blk.constraints) == 1 + 4 * 7
        saa = risk.build_saa_constraint_block((C, D), RiskSpec(0.95, 0.01, 0.0, 7), 3)
        assert sum(v.size for v in saa.variables) == 1 + 7 + 7 * 4
        assert sum(c.size for c in saa.constraints) == 1 + 3 * 7

    @pytest.mark.parametrize("robust,theta", [(True, 0.02), (True, 0.1), (True, 0.3), (True, 0.0), (False, 0.0)])
    def test_block_minimum_matches_evaluator(self, robust, theta):
        rng = np.random.default_rng(12)
        C, D = random_rectangle_samples(rng, 5, spread=0.4)
        y = np.array([0.15, -0.1])
        spec = RiskSpec(0.9, 10.0, theta, 5)
        build = risk.build_dr_constraint_block if robust else risk.build_saa_constraint_block
        blk = build((C, D), spec, 1, init=risk.saa_start((C, D), y, spec.alpha))
        yb, names, lhs = _fixed_y_problem(blk, y)
        grad_vars = [n for n in (names["z"], names["s"], names["lam"]) if any(v.name == n for v in blk.variables)]

        def grad(xs):
            out = {names["z"]: np.ones(1), names["s"]: np.full(5, 1 / (5 * (1 - spec.alpha)))}
            if names["lam"] in xs:
                out[names["lam"]] = np.full(1, spec.theta / (1 - spec.alpha))
            return out

        obj = nlp.ObjectiveBlock("lhs", tuple(grad_vars), lambda xs: lhs(xs, spec), grad)
        prob = nlp.assemble([yb, blk, obj])
        assert nlp.check_derivatives(prob, prob.initial_point + 0.01) < 1e-6
        sol = nlp.solve_local(prob, max_iter=500)
        assert sol.ok, sol.message
        ref = risk.dr_bound(C, D, y, theta, spec.alpha).value
        assert sol.objective_value == pytest.approx(ref, abs=1e-4)
