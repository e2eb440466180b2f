import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pgnn_pf.acpf import (NonConvergence, PFSpec, PolarState, RectState, injections_polar,
                          injections_rect, jacobian, mismatch, newton_solve, solution_csv)
from pgnn_pf.case_model import build_admittance

from conftest import random_state


def loop_injections(v, th, g, b):
    """Term-by-term polar power-flow sums."""
    n = len(v)
    p, q = np.zeros(n), np.zeros(n)
    for i in range(n):
        for k in range(n):
            d = th[i] - th[k]
            p[i] += v[i] * v[k] * (g[i, k] * math.cos(d) + b[i, k] * math.sin(d))
            q[i] += v[i] * v[k] * (g[i, k] * math.sin(d) - b[i, k] * math.cos(d))
    return p, q


class TestInjections:
    def test_polar_matches_loops(self, three_bus, rng):
        y = build_admittance(three_bus)
        st_ = random_state(rng, 3)
        inj = injections_polar(st_, y)
        p, q = loop_injections(st_.v, st_.theta, y.g, y.b)
        np.testing.assert_allclose(inj.p, p, atol=1e-13)
        np.testing.assert_allclose(inj.q, q, atol=1e-13)

    def test_matches_complex_power(self, y57, rng):
        st_ = random_state(rng, 57)
        vc = st_.v * np.exp(1j * st_.theta)
        s = vc * np.conj(y57.complex @ vc)
        inj = injections_rect(st_.to_rect(), y57)
        np.testing.assert_allclose(inj.p + 1j * inj.q, s, atol=1e-11)

    def test_rect_batched(self, y57, rng):
        mu, om = rng.normal(1, 0.05, (4, 57)), rng.normal(0, 0.1, (4, 57))
        batch = injections_rect(RectState(mu, om), y57)
        one = injections_rect(RectState(mu[2], om[2]), y57)
        np.testing.assert_allclose(batch.p[2], one.p, atol=1e-12)

    def test_flat_voltage_unloaded_lines(self, two_bus):
        inj = injections_polar(PolarState(np.ones(2), np.zeros(2)), build_admittance(two_bus))
        np.testing.assert_allclose([inj.p, inj.q], 0, atol=1e-15)

    def test_round_trip_coordinates(self, rng):
        st_ = random_state(rng, 10)
        back = st_.to_rect().to_polar()
        np.testing.assert_allclose(back.v, st_.v)
        np.testing.assert_allclose(back.theta, st_.theta)


class TestJacobian:
    @pytest.mark.parametrize("seed", range(5))
    def test_finite_difference(self, case57, y57, seed):
        rng = np.random.default_rng(seed)
        spec = PFSpec.from_system(case57)
        st_ = random_state(rng, 57, 0.05, 0.2)
        jac = jacobian(st_, spec, y57)
        pvpq, pq = spec.pvpq, spec.pq
        h = 1e-6
        num = np.empty_like(jac)
        for c in range(jac.shape[1]):
            v, th = st_.v.copy(), st_.theta.copy()
            vm, thm = v.copy(), th.copy()
            if c < len(pvpq):
                th[pvpq[c]] += h
                thm[pvpq[c]] -= h
            else:
                v[pq[c - len(pvpq)]] += h
                vm[pq[c - len(pvpq)]] -= h
            num[:, c] = (mismatch(PolarState(v, th), spec, y57)
                         - mismatch(PolarState(vm, thm), spec, y57)) / (2 * h)
        np.testing.assert_allclose(jac, num, atol=1e-6 * np.abs(jac).max())

    def test_shape(self, case57, y57):
        spec = PFSpec.from_system(case57)
        jac = jacobian(PolarState(np.ones(57), np.zeros(57)), spec, y57)
        assert jac.shape == (spec.n_unknowns, spec.n_unknowns) == (106, 106)


class TestNewton:
    def test_two_bus_hand_solution(self, two_bus):
        # Lossless x = 0.1: p2 = 10 v2 sin(t2), q2 = 10 v2^2 - 10 v2 cos(t2).
        v2, t2 = 0.95, -0.1
        p2, q2 = 10 * v2 * math.sin(t2), 10 * v2 ** 2 - 10 * v2 * math.cos(t2)
        spec = PFSpec(np.array([3, 1]), np.array([0.0, p2]), np.array([0.0, q2]),
                      np.array([1.0, 1.0]), np.zeros(2))
        sol = newton_solve(spec, build_admittance(two_bus))
        assert sol.state.v[1] == pytest.approx(v2, abs=1e-9)
        assert sol.state.theta[1] == pytest.approx(t2, abs=1e-9)

    @pytest.mark.parametrize("fixture", ["case57", "case118", "three_bus"])
    def test_base_cases(self, fixture, request):
        sys = request.getfixturevalue(fixture)
        sol = newton_solve(PFSpec.from_system(sys), build_admittance(sys))
        assert sol.final_mismatch_norm <= 1e-8
        assert 1 <= sol.iterations <= 20

    def test_recovers_known_state(self, case57, y57, rng):
        truth = random_state(rng, 57, 0.03, 0.2)
        types = np.array([b.bus_type for b in case57.buses])
        truth.theta[case57.slack] = 0.0
        sol = newton_solve(PFSpec.from_state(types, truth, y57), y57)
        np.testing.assert_allclose(sol.state.v, truth.v, atol=1e-8)
        np.testing.assert_allclose(sol.state.theta, truth.theta, atol=1e-8)

    def test_setpoints_respected(self, case57, y57):
        spec = PFSpec.from_system(case57)
        sol = newton_solve(spec, y57)
        fixed = spec.bus_types != 1
        np.testing.assert_allclose(sol.state.v[fixed], spec.v_spec[fixed])
        np.testing.assert_allclose(sol.inj.p[spec.pvpq], spec.p_spec[spec.pvpq], atol=1e-8)

    def test_infeasible_raises(self, case57, y57):
        spec = PFSpec.from_system(case57, np.asarray(case57.gen_dispatch) * 10,
                                  case57.p_demand * 10, case57.q_demand * 10)
        with pytest.raises(NonConvergence) as ei:
            newton_solve(spec, y57)
        assert ei.value.iterations <= 20

    def test_argument_checks(self, case57, y57):
        with pytest.raises(ValueError):
            newton_solve(PFSpec.from_system(case57), y57, tol=0)

    def test_csv(self, two_bus):
        sol = newton_solve(PFSpec.from_system(two_bus), build_admittance(two_bus))
        lines = solution_csv(sol, two_bus.ext_ids).splitlines()
        assert lines[0] == "bus,v,theta,mu,omega,p,q"
        assert lines[1].startswith("1,1,0,1,0,")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_rect_equals_polar_property(seed):
    from conftest import parse_case, THREE_BUS

    y = build_admittance(parse_case(THREE_BUS))
    st_ = random_state(np.random.default_rng(seed), 3, 0.2, math.pi)
    a, b = injections_polar(st_, y), injections_rect(st_.to_rect(), y)
    np.testing.assert_allclose([a.p, a.q], [b.p, b.q], atol=1e-12)
