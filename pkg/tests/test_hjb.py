import dataclasses
import json

import numpy as np
import pytest

from lvharvest.hjb import (HJBConvergenceError, STENCIL, build_mdp, hjb_residual,
                           lipschitz_regularize, policy_evaluation, pointwise_max,
                           solve_average_reward)
from lvharvest.markov_noise import DiffusionCoeffs
from lvharvest.model import HarvestSpec, ModelParams
from lvharvest.policy import Grid, PolicyTable

SMALL = Grid(0.01, 3.0, 0.01, 3.0, 32, 32)
K = {tuple(int(v) for v in d): k for k, d in enumerate(STENCIL)}


@pytest.fixture(scope="module")
def small(default_model):
    params, hs, _, coeffs = default_model
    mdp = build_mdp(params, hs, coeffs, SMALL)
    vf, raw = solve_average_reward(mdp, 1e-7, 500_000)
    return mdp, vf, raw


def step_moments(mdp, efforts):
    P, dt = mdp.transition(efforts)
    g = mdp.grid
    d = np.array(STENCIL, dtype=float) * [g.hx, g.hy]
    mean = P @ d
    second = np.einsum("...k,ka,kb->...ab", P, d, d)
    return mean, second, dt


class TestChain:
    def test_rows_are_probabilities(self, small):
        mdp = small[0]
        for u in (0.0, mdp.M / 2, mdp.M):
            P, dt = mdp.transition(u)
            assert P.min() >= 0 and np.max(np.abs(P.sum(axis=-1) - 1)) < 1e-12
            assert np.all(dt > 0)

    def test_isotropic_no_drift_is_five_point(self, default_model):
        params, hs, _, _ = default_model
        coeffs = DiffusionCoeffs.from_matrix(0.3 * np.eye(2), abar1=1.0, abar2=0.0)
        mdp = build_mdp(params, hs, coeffs, Grid(0.1, 10, 0.1, 10, 20, 20))
        ex = mdp.rate_y[0, 0]
        flat = dataclasses.replace(mdp, rate_xp=np.full(mdp.grid.shape, ex),
                                   rate_xm=np.full(mdp.grid.shape, ex),
                                   by0=np.zeros(mdp.grid.shape), hv=np.zeros(mdp.grid.shape))
        P, _ = flat.transition(0.0)
        for d in [(1, 0), (-1, 0), (0, 1), (0, -1)]:
            np.testing.assert_allclose(P[..., K[d]], 0.25, atol=1e-15)

    def test_noise_free_is_upwind(self, default_model):
        params, hs, _, _ = default_model
        coeffs = DiffusionCoeffs.from_matrix(np.zeros((2, 2)), abar1=params.a1, abar2=params.s2)
        mdp = build_mdp(params, hs, coeffs, SMALL)
        bx, by = mdp.drift(0.5)
        P, _ = mdp.transition(0.5)
        assert np.all(P[..., K[(-1, 0)]][bx > 0] == 0) and np.all(P[..., K[(1, 0)]][bx < 0] == 0)
        assert np.all(P[..., K[(0, -1)]][by > 0] == 0) and np.all(P[..., K[(0, 1)]][by < 0] == 0)
        for d in [(1, 1), (1, -1), (-1, 1), (-1, -1)]:
            assert np.all(P[..., K[d]] == 0)

    def test_local_consistency(self, small, rng):
        mdp = small[0]
        g = mdp.grid
        A = mdp.coeffs.A
        u = rng.uniform(0, mdp.M, g.shape)
        mean, second, dt = step_moments(mdp, u)
        bx, by = mdp.drift(u)
        for _ in range(20):
            i, j = rng.integers(1, 31, 2)
            np.testing.assert_allclose(mean[i, j], np.array([bx[i, j], by[i, j]]) * dt[i, j],
                                       rtol=1e-12, atol=1e-15)
            # upwinding adds the numerical diffusion |b| h on the diagonal
            num = np.diag([abs(bx[i, j]) * g.hx, abs(by[i, j]) * g.hy])
            np.testing.assert_allclose(second[i, j], (A + num) * dt[i, j], rtol=1e-12, atol=1e-15)
            cov = second[i, j] - np.outer(mean[i, j], mean[i, j])
            assert np.max(np.abs(cov - A * dt[i, j])) <= (max(abs(bx[i, j]), abs(by[i, j])) * max(g.hx, g.hy)
                                                         + np.max(np.abs(mean[i, j])) ** 2 / dt[i, j]) * dt[i, j] + 1e-15

    def test_cross_term_too_large(self, default_model):
        params, hs, _, _ = default_model
        coeffs = DiffusionCoeffs.from_matrix([[1.0, 0.99], [0.99, 1.0]], abar1=1.0, abar2=0.0)
        with pytest.raises(ValueError, match=r"node \(0, 0\).*refine the grid"):
            build_mdp(params, hs, coeffs, Grid(0.01, 100, 0.01, 3, 16, 64))

    def test_generator_rows_sum_to_zero(self, small):
        G = small[0].generator(0.7)
        assert np.max(np.abs(np.asarray(G.sum(axis=1)))) < 1e-10


class TestPointwiseMax:
    P = ModelParams(1, 1, 1, -0.2, 1, 1, 1.5)
    LIN = HarvestSpec("michaelis", 0.25, "linear")

    def test_zero_density_ties_to_zero(self):
        assert pointwise_max(self.P, self.LIN, (1.0, 0.0), -5.0) == 0.0

    def test_linear_signs(self):
        assert pointwise_max(self.P, self.LIN, (1.0, 0.5), 0.0) == self.P.M
        assert pointwise_max(self.P, self.LIN, (1.0, 0.5), 2.0) == 0.0
        assert pointwise_max(self.P, self.LIN, (1.0, 0.5), 1.0) == 0.0

    @pytest.mark.parametrize("dVdy", [0.3, 0.8, 1.5])
    def test_concave_matches_stationary_point(self, dVdy):
        c = 0.5
        hs = HarvestSpec("ramp", 0.25, "saturating", c=c)
        y = 0.6
        yh = y * float(hs.h(y))
        # d/du [yh u/(c + yh u) - dVdy yh u] = 0
        u_star = np.clip((np.sqrt(c / dVdy) - c) / yh, 0.0, self.P.M)
        assert pointwise_max(self.P, hs, (1.0, y), dVdy) == pytest.approx(u_star, abs=1e-7)


class TestSolver:
    def test_zero_cap(self, default_model):
        params, hs, _, coeffs = default_model
        p0 = ModelParams(**{**params.to_dict(), "M": 0.0})
        mdp = build_mdp(p0, hs, coeffs, SMALL)
        vf, raw = solve_average_reward(mdp, 1e-6)
        assert vf.rho == 0.0 and np.all(vf.values == 0) and np.all(raw.efforts == 0)
        assert hjb_residual(vf, mdp) == 0.0

    def test_residual_and_anchor(self, small):
        mdp, vf, _ = small
        assert vf.values[vf.ref_node] == 0.0
        assert np.all(np.isfinite(vf.values))
        assert hjb_residual(vf, mdp) < 10 * vf.tol

    def test_dominates_constant_policies(self, small):
        mdp, vf, _ = small
        for u in np.linspace(0, mdp.M, 5):
            rho_c, pi = policy_evaluation(mdp, u)
            assert abs(pi.sum() - 1) < 1e-12
            assert vf.rho >= rho_c - vf.tol

    def test_raw_policy_evaluates_to_rho(self, small):
        mdp, vf, raw = small
        rho_p, _ = policy_evaluation(mdp, raw.efforts)
        assert rho_p == pytest.approx(vf.rho, abs=1e-5)

    def test_spans_nonincreasing(self, small):
        s = small[1].spans[10:]
        assert np.all(np.diff(s) <= 1e-12 * s[:-1] + 1e-300)

    def test_reference_node_invariance(self, small):
        mdp, vf, _ = small
        other, _ = solve_average_reward(mdp, 1e-7, 500_000, ref_node=(5, 20))
        assert abs(other.rho - vf.rho) < 1e-6
        assert other.values[5, 20] == 0.0

    def test_monotone_in_cap(self, default_model, small):
        params, hs, _, coeffs = default_model
        lower = build_mdp(ModelParams(**{**params.to_dict(), "M": 0.75}), hs, coeffs, SMALL)
        vf_low, _ = solve_average_reward(lower, 1e-7, 500_000)
        assert vf_low.rho <= small[1].rho + 1e-7

    def test_perturbation_raises_residual(self, small):
        mdp, vf, _ = small
        base = hjb_residual(vf, mdp)
        i, j = 12, 17
        bumped = dataclasses.replace(vf, values=vf.values.copy())
        bumped.values[i, j] += 1.0
        out_rate = min(mdp.rates(u)[i, j].sum() for u in np.linspace(0.0, mdp.M, 301))
        assert hjb_residual(bumped, mdp) >= out_rate - base

    def test_iteration_cap(self, small):
        with pytest.raises(HJBConvergenceError, match="final span"):
            solve_average_reward(small[0], 1e-9, 5)

    def test_exports(self, small):
        vf = small[1]
        rows = vf.to_csv().split("\r\n")
        assert rows[0] == "x,y,value" and len(rows) - 2 == 32 * 32
        h = json.loads(vf.to_json())
        assert h["rho"] == vf.rho and h["grid"]["nx"] == 32 and "iterations" in h


class TestRegularize:
    def test_constant_unchanged(self):
        p = PolicyTable.constant(SMALL, 0.6, 1.5)
        np.testing.assert_allclose(lipschitz_regularize(p, 3).efforts, 0.6, rtol=1e-15)

    def test_radius_zero_identity(self, small):
        raw = small[2]
        assert lipschitz_regularize(raw, 0) is raw

    def test_step_becomes_ramp(self):
        M, k = 1.5, 10
        E = np.zeros(SMALL.shape)
        E[k:, :] = M
        out = lipschitz_regularize(PolicyTable(SMALL, E, M), 2).efforts[:, 16]
        np.testing.assert_allclose(out[k - 2:k + 2], M * np.array([1, 3, 6, 8]) / 9, rtol=1e-14)
        assert np.all(out[:k - 2] == 0) and np.all(out[k + 2:] == M)
        assert np.all(np.diff(out) >= 0)

    def test_difference_quotient_bound(self, small):
        raw = small[2]
        for r in (1, 2, 3):
            E = lipschitz_regularize(raw, r).efforts
            g = SMALL
            dq = max(np.abs(np.diff(E, axis=0)).max() / g.hx, np.abs(np.diff(E, axis=1)).max() / g.hy)
            assert dq <= raw.M / (r * min(g.hx, g.hy)) + 1e-12
            assert E.min() >= 0 and E.max() <= raw.M


@pytest.mark.slow
def test_regularized_policy_reward_close_to_raw(default_cfg, default_model):
    from lvharvest.diffusion import DiffusionConfig, average_reward_diffusion
    params, hs, _, coeffs = default_model
    mdp = build_mdp(params, hs, coeffs, default_cfg.grid)
    _, raw = solve_average_reward(mdp, 1e-6, 2_000_000)
    cfg = DiffusionConfig(0.01, 1000.0, 200.0, seed=11)
    base = average_reward_diffusion(params, hs, coeffs, raw, cfg, 100)
    for r in (1, 2):
        est = average_reward_diffusion(params, hs, coeffs, lipschitz_regularize(raw, r), cfg, 100)
        assert abs(est.estimate - base.estimate) <= 2 * max(est.stderr, base.stderr)
