import json

import numpy as np
import pytest

from lvharvest.diffusion import DiffusionConfig
from lvharvest.lyapunov import (ExponentSearchError, LyapunovFunctions, LyapunovParams,
                                boundary_average_check, boundary_start_points, choose_exponents,
                                comparison_check, comparison_system_simulate,
                                drift_inequality_scan, perturbed_sandwich_check,
                                v2_inequality_scan)
from lvharvest.markov_noise import DiffusionCoeffs, JumpChainSpec, center_noise
from lvharvest.model import HarvestSpec, ModelParams, averaged_coeffs
from lvharvest.policy import Grid

EX = ModelParams(a1=2, b1=1, c1=1, s2=-1, b2=1, c2=1, M=1)


@pytest.fixture(scope="module")
def setup(default_model):
    params, hs, spec, coeffs = default_model
    lp = choose_exponents(params, hs, coeffs)
    return params, hs, spec, coeffs, lp, LyapunovFunctions(params, coeffs, lp, hs)


class TestExponents:
    def test_example_feasible(self):
        lp = choose_exponents(EX)
        assert lp.lam > 0
        # feasibility oracle: direct evaluation of both conditions
        assert lp.p1 * 2 - lp.p2 * 1 > 0 and lp.p2 * (-1 + 2) > 0
        s1, s2 = lp.slacks(EX)
        assert s1 >= 1e-6 and s2 >= 1e-6

    def test_scan_optimum_matches_brute_force(self):
        lp = choose_exponents(EX, n_scan=61)
        g = np.geomspace(1e-4, 1.0, 62)[:-1]
        best = -np.inf
        for p1 in g:
            for p2 in g:
                # both budget rows read p1 + p2 <= 1/2 when b1 = c1 = b2 = c2 = 1
                if p1 + p2 <= 0.5:
                    best = max(best, min(2 * p1 - p2, p2) / 11)
        assert lp.lam == pytest.approx(best, rel=1e-12)

    def test_extinct_refused(self):
        with pytest.raises(ExponentSearchError, match="not persistent"):
            choose_exponents(ModelParams(1, 1, 1, -2, 1, 1, 1))

    def test_both_readings_reported(self, setup):
        lp = setup[4]
        assert lp.readings["signed"]["holds"] is True
        assert lp.readings["literal"]["holds_at_choice"] is False

    def test_round_trip(self, setup):
        lp = setup[4]
        assert LyapunovParams.from_dict(json.loads(json.dumps(lp.to_dict()))) == lp


class TestFunctions:
    def test_inf_compact_on_rays(self, setup):
        lf = setup[5]
        for th in np.linspace(0.05, 1.5, 7):
            r = np.geomspace(1e-6, 1e6, 25)
            v = lf.V(r * np.cos(th), r * np.sin(th))
            k = v.argmin()
            assert np.all(np.diff(v[:k + 1]) < 0) and np.all(np.diff(v[k:]) > 0)
            assert v[0] > 100 * v[k] and v[-1] > 100 * v[k]
        assert lf.V(1e-8, 1.0) > 1e2 and lf.V(1.0, 1e-8) > 1e2

    def test_gradient_matches_finite_differences(self, setup, rng):
        lf = setup[5]
        for _ in range(100):
            x, y = rng.uniform(0.05, 5.0, 2)
            gx, gy = lf.grad_V(x, y)
            h = 1e-6
            fx = (lf.V(x * (1 + h), y) - lf.V(x * (1 - h), y)) / (2 * h * x)
            fy = (lf.V(x, y * (1 + h)) - lf.V(x, y * (1 - h))) / (2 * h * y)
            assert abs(fx - gx) <= 1e-6 * max(abs(gx), lf.V(x, y) / x)
            assert abs(fy - gy) <= 1e-6 * max(abs(gy), lf.V(x, y) / y)

    def test_generator_ratio_matches_numerical_generator(self, setup, rng):
        params, hs, _, coeffs, _, lf = setup
        A = coeffs.A
        for _ in range(30):
            x, y = rng.uniform(0.1, 3.0, 2)
            u = rng.uniform(0, params.M)
            h = 1e-4
            V = lf.V
            vxx = (V(x + h, y) - 2 * V(x, y) + V(x - h, y)) / h ** 2
            vyy = (V(x, y + h) - 2 * V(x, y) + V(x, y - h)) / h ** 2
            vxy = (V(x + h, y + h) - V(x + h, y - h) - V(x - h, y + h) + V(x - h, y - h)) / (4 * h * h)
            gx, gy = lf.grad_V(x, y)
            # generator in the original coordinates with the averaged rates
            LV = (x * (coeffs.abar1 - params.b1 * x - params.c1 * y) * gx
                  + y * (coeffs.abar2 - hs.h(y) * u - params.b2 * y + params.c2 * x) * gy
                  + 0.5 * (A[0, 0] * x * x * vxx + A[1, 1] * y * y * vyy) + A[0, 1] * x * y * vxy)
            assert lf.generator_ratio(x, y, u) == pytest.approx(LV / V(x, y), abs=1e-5)

    def test_affine_in_effort(self, setup, rng):
        params, _, _, _, _, lf = setup
        x, y = rng.uniform(0.01, 20, (2, 50))
        r0, rm, r1 = (lf.generator_ratio(x, y, u) for u in (0.0, params.M / 2, params.M))
        np.testing.assert_allclose(rm, 0.5 * (r0 + r1), rtol=1e-12, atol=1e-12)
        assert np.all((rm - np.minimum(r0, r1) >= -1e-12) & (np.maximum(r0, r1) - rm >= -1e-12))


class TestScans:
    def test_drift_inequality_default(self, setup, default_cfg, tmp_path):
        params, hs, _, coeffs, lp, lf = setup
        grid = Grid(1e-8, 1e3, 1e-8, 1e3, 60, 60)
        rep = drift_inequality_scan(params, hs, coeffs, lp, grid)
        assert rep.passed and rep.worst_value <= -1 and np.isfinite(rep.extra["C_H"])
        far = 100 * lp.H
        assert lf.generator_ratio(far, 1.0, 0.0) < -50
        path = rep.write(tmp_path)
        d = json.loads(path.read_text())
        assert set(d) >= {"check", "params_hash", "pass", "worst_value", "threshold", "details_csv_path"}
        assert (tmp_path / d["details_csv_path"]).read_text().startswith("x,y,outside,ratio_u0")

    def test_drift_inequality_fails_with_tiny_box(self, setup):
        params, hs, _, coeffs, lp, _ = setup
        small_box = LyapunovParams(lp.p0, lp.p1, lp.p2, lp.lam, 0.05)
        rep = drift_inequality_scan(params, hs, coeffs, small_box, Grid(0.01, 10, 0.01, 10, 40, 40))
        assert not rep.passed and rep.extra["worst_node"] is not None

    def test_v2_inequality(self, setup):
        params, hs, _, coeffs, _, _ = setup
        rep = v2_inequality_scan(params, hs, coeffs, Grid(1e-6, 1e2, 1e-6, 1e2, 120, 120))
        assert rep.passed and rep.extra["beta"] == pytest.approx(0.5)


class TestSandwich:
    def test_zero_noise(self, setup):
        params, _, _, _, lp, _ = setup
        spec = JumpChainSpec.two_state(1.0, (0, 0))
        rep = perturbed_sandwich_check(spec, params, lp, 0.3, [(1.0, 1.0), (0.2, 3.0)])
        assert rep.passed and rep.extra["K"] == 0 and all(d["ratio"] == 0 for d in rep.details)

    def test_identity_and_sandwich(self, setup, rng):
        params, _, spec, _, lp, _ = setup
        nodes = np.exp(rng.uniform(np.log(1e-4), np.log(1e2), (100, 2)))
        rep = perturbed_sandwich_check(spec, params, lp, None, nodes)
        assert rep.passed and rep.worst_value < 1e-10
        assert rep.extra["epsilon_tested"] == pytest.approx(0.5 / rep.extra["K"])
        assert rep.extra["K_empirical"] <= rep.extra["K"]


class TestBoundary:
    def test_start_points(self):
        pts = boundary_start_points(1e-3, 2.0)
        assert pts.shape == (16, 2) and len({tuple(p) for p in pts}) == 16
        assert np.all(pts.min(axis=1) <= 1e-3) and np.all(pts.max(axis=1) <= 2.0)

    def test_origin_start_sees_f_at_origin(self, setup):
        params, hs, _, coeffs, lp, _ = setup
        rep = boundary_average_check(params, hs, coeffs, lp, 1e-200, lp.H, 20.0, 1.5, 4, 1,
                                     n_times=3)
        first = [d for d in rep.details if d["x0"] == 5e-201 and d["y0"] == 5e-201]
        f00 = lp.p1 * params.a1 + lp.p2 * params.s2
        assert first and all(abs(d["f_avg"] - f00) < 1e-9 for d in first)
        assert f00 > 9 * lp.lam

    def test_extinct_negative_control(self, setup):
        params, hs, spec, _, lp, _ = setup
        ext = ModelParams(**{**params.to_dict(), "s2": -2.0})
        rep = boundary_average_check(ext, hs, averaged_coeffs(ext, spec), lp, 1e-200, lp.H,
                                     40.0, 1.5, 4, 2, n_times=3)
        assert not rep.passed


class TestComparison:
    def test_noise_off_equilibria(self, default_model):
        params = default_model[0]
        quiet = DiffusionCoeffs.from_matrix(np.zeros((2, 2)), abar1=params.a1, abar2=params.s2)
        rec = comparison_system_simulate(params, quiet, DiffusionConfig(0.01, 100.0, 0.0, initial=(0.3, 0.5)))
        assert rec.x[-1] == pytest.approx(params.a1 / params.b1, rel=1e-9)
        assert rec.y[-1] < 1e-4

    def test_coupled_domination(self):
        params = ModelParams(a1=1, b1=1, c1=1, s2=-3, b2=1, c2=1, M=1)
        spec = center_noise(JumpChainSpec.two_state(1.0, (0.2, -0.2), (0.1, -0.1)))
        coeffs = averaged_coeffs(params, spec)
        thr = abs(params.s2) / 2 - 1.5 * coeffs.A[1, 1]
        hs = HarvestSpec()
        for seed in range(5):
            cfg = DiffusionConfig(0.01, 50.0, 0.0, seed=seed, initial=(0.05, 0.5), record_dt=0.01)
            tilde, orig = comparison_system_simulate(params, coeffs, cfg, coupled_with=(hs, 0.5))
            ok = np.cumprod(params.c2 * orig.x <= thr).astype(bool)
            assert ok.sum() > 100
            assert np.all(orig.y[ok] <= tilde.y[ok] * (1 + 1e-12))

    def test_check_default(self, setup):
        params, hs, _, coeffs, lp, _ = setup
        rep = comparison_check(params, hs, coeffs, lp, lp.H, 5000.0, 4, 3, n_starts=2)
        assert rep.passed and rep.worst_value >= 10 * lp.lam
