import numpy as np
import pytest

from lvharvest.diffusion import DiffusionConfig, average_reward_diffusion
from lvharvest.markov_noise import JumpChainSpec
from lvharvest.model import ModelParams, interior_equilibrium
from lvharvest.paths import SimulationError
from lvharvest.policy import Grid, PolicyTable
from lvharvest.wideband import WidebandConfig, average_reward_wideband, simulate_wideband

GRID = Grid(0.01, 3.0, 0.01, 3.0, 16, 16)
SILENT = JumpChainSpec.two_state(1.0, (0.0, 0.0))


def test_config_validation():
    with pytest.raises(ValueError):
        WidebandConfig(epsilon=1.5, t_end=10, burn_in=1)
    with pytest.raises(ValueError):
        WidebandConfig(epsilon=0.5, t_end=10, burn_in=10)
    with pytest.raises(ValueError):
        WidebandConfig(epsilon=0.5, t_end=10, burn_in=1, max_substep=0)


def test_substep_rule(default_model):
    _, _, spec, _ = default_model
    assert WidebandConfig(0.1, 10, 1).substep(spec) == pytest.approx(0.01 / (10 * 0.5))
    assert WidebandConfig(1.0, 10, 1, max_substep=0.01).substep(spec) == 0.01


def test_equilibrium_held(default_model):
    params, hs, _, _ = default_model
    z = interior_equilibrium(params)
    cfg = WidebandConfig(0.5, 100.0, 10.0, initial=tuple(z))
    rec = simulate_wideband(params, hs, SILENT, PolicyTable.constant(GRID, 0.0, params.M), cfg)
    assert np.max(np.abs(rec.states - z)) < 1e-6


def test_bit_identical_reruns(default_model):
    params, hs, spec, _ = default_model
    cfg = WidebandConfig(0.3, 50.0, 5.0, seed=9)
    pol = PolicyTable.constant(GRID, 0.7, params.M)
    assert simulate_wideband(params, hs, spec, pol, cfg).identical(
        simulate_wideband(params, hs, spec, pol, cfg))


def test_positivity_and_csv(default_model):
    params, hs, spec, _ = default_model
    rec = simulate_wideband(params, hs, spec, PolicyTable.constant(GRID, params.M, params.M),
                            WidebandConfig(0.2, 200.0, 10.0, seed=1))
    assert np.all(rec.x > 0) and np.all(rec.y > 0)
    assert np.all(rec.running_average >= 0)
    head = rec.to_csv().split("\r\n")[0]
    assert head == "t,x,y,u,reward_rate,running_avg"


def test_zero_policy_exact_zero(default_model):
    params, hs, spec, _ = default_model
    est = average_reward_wideband(params, hs, spec, PolicyTable.constant(GRID, 0.0, params.M),
                                  WidebandConfig(0.5, 50.0, 10.0), 4)
    assert est.estimate == 0.0


def test_thread_count_does_not_change_result(default_model):
    params, hs, spec, _ = default_model
    cfg = WidebandConfig(0.4, 60.0, 10.0, seed=(3, 4))
    pol = PolicyTable.constant(GRID, 1.0, params.M)
    a = average_reward_wideband(params, hs, spec, pol, cfg, 6, threads=1)
    b = average_reward_wideband(params, hs, spec, pol, cfg, 6, threads=3)
    assert np.array_equal(a.per_path, b.per_path)
    assert a.to_json() == b.to_json()


def test_step_budget_guard(default_model):
    params, hs, spec, _ = default_model
    cfg = WidebandConfig(0.01, 1000.0, 10.0, step_budget=1e6)
    with pytest.raises(SimulationError, match="budget"):
        simulate_wideband(params, hs, spec, PolicyTable.constant(GRID, 0, params.M), cfg)


def test_initial_state_must_be_interior(default_model):
    params, hs, spec, _ = default_model
    with pytest.raises(ValueError, match="open quadrant"):
        simulate_wideband(params, hs, spec, PolicyTable.constant(GRID, 0, params.M),
                          WidebandConfig(0.5, 10.0, 1.0, initial=(0.0, 1.0)))


def test_extinct_regime(default_model):
    params, hs, spec, _ = default_model
    ext = ModelParams(**{**params.to_dict(), "s2": -2.0})
    cfg = WidebandConfig(0.3, 500.0, 100.0, seed=2)
    for u in (0.0, ext.M):
        est = average_reward_wideband(ext, hs, spec, PolicyTable.constant(GRID, u, ext.M), cfg, 50)
        assert est.terminal[:, 1].mean() < 1e-3
        assert est.estimate < 1e-3


def test_running_average_stabilizes(default_model):
    params, hs, spec, _ = default_model
    cfg = WidebandConfig(0.25, 2000.0, 100.0, seed=4)
    rec = simulate_wideband(params, hs, spec, PolicyTable.constant(GRID, params.M, params.M), cfg)
    ra = rec.running_average
    half = ra[np.searchsorted(rec.times, 1000.0)]
    assert abs(ra[-1] - half) < 0.05 * ra[-1]


def test_sup_norm_grows_at_most_linearly(default_model):
    params, hs, spec, _ = default_model
    pol = PolicyTable.constant(GRID, 0.5, params.M)
    ratios = []
    for z0 in [(0.5, 0.5), (3.0, 2.0), (8.0, 6.0)]:
        cfg = WidebandConfig(0.3, 20.0, 1.0, initial=z0, record_dt=0.05)
        sups = []
        for s in range(10):
            rec = simulate_wideband(params, hs, spec, pol,
                                    WidebandConfig(**{**cfg.to_dict(), "seed": s}))
            sups.append(np.max(rec.x ** 2 + rec.y ** 2))
        ratios.append(np.mean(sups) / (1 + z0[0] ** 2 + z0[1] ** 2))
    assert max(ratios) < 2.0


@pytest.mark.slow
def test_matches_diffusion_for_constant_effort(default_model):
    params, hs, spec, coeffs = default_model
    pol = PolicyTable.constant(GRID, params.M, params.M)
    diff = average_reward_diffusion(params, hs, coeffs, pol,
                                    DiffusionConfig(0.01, 400.0, 80.0, seed=5), 40)
    sq = []
    for eps in (0.5, 0.25):
        wb = average_reward_wideband(params, hs, spec, pol, WidebandConfig(eps, 400.0, 80.0, seed=6), 40)
        tol = 3 * np.hypot(wb.stderr, diff.stderr)
        assert abs(wb.estimate - diff.estimate) < tol, (eps, wb.estimate, diff.estimate, tol)
        sq.append(wb.mean_sq_norm)
    # time-average of |Z|^2 is stable across epsilon
    assert abs(sq[0] - sq[1]) < 0.1 * sq[1]
