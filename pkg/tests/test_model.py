import numpy as np
import pytest
from hypothesis import given, strategies as st

from lvharvest.markov_noise import JumpChainSpec, center_noise, diffusion_matrix
from lvharvest.model import (HarvestSpec, ModelParams, Persistence, averaged_coeffs, drift_G,
                             interior_equilibrium, noise_F, persistence_check, reward_rate)

P = ModelParams(a1=2.0, b1=1.0, c1=1.0, s2=-1.0, b2=1.0, c2=1.0, M=1.5)
HS = HarvestSpec("michaelis", 0.25, "linear")

pos = st.floats(0.0, 50.0, allow_nan=False)


def test_origin_is_fixed():
    np.testing.assert_array_equal(drift_G(P, HS, (0, 0), 1.0), [0, 0])


def test_equilibrium_zeroes_drift():
    # hand solve: 2 - x - y = 0 and -1 - y + x = 0 give x = 1.5, y = 0.5
    z = interior_equilibrium(P)
    np.testing.assert_allclose(z, [1.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(drift_G(P, HS, z, 0.0), 0.0, atol=1e-15)


def test_large_predator_drift_negative():
    ramp = HarvestSpec("ramp", 0.1, "linear")
    g = drift_G(P, ramp, (1.0, 1e3), P.M)
    assert g[1] < 0 and abs(g[1] + P.b2 * 1e6) < 0.01 * P.b2 * 1e6


def test_effort_outside_range_rejected():
    with pytest.raises(ValueError, match="outside"):
        drift_G(P, HS, (1, 1), 2.0)
    with pytest.raises(ValueError):
        drift_G(P, HS, (-1, 1), 0.0)


@given(x=pos, y=pos, u=st.floats(0.0, 1.5))
def test_axes_invariant(x, y, u):
    assert drift_G(P, HS, (0.0, y), u)[0] == 0
    assert drift_G(P, HS, (x, 0.0), u)[1] == 0


def test_noise_field():
    spec = JumpChainSpec.two_state(1.0, (0.4, -0.4), (0.1, -0.1))
    np.testing.assert_allclose(noise_F(spec, (2.0, 3.0), 1), [-0.8, -0.3])
    assert noise_F(spec, (0.0, 3.0), 0)[0] == 0
    zero = JumpChainSpec.two_state(1.0, (0, 0))
    np.testing.assert_array_equal(noise_F(zero, (2, 3), 0), [0, 0])


def test_reward_examples():
    assert reward_rate(HS, 1.0, 0.0) == 0.0
    assert reward_rate(HS, 0.0, 1.0) == 0.0
    # identity yield, h(1) = 1/(1+1), u = 2
    assert reward_rate(HarvestSpec("michaelis", 1.0, "linear"), 1.0, 2.0) == pytest.approx(1.0)
    sat = HarvestSpec("ramp", 1.0, "saturating", c=1.0)
    # y h(y) u = 1, Phi(1) = 1/(1+1)
    assert reward_rate(sat, 1.0, 1.0) == pytest.approx(0.5)


@given(y=pos, u1=st.floats(0, 1.5), u2=st.floats(0, 1.5))
def test_reward_monotone_in_effort(y, u1, u2):
    for hs in (HS, HarvestSpec("ramp", 0.5, "saturating", c=2.0)):
        lo, hi = sorted((u1, u2))
        assert reward_rate(hs, y, lo) <= reward_rate(hs, y, hi) + 1e-15


def test_linear_yield_is_linear_in_effort():
    y = np.linspace(0.1, 3, 7)
    r1, r2, r3 = (reward_rate(HS, y, u) for u in (0.3, 0.6, 0.9))
    np.testing.assert_allclose(r2 - r1, r3 - r2, rtol=1e-12)


@pytest.mark.parametrize("eff", ["ramp", "michaelis"])
@pytest.mark.parametrize("yld", ["linear", "saturating"])
def test_builtins_structural_check(eff, yld):
    assert HarvestSpec(eff, 0.3, yld, c=0.5).check()["ok"]


def test_unknown_builtin():
    with pytest.raises(ValueError, match="unknown effectiveness"):
        HarvestSpec("sigmoid")


def test_persistence_examples():
    r = persistence_check(P)
    assert r.status is Persistence.PERSISTENT and r.margin == pytest.approx(1.0)
    ext = persistence_check(ModelParams(1, 1, 1, -2, 1, 1, 1))
    assert ext.status is Persistence.EXTINCT and ext.margin == pytest.approx(-1.0)


def test_persistence_degenerate_warns():
    with pytest.warns(RuntimeWarning, match="threshold"):
        r = persistence_check(ModelParams(1, 1, 1, -1, 1, 1, 1))
    assert r.degenerate and not r.persistent


def test_params_validation_and_round_trip():
    with pytest.raises(ValueError):
        ModelParams(a1=-1, b1=1, c1=1, s2=0, b2=1, c2=1, M=1)
    assert ModelParams.from_dict(P.to_dict()) == P
    assert HarvestSpec.from_dict(HS.to_dict()) == HS


def test_averaged_rates():
    spec = center_noise(JumpChainSpec(states=(0, 1, 2), rates=np.array([1.0, 2.0, 0.5]),
                                      kernel=np.array([[0, .5, .5], [.2, 0, .8], [1, 0, 0]]),
                                      r1=np.array([.3, -.1, .2]), r2=np.array([0, .4, -.3])))
    c = averaged_coeffs(P, spec)
    A = diffusion_matrix(spec).A
    assert c.abar1 == pytest.approx(P.a1 + A[0, 0] / 2, abs=1e-15)
    assert c.abar2 == pytest.approx(P.s2 + A[1, 1] / 2, abs=1e-15)
    np.testing.assert_allclose(c.sigma @ c.sigma.T, c.A, atol=1e-10)


def test_no_interior_equilibrium():
    with pytest.raises(ValueError, match="no interior"):
        interior_equilibrium(ModelParams(1, 1, 1, -2, 1, 1, 1))
