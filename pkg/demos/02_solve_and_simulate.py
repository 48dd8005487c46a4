"""Solve for a harvesting policy and test it on the real system.

The ergodic HJB equation is solved by a Markov chain approximation on a log
grid.  The regularized policy is then simulated on the averaged diffusion and
on the wideband system for a few noise scales, next to constant efforts.
Path counts are kept small so this finishes in seconds.
"""

import numpy as np

from lvharvest import hjb
from lvharvest.diffusion import average_reward_diffusion
from lvharvest.harness import builtin_config
from lvharvest.markov_noise import center_noise
from lvharvest.model import averaged_coeffs
from lvharvest.policy import PolicyTable
from lvharvest.wideband import average_reward_wideband

cfg = builtin_config("default")
p, hs = cfg.params, cfg.harvest
spec = center_noise(cfg.chain)
coeffs = averaged_coeffs(p, spec)

mdp = hjb.build_mdp(p, hs, coeffs, cfg.grid)
vf, raw = hjb.solve_average_reward(mdp, cfg.tol)
print(f"optimal long-run yield rho = {vf.rho:.5f} after {vf.iterations} sweeps")
print(f"HJB residual {hjb.hjb_residual(vf, mdp):.2e}")
policy = hjb.lipschitz_regularize(raw, cfg.radius)

# where does the policy harvest?  print a coarse slice through the prey axis
E = policy.efforts
ix = np.searchsorted(cfg.grid.xs, 0.8)
print("\neffort along x = 0.8:")
for j in range(0, cfg.grid.ny, 12):
    print(f"  y = {cfg.grid.ys[j]:6.3f}   u = {E[ix, j]:.3f}")

n = 40
dcfg = cfg.diffusion_config(1, t_end=1000.0, burn_in=200.0)
est = average_reward_diffusion(p, hs, coeffs, policy, dcfg, n)
print(f"\ndiffusion, solver policy : {est.estimate:.5f} +- {est.stderr:.5f}")

for u in (0.0, p.M / 2, p.M):
    c = average_reward_diffusion(p, hs, coeffs, PolicyTable.constant(cfg.grid, u, p.M), dcfg, n)
    print(f"diffusion, constant u={u:<4g}: {c.estimate:.5f} +- {c.stderr:.5f}")

# the same feedback applied to the original system; the gap shrinks with epsilon
for eps in cfg.epsilon_ladder:
    w = average_reward_wideband(p, hs, spec, policy, cfg.wideband_config(eps, 2, t_end=1000.0, burn_in=200.0), n)
    print(f"wideband eps={eps:<4g}: {w.estimate:.5f} +- {w.stderr:.5f}   gap {abs(w.estimate - est.estimate):.5f}")
