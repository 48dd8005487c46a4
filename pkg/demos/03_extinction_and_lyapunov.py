"""Two sides of the persistence threshold.

With a positive margin a power-law Lyapunov function certifies that the
population stays away from the axes and from infinity.  Flip the sign of the
margin and the predator dies out whatever the harvest.
"""

import tempfile

from lvharvest.harness import builtin_config, run_extinction_study, run_lyapunov_battery
from lvharvest.lyapunov import choose_exponents
from lvharvest.markov_noise import center_noise
from lvharvest.model import averaged_coeffs, persistence_check

good, bad = builtin_config("default"), builtin_config("extinct")
for cfg in (good, bad):
    pc = persistence_check(cfg.params)
    print(f"{cfg.name:8s} margin {pc.margin:+.3f}")

coeffs = averaged_coeffs(good.params, center_noise(good.chain))
lp = choose_exponents(good.params, good.harvest, coeffs)
print(f"\nexponents p0={lp.p0:.4g} p1={lp.p1:.4g} p2={lp.p2:.4g}  lambda={lp.lam:.4g}  box radius H={lp.H:.3g}")

with tempfile.TemporaryDirectory() as tmp:
    rep = run_lyapunov_battery(good, tmp, negative=bad)
    for c in rep.checks:
        print(f"  {'PASS' if c.passed else 'FAIL'} {c.name:34s} value {c.value:.3g}  threshold {c.threshold:.3g}")

    print("\nextinct configuration, harvest off and at full effort:")
    ext = run_extinction_study(bad, tmp)
    for c in ext.checks:
        if not c.name.startswith("reward_checkpoints"):
            print(f"  {'PASS' if c.passed else 'FAIL'} {c.name:40s} {c.value:.2e}")
