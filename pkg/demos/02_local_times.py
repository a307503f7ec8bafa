"""Mollified local times against their Gaussian expectation."""
import math

from volterra_lab import KernelSpec, TimeGrid, expected_local_time, l2_moment_formula, sample_volterra
from volterra_lab.localtime import local_time_end

g = TimeGrid.uniform(256)
for spec in (KernelSpec.wiener(), KernelSpec.ou(1.0)):
    ens = sample_volterra(spec, g, 10_000, seed=4)
    for eps in (0.04, 0.01, 0.0025):
        l = local_time_end(ens.paths, g, eps)
        se = l.std(ddof=1) / math.sqrt(ens.n)
        print(f"{spec.label:10s} eps={eps:<7g} mean l(1,0) = {l.mean():.4f} +- {se:.4f}"
              f"   expected {expected_local_time(spec, 1.0, 0.0, eps):.4f}")

res = l2_moment_formula(KernelSpec.wiener(), TimeGrid.uniform(512))
print(f"wiener L2 moment in [{res.estimate:.5f}, {res.upper:.5f}], closed form {4 / (3 * math.pi):.5f}")
