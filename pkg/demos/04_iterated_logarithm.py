"""Small-time iterated logarithm on the geometric grid t = 0.5^n."""
import numpy as np

from volterra_lab import KernelSpec, lil_ratios
from volterra_lab.asymptotics import LilConfig

cfg = LilConfig(q=0.5, n_min=3, n_max=30, n_paths=2000, seed=101, eps_levels=(0.0, 0.5))
for spec in (KernelSpec.wiener(), KernelSpec.ou(1.0), KernelSpec.ou(4.0)):
    res = lil_ratios(spec, cfg)
    q = res.quantiles()
    print(f"{spec.label:10s} median max X/h = {res.median:.3f}   5%..95%: {q['0.05']:.3f}..{q['0.95']:.3f}"
          f"   mean exceedance at eps=0.5: {np.mean(res.exceedance[0.5]):.4f}")
