"""Robust loss kernels and the per-residual weights they induce.

A robust kernel downweights large residuals so outliers stop dominating the
fit. This prints each kernel's reweighting curve: L2 treats everything
equally, L1 divides by the residual, Charbonnier is a smooth L1, and
Geman-McClure suppresses far outliers almost completely.
"""

import numpy as np

from robustsplat.kernels import RobustKernel, irls_weight

KINDS = ("l2", "l1", "charbonnier", "geman_mcclure")
EPS = np.array([0.001, 0.01, 0.05, 0.1, 0.3, 1.0, 3.0])

kernels = {kind: RobustKernel(kind, scale_c=0.1) for kind in KINDS}

header = "residual " + " ".join(f"{k:>13}" for k in KINDS)
print(header)
print("-" * len(header))
for eps in EPS:
    row = [f"{eps:>8.3f}"]
    for kind in KINDS:
        w = irls_weight(kernels[kind], np.array([eps]))[0]
        row.append(f"{w:>13.4g}")
    print(" ".join(row))

print()
print("weight ratio huge/small residual (3.0 vs 0.01):")
for kind in KINDS:
    w_small = irls_weight(kernels[kind], np.array([0.01]))[0]
    w_big = irls_weight(kernels[kind], np.array([3.0]))[0]
    print(f"  {kind:<14} {w_big / w_small:.2e}")
