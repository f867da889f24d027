"""Streaming residual quantiles vs an exact sort-based reference.

The training loop can't afford to sort every residual it has ever seen, so it
keeps a discounted fixed-width histogram instead. This demo feeds both
estimators a drifting residual stream (residuals shrink as a fit would
converge) and prints how far the bucketed estimate strays from the exact one.
"""

import numpy as np

from robustsplat.residual_stats import ResidualHistogram, exact_quantile

rng = np.random.default_rng(0)
hist = ResidualHistogram(bucket_width=1e-3, max_residual=2.0, discount=0.99)

print(f"{'batch':>5} {'scale':>6} {'tau':>4} {'exact':>8} {'hist':>8} {'diff':>9}")
for batch in range(12):
    scale = 0.5 * 0.8**batch  # residuals decay as training converges
    residuals = rng.gamma(shape=2.0, scale=scale, size=4096)
    hist.update(residuals)
    for tau in (0.3, 0.5, 0.9):
        exact = exact_quantile(residuals, tau)
        approx = hist.quantile(tau)
        # the histogram remembers earlier (larger) batches with weight 0.99^age,
        # so its estimate lags the latest batch slightly by design
        print(f"{batch:>5} {scale:>6.3f} {tau:>4.1f} {exact:>8.4f} "
              f"{approx:>8.4f} {approx - exact:>9.4f}")

print("\nsingle batch, no history: estimates land within one bucket (1e-3)")
fresh = ResidualHistogram(discount=1.0)
values = rng.uniform(0, 1.5, 100_000)
fresh.update(values)
for tau in (0.1, 0.5, 0.9):
    exact = exact_quantile(values, tau)
    print(f"  tau={tau:.1f}: exact {exact:.5f}  hist {fresh.quantile(tau):.5f}")
