"""Discounted streaming histogram of residual magnitudes.

When every training batch is a whole image, the outlier share of a single
batch is skewed, so the trim threshold cannot come from per-batch sorting.
Instead we maintain a bucketed population of residual magnitudes across
batches, decayed by a discount factor each update, and read generalized
medians / quantiles off the bucket edges.
"""

from __future__ import annotations

import math

import numpy as np


class ResidualHistogram:
    """Fixed-width bucket populations over [0, max_residual), plus overflow.

    Bucket b covers [b*width, (b+1)*width). Populations are real-valued
    because of the per-update discount. Single-writer: callers serialize
    updates and queries externally.
    """

    def __init__(self, bucket_width: float = 1e-3, max_residual: float = 2.0,
                 discount: float = 0.99):
        if bucket_width <= 0:
            raise ValueError("bucket_width must be > 0")
        if not 0.0 < discount <= 1.0:
            raise ValueError("discount must be in (0, 1]")
        if max_residual <= bucket_width:
            raise ValueError("max_residual must exceed bucket_width")
        self.bucket_width = float(bucket_width)
        self.max_residual = float(max_residual)
        self.discount = float(discount)
        self.n_regular = int(math.ceil(max_residual / bucket_width))
        # Last slot is the overflow bucket for residuals >= max_residual.
        self.buckets = np.zeros(self.n_regular + 1, dtype=np.float64)

    @property
    def overflow_bucket(self) -> float:
        return float(self.buckets[-1])

    @property
    def total(self) -> float:
        return float(self.buckets.sum())

    def update(self, residuals) -> None:
        """Discount every bucket, then add the new residual counts.

        Residuals must be finite and non-negative; values at or above
        max_residual land in the overflow bucket.
        """
        r = np.asarray(residuals, dtype=np.float64).ravel()
        if not np.all(np.isfinite(r)):
            raise ValueError("residuals must be finite")
        if r.size and r.min() < 0:
            raise ValueError("residuals must be non-negative")
        idx = np.minimum((r / self.bucket_width).astype(np.int64), self.n_regular)
        self.buckets *= self.discount
        self.buckets += np.bincount(idx, minlength=self.n_regular + 1)

    def quantile(self, tau: float) -> float:
        """Trim threshold rho with approximately a fraction tau of mass above it.

        Walks buckets top-down and returns the upper edge of the first bucket
        at which the cumulative population strictly exceeds tau * total, i.e.
        the (1 - tau)-quantile from below quantized to bucket edges. Mass that
        sits in the overflow bucket resolves to max_residual + bucket_width.
        """
        if not 0.0 < tau < 1.0:
            raise ValueError("tau must be in (0, 1)")
        total = self.buckets.sum()
        if total <= 0:
            raise ValueError("histogram is empty")
        # cum_from_top[b] = population of buckets >= b
        cum_from_top = np.cumsum(self.buckets[::-1])[::-1]
        above = np.nonzero(cum_from_top > tau * total)[0]
        b = int(above[-1])  # largest bucket index still holding > tau of mass
        return (b + 1) * self.bucket_width

    def snapshot(self) -> "ResidualHistogram":
        """Read-only copy safe to hand to other threads."""
        out = ResidualHistogram(self.bucket_width, self.max_residual, self.discount)
        out.buckets = self.buckets.copy()
        return out


def hist_update(hist: ResidualHistogram, residuals) -> ResidualHistogram:
    """Functional alias for ResidualHistogram.update; mutates and returns hist."""
    hist.update(residuals)
    return hist


def hist_quantile(hist: ResidualHistogram, tau: float) -> float:
    return hist.quantile(tau)


def exact_quantile(values, tau: float) -> float:
    """Sort-based reference: element at index floor((1 - tau) * (N - 1)).

    This is the oracle the histogram is tested against; it never goes through
    the bucketed path.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("values must be non-empty")
    v = np.sort(v)
    idx = int(math.floor((1.0 - tau) * (v.size - 1)))
    return float(v[idx])
