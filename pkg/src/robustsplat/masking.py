"""Residual-driven inlier masking.

Pipeline: threshold residuals at a streaming quantile (trim), recover isolated
inliers with a 3x3 box vote (smooth), then let 8x8 patches vote over 16x16
neighborhoods (patch). Later stages only ever grow the inlier set. A staircase
warm-up schedule and a counter-based Bernoulli sampler turn the binary mask
into the stochastic per-step mask used during fitting.
"""

from dataclasses import dataclass

import numpy as np

from .residual_stats import ResidualHistogram


@dataclass(frozen=True)
class MaskConfig:
    tau: float = 0.5              # trim percentile: fraction of mass above rho
    box_threshold: float = 0.5    # 3x3 vote threshold
    patch_size: int = 8
    neighborhood: int = 16        # voting window side, >= patch_size
    patch_threshold: float = 0.6  # window inlier fraction for a patch vote
    beta1: float = 3e-4           # warm-up decay rate
    beta2: float = 1.5            # warm-up staircase step length
    patch_override: bool = False  # patch vote replaces the mask instead of OR
    use_smooth: bool = True
    use_patch: bool = True

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must be in (0, 1)")
        if self.patch_size < 1 or self.neighborhood < self.patch_size:
            raise ValueError("need neighborhood >= patch_size >= 1")
        if self.beta2 <= 0:
            raise ValueError("beta2 must be positive")


def _check_image(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be a 2-d array")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def trim_mask(residuals, rho: float) -> np.ndarray:
    """Binary inlier mask: 1 where residual <= rho. Ties count as inliers."""
    r = _check_image(residuals, "residuals")
    if not rho >= 0.0:  # +inf allowed: vacuous trim
        raise ValueError("rho must be >= 0")
    return (r <= rho).astype(np.float64)


def _box3_mean(mask: np.ndarray) -> np.ndarray:
    """3x3 box average with border renormalization over in-bounds taps."""
    padded = np.pad(mask, 1)
    ones = np.pad(np.ones_like(mask), 1)
    sums = np.zeros_like(mask)
    counts = np.zeros_like(mask)
    h, w = mask.shape
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            sums += padded[dy:dy + h, dx:dx + w]
            counts += ones[dy:dy + h, dx:dx + w]
    return sums / counts


def smooth_mask(mask, box_threshold: float = 0.5) -> np.ndarray:
    """Recover pixels whose 3x3 neighborhood is mostly inlier.

    out = mask OR (3x3 renormalized box mean >= box_threshold). Monotone: a
    pixel already marked inlier stays inlier.
    """
    m = _check_image(mask, "mask")
    vote = _box3_mean(m) >= box_threshold
    return np.maximum(m, vote.astype(np.float64))


def _integral(a: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
    np.cumsum(np.cumsum(a, axis=0), axis=1, out=out[1:, 1:])
    return out


def patch_mask(mask, cfg: MaskConfig) -> np.ndarray:
    """Patch-level vote over a larger surrounding window.

    The image is tiled by patch_size x patch_size patches (edge patches
    truncated). Each patch ranks the mean of the mask over a neighborhood x
    neighborhood window positioned symmetrically around the patch; windows
    that would cross the border slide inward so they keep full size (shrunk
    only when the image itself is smaller than the window). A patch whose
    window mean >= patch_threshold is declared inlier wholesale. By default
    the vote is OR-ed onto the incoming mask; with cfg.patch_override the
    vote replaces it.
    """
    m = _check_image(mask, "mask")
    h, w = m.shape
    ps, nb = cfg.patch_size, cfg.neighborhood
    integral = _integral(m)
    out = m.copy()

    def window(start, extent, limit):
        lo = start - (nb - extent) // 2
        lo = max(0, min(lo, limit - nb))
        return (lo, min(lo + nb, limit)) if limit >= nb else (0, limit)

    for py in range(0, h, ps):
        y1 = min(py + ps, h)
        r0, r1 = window(py, y1 - py, h)
        for px in range(0, w, ps):
            x1 = min(px + ps, w)
            c0, c1 = window(px, x1 - px, w)
            total = (integral[r1, c1] - integral[r0, c1]
                     - integral[r1, c0] + integral[r0, c0])
            vote = total / ((r1 - r0) * (c1 - c0)) >= cfg.patch_threshold
            if cfg.patch_override:
                out[py:y1, px:x1] = 1.0 if vote else 0.0
            elif vote:
                out[py:y1, px:x1] = 1.0
    return out


def robust_filter(residuals, hist: ResidualHistogram, cfg: MaskConfig) -> np.ndarray:
    """Full trim -> smooth -> patch pipeline driven by the residual histogram."""
    rho = hist.quantile(cfg.tau)
    mask = trim_mask(residuals, rho)
    if cfg.use_smooth:
        mask = smooth_mask(mask, cfg.box_threshold)
    if cfg.use_patch:
        mask = patch_mask(mask, cfg)
    return mask


def schedule_alpha(t: int, cfg: MaskConfig) -> float:
    """Staircase warm-up weight: alpha = exp(-beta1 * floor((t+1)/beta2))."""
    if t < 0:
        raise ValueError("step index must be >= 0")
    return float(np.exp(-cfg.beta1 * np.floor((t + 1) / cfg.beta2)))


def bernoulli_mask(mask_star, alpha: float, seed: int, step: int = 0) -> np.ndarray:
    """Sample a binary mask, pixel r independently 1 w.p. alpha + (1-alpha)*mask_star(r).

    Uses a counter-based generator keyed by (seed, step); the pixel's position
    in row-major order selects its slot in the stream, so the draw for a given
    (seed, step, pixel) never depends on image traversal order.
    """
    m = _check_image(mask_star, "mask_star")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    if np.any(m < 0) or np.any(m > 1):
        raise ValueError("mask_star values must lie in [0, 1]")
    p = alpha + (1.0 - alpha) * m
    gen = np.random.Generator(np.random.Philox(key=[int(seed), int(step)]))
    u = gen.random(m.shape)
    return (u < p).astype(np.float64)
