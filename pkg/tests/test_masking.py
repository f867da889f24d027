import numpy as np
import pytest

from robustsplat.masking import (
    MaskConfig,
    bernoulli_mask,
    patch_mask,
    robust_filter,
    schedule_alpha,
    smooth_mask,
    trim_mask,
)
from robustsplat.residual_stats import ResidualHistogram


# ---------------------------------------------------------------- oracles

def brute_trim(residuals, rho):
    out = np.zeros_like(residuals)
    for i in range(residuals.shape[0]):
        for j in range(residuals.shape[1]):
            out[i, j] = 1.0 if residuals[i, j] <= rho else 0.0
    return out


def brute_smooth(mask, threshold=0.5):
    h, w = mask.shape
    out = mask.copy()
    for i in range(h):
        for j in range(w):
            taps = [mask[y, x]
                    for y in range(max(0, i - 1), min(h, i + 2))
                    for x in range(max(0, j - 1), min(w, j + 2))]
            if sum(taps) / len(taps) >= threshold:
                out[i, j] = 1.0
    return out


def brute_patch(mask, cfg):
    h, w = mask.shape
    out = mask.copy()
    for py in range(0, h, cfg.patch_size):
        for px in range(0, w, cfg.patch_size):
            y1 = min(py + cfg.patch_size, h)
            x1 = min(px + cfg.patch_size, w)
            r0 = min(max(0, py - (cfg.neighborhood - (y1 - py)) // 2), max(0, h - cfg.neighborhood))
            c0 = min(max(0, px - (cfg.neighborhood - (x1 - px)) // 2), max(0, w - cfg.neighborhood))
            r1 = min(r0 + cfg.neighborhood, h)
            c1 = min(c0 + cfg.neighborhood, w)
            vote = mask[r0:r1, c0:c1].mean() >= cfg.patch_threshold
            if cfg.patch_override:
                out[py:y1, px:x1] = 1.0 if vote else 0.0
            elif vote:
                out[py:y1, px:x1] = 1.0
    return out


def brute_pipeline(residuals, rho, cfg):
    return brute_patch(brute_smooth(brute_trim(residuals, rho), cfg.box_threshold), cfg)


def disk_scene(h=128, w=128, frac=0.2, seed=0):
    """Residual image: low noise background, one high-residual disk."""
    rng = np.random.default_rng(seed)
    res = rng.uniform(0.05, 0.15, (h, w))
    radius = np.sqrt(frac * h * w / np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    disk = (yy - h / 2) ** 2 + (xx - w / 2) ** 2 <= radius ** 2
    res[disk] = rng.uniform(0.8, 0.9, disk.sum())
    return res, disk


def iou(a, b):
    union = np.logical_or(a, b).sum()
    return np.logical_and(a, b).sum() / union if union else 1.0


# ---------------------------------------------------------------- trim

def test_trim_ties_are_inliers():
    res = np.full((4, 4), 0.2)
    assert trim_mask(res, 0.2).all()


def test_trim_infinite_rho():
    res = np.random.default_rng(0).uniform(0, 5, (6, 6))
    assert trim_mask(res, np.inf).all()


def test_trim_halves_against_histogram_median():
    res = np.full((10, 10), 0.1)
    res[:, 5:] = 0.9
    h = ResidualHistogram()
    h.update(res.ravel())
    rho = h.quantile(0.5)
    mask = trim_mask(res, rho)
    np.testing.assert_array_equal(mask, brute_trim(res, rho))
    assert mask[:, :5].all() and not mask[:, 5:].any()


def test_trim_matches_brute_force_on_random_input():
    rng = np.random.default_rng(1)
    res = rng.uniform(0, 1, (17, 23))
    np.testing.assert_array_equal(trim_mask(res, 0.4), brute_trim(res, 0.4))


def test_trim_rejects_bad_input():
    with pytest.raises(ValueError):
        trim_mask(np.array([[np.nan]]), 0.5)
    with pytest.raises(ValueError):
        trim_mask(np.zeros((2, 2)), -1.0)


# ---------------------------------------------------------------- smooth

def test_smooth_constants_fixed():
    assert smooth_mask(np.ones((5, 5))).all()
    assert not smooth_mask(np.zeros((5, 5))).any()


def test_smooth_fills_single_hole():
    m = np.ones((5, 5))
    m[2, 2] = 0.0
    assert smooth_mask(m).all()  # 8/9 >= 0.5


def test_smooth_matches_brute_force():
    rng = np.random.default_rng(2)
    for trial in range(5):
        m = (rng.uniform(size=(11, 14)) < 0.5).astype(np.float64)
        np.testing.assert_array_equal(smooth_mask(m), brute_smooth(m))


def test_smooth_monotone():
    rng = np.random.default_rng(3)
    m = (rng.uniform(size=(16, 16)) < 0.4).astype(np.float64)
    assert (smooth_mask(m) >= m).all()


# ---------------------------------------------------------------- patch

def test_patch_constants_fixed():
    cfg = MaskConfig()
    assert patch_mask(np.ones((32, 32)), cfg).all()
    assert not patch_mask(np.zeros((32, 32)), cfg).any()


def test_patch_quadrant_example():
    # 16x16 image, one 8x8 quadrant outlier: every patch window covers the
    # whole image, mean 192/256 = 0.75 >= 0.6, so the vote recovers everything.
    m = np.ones((16, 16))
    m[:8, :8] = 0.0
    out = patch_mask(m, MaskConfig())
    assert out.all()


def test_patch_matches_brute_force():
    rng = np.random.default_rng(4)
    for override in (False, True):
        cfg = MaskConfig(patch_override=override)
        for shape in ((32, 32), (40, 56), (30, 45), (12, 12)):
            m = (rng.uniform(size=shape) < 0.55).astype(np.float64)
            np.testing.assert_array_equal(patch_mask(m, cfg), brute_patch(m, cfg))


def test_patch_override_can_discard_inliers():
    m = np.zeros((32, 32))
    m[16, 16] = 1.0
    keep = patch_mask(m, MaskConfig())
    replace = patch_mask(m, MaskConfig(patch_override=True))
    assert keep[16, 16] == 1.0  # OR keeps the lone inlier
    assert not replace.any()    # full replacement drops it


# ---------------------------------------------------------------- pipeline

def test_pipeline_clean_image_all_inlier():
    res = np.full((32, 32), 0.05)
    h = ResidualHistogram()
    h.update(res.ravel())
    assert robust_filter(res, h, MaskConfig()).all()


def test_pipeline_disk_detection():
    res, disk = disk_scene()
    h = ResidualHistogram()
    h.update(res.ravel())
    cfg = MaskConfig()
    mask = robust_filter(res, h, cfg)
    np.testing.assert_array_equal(mask, brute_pipeline(res, h.quantile(cfg.tau), cfg))
    assert iou(mask == 0, disk) >= 0.95


def test_pipeline_tau_monotone_superset():
    res, disk = disk_scene()
    h = ResidualHistogram()
    h.update(res.ravel())
    strict = robust_filter(res, h, MaskConfig(tau=0.9))
    assert not strict[disk].any()  # outlier set grew to a superset of the disk
    lenient = robust_filter(res, h, MaskConfig(tau=0.5))
    assert (strict <= lenient).all()


def test_pipeline_stage_toggles():
    res, _ = disk_scene()
    h = ResidualHistogram()
    h.update(res.ravel())
    rho = h.quantile(0.5)
    trim_only = robust_filter(res, h, MaskConfig(use_smooth=False, use_patch=False))
    np.testing.assert_array_equal(trim_only, trim_mask(res, rho))
    no_patch = robust_filter(res, h, MaskConfig(use_patch=False))
    np.testing.assert_array_equal(no_patch, smooth_mask(trim_mask(res, rho)))


def test_pipeline_only_grows_inlier_set():
    rng = np.random.default_rng(5)
    res = rng.exponential(0.2, (48, 48))
    h = ResidualHistogram()
    h.update(res.ravel())
    rho = h.quantile(0.5)
    m1 = trim_mask(res, rho)
    m2 = smooth_mask(m1)
    m3 = patch_mask(m2, MaskConfig())
    assert (m2 >= m1).all() and (m3 >= m2).all()


def test_trim_inlier_fraction_lower_bound():
    rng = np.random.default_rng(6)
    res = rng.uniform(0, 1.5, (160, 160))
    h = ResidualHistogram()
    h.update(res.ravel())
    for tau in (0.3, 0.5, 0.7):
        frac = trim_mask(res, h.quantile(tau)).mean()
        assert frac >= (1 - tau) - 0.01


# ---------------------------------------------------------------- scheduler

def test_schedule_alpha_values():
    cfg = MaskConfig()
    assert schedule_alpha(0, cfg) == pytest.approx(1.0)
    assert schedule_alpha(2, cfg) == pytest.approx(np.exp(-6e-4))


def test_schedule_alpha_non_increasing():
    cfg = MaskConfig()
    vals = [schedule_alpha(t, cfg) for t in range(10_000)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert all(0.0 < v <= 1.0 for v in vals)
    assert vals[-1] < 0.15  # decays toward zero


# ---------------------------------------------------------------- sampling

def test_bernoulli_alpha_one_and_zero():
    rng = np.random.default_rng(7)
    star = (rng.uniform(size=(64, 64)) < 0.5).astype(np.float64)
    assert bernoulli_mask(star, 1.0, seed=1).all()
    np.testing.assert_array_equal(bernoulli_mask(star, 0.0, seed=1), star)


def test_bernoulli_concentration():
    star = np.zeros((1000, 1000))
    frac = bernoulli_mask(star, 0.5, seed=3).mean()
    assert abs(frac - 0.5) < 0.002


def test_bernoulli_pixelwise_expectation():
    star = np.full((1000, 1000), 0.25)
    alpha = 0.5
    p = alpha + (1 - alpha) * 0.25
    frac = bernoulli_mask(star, alpha, seed=9).mean()
    assert abs(frac - p) < 3 * np.sqrt(p * (1 - p) / star.size)


def test_bernoulli_deterministic_in_key():
    star = np.full((32, 32), 0.5)
    a = bernoulli_mask(star, 0.2, seed=11, step=4)
    b = bernoulli_mask(star, 0.2, seed=11, step=4)
    c = bernoulli_mask(star, 0.2, seed=11, step=5)
    d = bernoulli_mask(star, 0.2, seed=12, step=4)
    np.testing.assert_array_equal(a, b)
    assert (a != c).any()
    assert (a != d).any()


def test_mask_config_validation():
    with pytest.raises(ValueError):
        MaskConfig(tau=0.0)
    with pytest.raises(ValueError):
        MaskConfig(neighborhood=4, patch_size=8)
