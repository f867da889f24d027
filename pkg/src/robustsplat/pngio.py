"""8-bit PNG helpers for images, masks, and cluster maps."""

import numpy as np
from PIL import Image


def save_rgb(path, img) -> None:
    """Write a float image in [0,1], shape (H, W, 3)."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) image")
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


def load_rgb(path) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def save_gray(path, img) -> None:
    """Write a float image in [0,1], shape (H, W); masks use 0=outlier 255=inlier."""
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValueError("expected an (H, W) image")
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)


def load_gray(path) -> np.ndarray:
    img = Image.open(path).convert("L")
    return np.asarray(img, dtype=np.float64) / 255.0


def save_clusters(path, cluster_ids) -> None:
    """Indexed-color PNG of a cluster id map, palette fixed for inspection."""
    ids = np.asarray(cluster_ids)
    if ids.ndim != 2:
        raise ValueError("expected an (H, W) id map")
    data = (ids % 256).astype(np.uint8)
    img = Image.fromarray(data, mode="P")
    rng = np.random.default_rng(0)
    palette = rng.integers(30, 255, size=(256, 3), dtype=np.uint8)
    img.putpalette(palette.ravel().tolist())
    img.save(path)
