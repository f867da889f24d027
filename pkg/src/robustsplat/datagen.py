"""Synthetic multi-view scenes with controllable distractor contamination.

A scene is one smooth colorful base image photographed `num_views` times.
Each view gets per-channel brightness gains (capture jitter) and a set of
opaque disk / rectangle distractors pasted on top. Distractor layouts are
frozen for `persistence` consecutive views, then redrawn, so outliers are
temporally coherent the way real transient objects are. Every view carries
its clean counterpart (same gains, no distractors), the ground-truth
distractor mask, and a synthetic per-pixel feature map standing in for a
frozen 2D foundation backbone.

Everything is a pure function of (seed, config).
"""

import os
import re
from dataclasses import dataclass

import numpy as np

from . import pngio, tensorio
from .config import ConfigError

# stream tags for per-purpose child RNGs
_BASE, _GAINS, _LAYOUT, _FEATURES, _PROJECTION = 0, 1, 2, 3, 4

PRESET_OCCUPANCY = {
    "easy": 0.10,
    "medium": 0.25,
    "hard": 0.44,
    "clean": 0.0,
    "camouflage": 0.25,
}


@dataclass(frozen=True)
class GenConfig:
    width: int = 96
    height: int = 96
    num_views: int = 60
    occupancy: float = 0.25
    persistence: int = 10
    jitter: float = 0.05
    camouflage: bool = False
    feature_dim: int = 8
    feature_noise_sigma: float = 0.1
    semantic_fidelity: float = 0.95

    def __post_init__(self):
        if not (0.0 <= self.occupancy <= 0.6):
            raise ValueError(f"occupancy must be in [0, 0.6], got {self.occupancy}")
        if self.persistence < 1:
            raise ValueError(f"persistence must be >= 1, got {self.persistence}")
        if self.num_views < 1:
            raise ValueError("num_views must be >= 1")
        if self.width < 8 or self.height < 8:
            raise ValueError("images must be at least 8x8")
        if self.width % 4 or self.height % 4:
            # features go through a 4x pyramid; fractional tiles are not worth it
            raise ValueError("width and height must be multiples of 4")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if not (0.0 <= self.semantic_fidelity <= 1.0):
            raise ValueError("semantic_fidelity must be in [0, 1]")
        if self.feature_noise_sigma < 0:
            raise ValueError("feature_noise_sigma must be >= 0")
        if not (0.0 <= self.jitter <= 0.5):
            raise ValueError(f"jitter must be in [0, 0.5], got {self.jitter}")


def config_from_dict(cfg: dict) -> GenConfig:
    """Resolve scene.* keys, letting the preset fill occupancy/camouflage."""
    preset = cfg["scene.preset"]
    if preset not in PRESET_OCCUPANCY:
        raise ConfigError(f"unknown scene.preset {preset!r}")
    occupancy = cfg["scene.occupancy"]
    if occupancy < 0:
        occupancy = PRESET_OCCUPANCY[preset]
    return GenConfig(
        width=cfg["scene.width"],
        height=cfg["scene.height"],
        num_views=cfg["scene.views"],
        occupancy=occupancy,
        persistence=cfg["scene.persistence"],
        jitter=cfg["scene.jitter"],
        camouflage=bool(cfg["scene.camouflage"]) or preset == "camouflage",
        feature_dim=cfg["scene.feature_dim"],
        feature_noise_sigma=cfg["scene.feature_noise"],
        semantic_fidelity=cfg["scene.fidelity"],
    )


@dataclass
class ViewRecord:
    image: np.ndarray        # contaminated capture, (H, W, 3) in [0, 1]
    clean: np.ndarray        # same capture without distractors
    distractor_mask: np.ndarray  # (H, W), 1.0 on distractor pixels
    features: np.ndarray     # (H, W, feature_dim)
    view_id: int


@dataclass
class SceneDataset:
    views: list
    cfg: GenConfig
    seed: int
    base: np.ndarray = None  # only populated by generate_scene, not by load

    def __len__(self):
        return len(self.views)


def _rng(seed: int, tag: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag, index]))


def _base_image(seed: int, cfg: GenConfig, blobs: int = 40) -> np.ndarray:
    """Sum of soft random color blobs squashed into (0.05, 0.95)."""
    rng = _rng(seed, _BASE, 0)
    h, w = cfg.height, cfg.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    field_sum = np.zeros((h, w, 3))
    scale = min(h, w)
    for _ in range(blobs):
        cy = rng.uniform(0, h)
        cx = rng.uniform(0, w)
        radius = rng.uniform(0.08, 0.35) * scale
        amp = rng.uniform(-0.8, 0.8, size=3)
        profile = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * radius**2))
        field_sum += profile[:, :, None] * amp
    return 0.5 + 0.45 * np.tanh(field_sum)


def _sample_distractor(rng, cfg: GenConfig, base: np.ndarray) -> dict:
    """One disk or rectangle with both color sources drawn, so the RNG
    stream is identical with camouflage on and off and poses match."""
    h, w = cfg.height, cfg.width
    scale = min(h, w)
    kind = "disk" if rng.uniform() < 0.5 else "rect"
    if kind == "disk":
        shape = {
            "cy": rng.uniform(0, h),
            "cx": rng.uniform(0, w),
            "r": rng.uniform(0.05, 0.13) * scale,
        }
    else:
        rh = max(2, int(round(rng.uniform(0.08, 0.20) * scale)))
        rw = max(2, int(round(rng.uniform(0.08, 0.20) * scale)))
        y0 = int(rng.integers(0, max(1, h - rh + 1)))
        x0 = int(rng.integers(0, max(1, w - rw + 1)))
        shape = {"y0": y0, "y1": y0 + rh, "x0": x0, "x1": x0 + rw}
    plain = rng.uniform(0.0, 1.0, size=(2, 3))
    angles = rng.uniform(0.0, 2.0 * np.pi, size=2)
    if cfg.camouflage:
        # steal colors from just outside the support; the base is smooth, so
        # the distractor lands close to what it covers without matching it
        if kind == "disk":
            cy, cx, reach = shape["cy"], shape["cx"], 1.5 * shape["r"]
        else:
            cy = 0.5 * (shape["y0"] + shape["y1"])
            cx = 0.5 * (shape["x0"] + shape["x1"])
            reach = 0.75 * float(np.hypot(shape["y1"] - shape["y0"], shape["x1"] - shape["x0"]))
        py = np.clip(np.round(cy + reach * np.sin(angles)), 0, h - 1).astype(int)
        px = np.clip(np.round(cx + reach * np.cos(angles)), 0, w - 1).astype(int)
        colors = base[py, px]
    else:
        colors = plain
    return {"kind": kind, **shape, "c0": colors[0], "c1": colors[1]}


def _support(d: dict, h: int, w: int) -> np.ndarray:
    if d["kind"] == "disk":
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        return (yy - d["cy"]) ** 2 + (xx - d["cx"]) ** 2 <= d["r"] ** 2
    sup = np.zeros((h, w), dtype=bool)
    sup[d["y0"] : d["y1"], d["x0"] : d["x1"]] = True
    return sup


def _paint(img: np.ndarray, d: dict, support: np.ndarray) -> None:
    h, w = img.shape[:2]
    if d["kind"] == "disk":
        img[support] = d["c0"]
        return
    # rectangles get a horizontal two-color gradient
    span = max(d["x1"] - d["x0"] - 1, 1)
    t = (np.arange(d["x0"], d["x1"]) - d["x0"]) / span
    fill = d["c0"][None, :] + t[:, None] * (d["c1"] - d["c0"])[None, :]
    img[d["y0"] : d["y1"], d["x0"] : d["x1"]] = fill[None, :, :]


def _run_layout(seed: int, run: int, cfg: GenConfig, base: np.ndarray):
    """Distractors for one persistence run, added until coverage >= occupancy."""
    rng = _rng(seed, _LAYOUT, run)
    h, w = cfg.height, cfg.width
    coverage = np.zeros((h, w), dtype=bool)
    layout = []
    guard = 0
    while coverage.mean() < cfg.occupancy:
        d = _sample_distractor(rng, cfg, base)
        sup = _support(d, h, w)
        layout.append((d, sup))
        coverage |= sup
        guard += 1
        if guard > 10_000:
            raise RuntimeError("distractor sampling failed to reach occupancy")
    return layout, coverage


def positional_encoding(height: int, width: int, degree: int) -> np.ndarray:
    """(H, W, 4*degree) channels sin/cos(2^k pi u), sin/cos(2^k pi v)."""
    if degree < 1:
        raise ValueError("degree must be >= 1")
    v = np.arange(height, dtype=np.float64) / max(height - 1, 1)
    u = np.arange(width, dtype=np.float64) / max(width - 1, 1)
    uu = np.broadcast_to(u[None, :], (height, width))
    vv = np.broadcast_to(v[:, None], (height, width))
    chans = []
    for k in range(degree):
        f = (2.0**k) * np.pi
        chans += [np.sin(f * uu), np.cos(f * uu), np.sin(f * vv), np.cos(f * vv)]
    return np.stack(chans, axis=-1)


def _downsample4(x: np.ndarray) -> np.ndarray:
    h, w, c = x.shape
    return x.reshape(h // 4, 4, w // 4, 4, c).mean(axis=(1, 3))


def _upsample4_bilinear(x: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize with pixel-center alignment (source is height/4 x width/4)."""
    sh, sw = x.shape[:2]

    def axis_coords(n_dst, n_src):
        src = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
        src = np.clip(src, 0.0, n_src - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_src - 1)
        return lo, hi, (src - lo)

    ylo, yhi, wy = axis_coords(height, sh)
    xlo, xhi, wx = axis_coords(width, sw)
    top = x[ylo][:, xlo] * (1 - wx)[None, :, None] + x[ylo][:, xhi] * wx[None, :, None]
    bot = x[yhi][:, xlo] * (1 - wx)[None, :, None] + x[yhi][:, xhi] * wx[None, :, None]
    return top * (1 - wy)[:, None, None] + bot * wy[:, None, None]


def synth_features(view: np.ndarray, gt_mask: np.ndarray, cfg: GenConfig, seed: int,
                   view_id: int = 0) -> np.ndarray:
    """Noisy low-resolution features: a semantic distractor channel plus fixed
    random projections of the view's RGB, blurred through a 4x pyramid."""
    h, w = gt_mask.shape
    if view.shape[:2] != (h, w):
        raise ValueError("view and mask dims do not match")
    rng = _rng(seed, _FEATURES, view_id)
    semantic = (gt_mask > 0.5).astype(np.float64)
    flips = rng.uniform(size=(h, w)) > cfg.semantic_fidelity
    semantic = np.where(flips, 1.0 - semantic, semantic)
    feats = np.empty((h, w, cfg.feature_dim))
    feats[:, :, 0] = semantic
    if cfg.feature_dim > 1:
        proj_rng = _rng(seed, _PROJECTION, 0)
        proj = proj_rng.normal(0.0, 1.0 / np.sqrt(3.0), size=(3, cfg.feature_dim - 1))
        feats[:, :, 1:] = view @ proj
    feats = feats + rng.normal(0.0, cfg.feature_noise_sigma, size=feats.shape)
    return _upsample4_bilinear(_downsample4(feats), h, w)


def generate_scene(seed: int, cfg: GenConfig) -> SceneDataset:
    base = _base_image(seed, cfg)
    h, w = cfg.height, cfg.width
    layouts = {}
    views = []
    for v in range(cfg.num_views):
        run = v // cfg.persistence
        if run not in layouts:
            layouts[run] = _run_layout(seed, run, cfg, base)
        layout, coverage = layouts[run]
        gains = 1.0 + cfg.jitter * _rng(seed, _GAINS, v).uniform(-1.0, 1.0, size=3)
        clean = np.clip(base * gains[None, None, :], 0.0, 1.0)
        image = clean.copy()
        for d, sup in layout:
            _paint(image, d, sup)
        mask = coverage.astype(np.float64)
        feats = synth_features(image, mask, cfg, seed, view_id=v)
        views.append(ViewRecord(image=image, clean=clean, distractor_mask=mask,
                                features=feats, view_id=v))
    return SceneDataset(views=views, cfg=cfg, seed=seed, base=base)


# --- directory round trip ---------------------------------------------------

_SCENE_KEYS = [
    ("width", int), ("height", int), ("num_views", int), ("occupancy", float),
    ("persistence", int), ("jitter", float), ("camouflage", bool),
    ("feature_dim", int), ("feature_noise_sigma", float), ("semantic_fidelity", float),
]


def save_dataset(ds: SceneDataset, outdir) -> None:
    os.makedirs(outdir, exist_ok=True)
    for rec in ds.views:
        tag = f"{rec.view_id:04d}"
        pngio.save_rgb(os.path.join(outdir, f"view_{tag}.png"), rec.image)
        pngio.save_rgb(os.path.join(outdir, f"clean_{tag}.png"), rec.clean)
        pngio.save_gray(os.path.join(outdir, f"mask_{tag}.png"), rec.distractor_mask)
        tensorio.write_tensor(os.path.join(outdir, f"feat_{tag}.bin"),
                              rec.features.astype(np.float32))
    lines = []
    for name, kind in _SCENE_KEYS:
        value = getattr(ds.cfg, name)
        if kind is bool:
            value = "true" if value else "false"
        elif kind is float:
            value = repr(float(value))
        lines.append(f"{name} = {value}")
    with open(os.path.join(outdir, "scene.cfg"), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    with open(os.path.join(outdir, "seed.txt"), "w", encoding="utf-8") as f:
        f.write(f"{ds.seed}\n")


class DatasetError(ValueError):
    pass


def load_dataset(path) -> SceneDataset:
    cfg_path = os.path.join(path, "scene.cfg")
    if not os.path.isfile(cfg_path):
        raise DatasetError(f"not a dataset directory (missing scene.cfg): {path}")
    raw = {}
    with open(cfg_path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            raw[key.strip()] = value.strip()
    kwargs = {}
    try:
        for name, kind in _SCENE_KEYS:
            if kind is bool:
                kwargs[name] = raw[name].lower() == "true"
            else:
                kwargs[name] = kind(raw[name])
        cfg = GenConfig(**kwargs)
    except (KeyError, ValueError) as exc:
        raise DatasetError(f"corrupt scene.cfg in {path}: {exc}") from None
    try:
        with open(os.path.join(path, "seed.txt"), "r", encoding="utf-8") as f:
            seed = int(f.read().strip())
    except (OSError, ValueError) as exc:
        raise DatasetError(f"corrupt seed.txt in {path}: {exc}") from None

    ids = sorted(
        int(m.group(1))
        for name in os.listdir(path)
        if (m := re.fullmatch(r"view_(\d{4})\.png", name))
    )
    if ids != list(range(cfg.num_views)):
        raise DatasetError(f"dataset in {path} has view files {ids[:4]}..., "
                           f"expected 0..{cfg.num_views - 1}")
    views = []
    for v in ids:
        tag = f"{v:04d}"
        try:
            image = pngio.load_rgb(os.path.join(path, f"view_{tag}.png"))
            clean = pngio.load_rgb(os.path.join(path, f"clean_{tag}.png"))
            mask = (pngio.load_gray(os.path.join(path, f"mask_{tag}.png")) > 0.5).astype(np.float64)
            feats = tensorio.read_tensor(os.path.join(path, f"feat_{tag}.bin")).astype(np.float64)
        except (OSError, tensorio.TensorFormatError) as exc:
            raise DatasetError(f"corrupt dataset file for view {v} in {path}: {exc}") from None
        if image.shape != (cfg.height, cfg.width, 3) or feats.shape != (
            cfg.height, cfg.width, cfg.feature_dim):
            raise DatasetError(f"view {v} in {path} has wrong dimensions")
        views.append(ViewRecord(image=image, clean=clean, distractor_mask=mask,
                                features=feats, view_id=v))
    return SceneDataset(views=views, cfg=cfg, seed=seed)
