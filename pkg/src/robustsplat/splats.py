"""Differentiable 2D Gaussian-splat image model.

Splats live in normalized [0,1]^2 image coordinates with anisotropic
covariance R(theta) diag(exp(2 s)) R(theta)^T, a fixed random depth used only
as the compositing sort key, sigmoid opacity, and RGB color. Rendering is
front-to-back alpha compositing over a mid-gray background; every parameter
gradient is analytic. A per-view latent mapped to an affine color transform
(GLO) absorbs global appearance drift, and a utilization tracker prunes
splats whose masked position-gradient energy stays negligible.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _raster
from .smallnet import DenseNet, dense_net

BACKGROUND = np.array([0.5, 0.5, 0.5])
SCALE_MIN, SCALE_MAX = 1e-4, 1.0          # exp(log_scales) kept inside (open)
OPACITY_EPS = 1e-6
GLO_DIM = 8

SPLAT_PARAMS = ("means", "log_scales", "rotations", "opacity_logits", "colors")

# adaptive-moment learning rates per parameter group
DEFAULT_LRS = {
    "means": 2e-3,
    "log_scales": 5e-3,
    "rotations": 5e-3,
    "opacity_logits": 5e-2,
    "colors": 2.5e-3,
    "glo": 1e-3,
}


@dataclass
class Splat:
    """Single-splat record, convenient for tests and small scenes."""
    mean: tuple
    log_scales: tuple
    rotation: float
    opacity_logit: float
    color: tuple
    depth: float


@dataclass
class SplatModel:
    means: np.ndarray            # (G, 2) in [0,1]^2
    log_scales: np.ndarray       # (G, 2)
    rotations: np.ndarray        # (G,)
    opacity_logits: np.ndarray   # (G,)
    colors: np.ndarray           # (G, 3) in [0,1]
    depths: np.ndarray           # (G,) fixed sort key, smaller = front
    glo_latents: np.ndarray | None = None   # (n_views, GLO_DIM)
    glo_mapper: DenseNet | None = None      # GLO_DIM -> 6 (raw_a, b)
    _cache: dict | None = field(default=None, repr=False, compare=False)

    @property
    def n_splats(self) -> int:
        return self.means.shape[0]

    @property
    def n_views(self) -> int:
        return 0 if self.glo_latents is None else self.glo_latents.shape[0]

    def opacities(self) -> np.ndarray:
        o = 1.0 / (1.0 + np.exp(-self.opacity_logits))
        return np.clip(o, OPACITY_EPS, 1.0 - OPACITY_EPS)

    def clamp(self) -> None:
        """Re-impose parameter ranges after an optimizer step."""
        np.clip(self.log_scales, np.log(SCALE_MIN) + 1e-3, np.log(SCALE_MAX) - 1e-3,
                out=self.log_scales)
        np.clip(self.colors, 0.0, 1.0, out=self.colors)

    @classmethod
    def from_splats(cls, splats, n_views=0, seed=0):
        m = cls(
            means=np.array([s.mean for s in splats], dtype=np.float64).reshape(-1, 2),
            log_scales=np.array([s.log_scales for s in splats], dtype=np.float64).reshape(-1, 2),
            rotations=np.array([s.rotation for s in splats], dtype=np.float64),
            opacity_logits=np.array([s.opacity_logit for s in splats], dtype=np.float64),
            colors=np.array([s.color for s in splats], dtype=np.float64).reshape(-1, 3),
            depths=np.array([s.depth for s in splats], dtype=np.float64),
        )
        if n_views:
            attach_glo(m, n_views, seed=seed)
        return m


def covariance(log_scales, rotation) -> np.ndarray:
    """Sigma = R(theta) diag(exp(2 s)) R(theta)^T for one splat."""
    s1, s2 = np.exp(2.0 * np.asarray(log_scales, dtype=np.float64))
    ct, st = np.cos(rotation), np.sin(rotation)
    r = np.array([[ct, -st], [st, ct]])
    return r @ np.diag([s1, s2]) @ r.T


def attach_glo(model: SplatModel, n_views: int, seed: int = 0,
               hidden: int = 32, dim: int = GLO_DIM) -> None:
    """Add per-view latents and a zero-init-output mapper (identity at start).

    Latents start as small gaussian noise rather than zeros so the mapper's
    first layer sees distinct inputs and gradients from step one.
    """
    rng = np.random.default_rng(seed)
    model.glo_latents = rng.normal(0.0, 0.1, size=(n_views, dim))
    model.glo_mapper = dense_net([dim, hidden, 6], ["relu", "identity"],
                                 seed=seed, zero_init_last=True)


def init_model(n_splats: int, width: int, height: int, seed: int = 0,
               mean_image: np.ndarray | None = None, n_views: int = 0,
               glo: bool = False) -> SplatModel:
    """Grid-jittered means, 4-px scales, logit-0 opacity, image-sampled colors."""
    if n_splats < 1:
        raise ValueError("need at least one splat")
    rng = np.random.default_rng(seed)
    side = int(np.ceil(np.sqrt(n_splats)))
    gy, gx = np.mgrid[0:side, 0:side]
    grid = np.stack([(gx.ravel() + 0.5) / side, (gy.ravel() + 0.5) / side], axis=1)
    grid = grid[:n_splats]
    means = grid + rng.uniform(-0.4, 0.4, size=grid.shape) / side
    means = np.clip(means, 0.01, 0.99)
    log_scales = np.tile(np.log([4.0 / width, 4.0 / height]), (n_splats, 1))
    if mean_image is not None:
        px = np.clip((means[:, 0] * width).astype(int), 0, width - 1)
        py = np.clip((means[:, 1] * height).astype(int), 0, height - 1)
        colors = np.asarray(mean_image, dtype=np.float64)[py, px].copy()
    else:
        colors = np.full((n_splats, 3), 0.5)
    model = SplatModel(
        means=means,
        log_scales=log_scales,
        rotations=np.zeros(n_splats),
        opacity_logits=np.zeros(n_splats),
        colors=colors,
        depths=rng.uniform(0.0, 1.0, size=n_splats),
    )
    if glo:
        attach_glo(model, n_views, seed=seed)
    return model


# ------------------------------------------------------------------ GLO

def _glo_transform(model: SplatModel, view_index: int):
    """(a, b, gate, chat): affine color transform and its clamp gate."""
    if model.glo_mapper is None:
        chat = np.clip(model.colors, 0.0, 1.0)
        return None, None, None, chat
    if not 0 <= view_index < model.n_views:
        raise ValueError(f"view index {view_index} out of range")
    z = model.glo_latents[view_index]
    out = model.glo_mapper.forward(z)
    a = 1.0 + out[:3]
    b = out[3:]
    pre = a[None, :] * model.colors + b[None, :]
    gate = ((pre > 0.0) & (pre < 1.0)).astype(np.float64)
    return a, b, gate, np.clip(pre, 0.0, 1.0)


def apply_glo(model: SplatModel, view_index: int) -> np.ndarray:
    """Per-splat colors adjusted by the view's affine transform, clamped [0,1]."""
    return _glo_transform(model, view_index)[3]


# ------------------------------------------------------------------ render

def _bboxes(model: SplatModel, width: int, height: int) -> np.ndarray:
    """Axis-aligned 3-sigma pixel bounds per splat (w_lo, w_hi, h_lo, h_hi)."""
    sig = np.exp(model.log_scales)
    ct, st = np.cos(model.rotations), np.sin(model.rotations)
    # sqrt of covariance diagonal: axis-aligned extent of the ellipse
    sx = np.sqrt((sig[:, 0] * ct) ** 2 + (sig[:, 1] * st) ** 2)
    sy = np.sqrt((sig[:, 0] * st) ** 2 + (sig[:, 1] * ct) ** 2)
    w_lo = np.ceil((model.means[:, 0] - 3 * sx) * width - 0.5)
    w_hi = np.floor((model.means[:, 0] + 3 * sx) * width - 0.5)
    h_lo = np.ceil((model.means[:, 1] - 3 * sy) * height - 0.5)
    h_hi = np.floor((model.means[:, 1] + 3 * sy) * height - 0.5)
    bbox = np.stack([w_lo, w_hi, h_lo, h_hi], axis=1)
    # lo clipped one past the end so fully-off-image boxes come out empty
    bbox[:, 0] = np.clip(bbox[:, 0], 0, width)
    bbox[:, 1] = np.clip(bbox[:, 1], -1, width - 1)
    bbox[:, 2] = np.clip(bbox[:, 2], 0, height)
    bbox[:, 3] = np.clip(bbox[:, 3], -1, height - 1)
    return bbox.astype(np.int64)


def render(model: SplatModel, view_index: int, width: int, height: int) -> np.ndarray:
    """Composite all splats front-to-back over the mid-gray background.

    Caches everything the backward pass needs; the cache is invalidated by
    the next render call.
    """
    g = model.n_splats
    if g == 0:
        model._cache = None
        return np.tile(BACKGROUND, (height, width, 1))
    order = np.lexsort((np.arange(g), model.depths))
    a_glo, b_glo, gate, chat_all = _glo_transform(model, view_index)

    means = np.ascontiguousarray(model.means[order])
    inv_eig = np.exp(-2.0 * model.log_scales[order])
    cos_t = np.cos(model.rotations[order])
    sin_t = np.sin(model.rotations[order])
    opac = model.opacities()[order]
    chat = np.ascontiguousarray(chat_all[order])
    bbox = _bboxes(model, width, height)[order]

    areas = np.maximum(bbox[:, 1] - bbox[:, 0] + 1, 0) * np.maximum(
        bbox[:, 3] - bbox[:, 2] + 1, 0)
    offsets = np.zeros(g + 1, dtype=np.int64)
    np.cumsum(areas, out=offsets[1:])
    alpha_flat = np.zeros(offsets[-1])
    t_flat = np.zeros(offsets[-1])
    color_accum = np.zeros((height, width, 3))
    trans = np.ones((height, width))

    _raster.forward_kernel(means, inv_eig[:, 0].copy(), inv_eig[:, 1].copy(),
                           cos_t, sin_t, opac, chat, bbox, offsets[:-1],
                           alpha_flat, t_flat, width, height,
                           color_accum, trans)
    img = color_accum + BACKGROUND[None, None, :] * trans[:, :, None]
    model._cache = {
        "view": view_index, "w": width, "h": height, "order": order,
        "means": means, "inv_eig": inv_eig, "cos_t": cos_t, "sin_t": sin_t,
        "opac_sorted": opac, "chat": chat, "bbox": bbox, "offsets": offsets,
        "alpha_flat": alpha_flat, "t_flat": t_flat, "trans": trans,
        "glo": (a_glo, b_glo, gate),
    }
    return img


@dataclass
class PositionGradients:
    """Per-splat, per-covered-pixel squared Frobenius norms of d(image)/d(mean).

    Stored sparsely over each splat's bounding box; frobenius_image
    reconstructs the dense per-pixel magnitude image for one splat.
    """
    bbox: np.ndarray        # (G, 4) in original splat order
    offsets: np.ndarray     # (G+1,)
    fro2: np.ndarray        # flattened bbox pixels
    width: int
    height: int

    def frobenius_image(self, g: int) -> np.ndarray:
        out = np.zeros((self.height, self.width))
        w_lo, w_hi, h_lo, h_hi = self.bbox[g]
        if w_lo > w_hi or h_lo > h_hi:
            return out
        block = self.fro2[self.offsets[g]:self.offsets[g + 1]]
        out[h_lo:h_hi + 1, w_lo:w_hi + 1] = block.reshape(
            h_hi - h_lo + 1, w_hi - w_lo + 1)
        return out


@dataclass
class SplatGradients:
    means: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    glo_latent: np.ndarray | None
    glo_mapper: list | None
    position: PositionGradients


def render_backward(model: SplatModel, view_index: int,
                    grad_image: np.ndarray) -> SplatGradients:
    """Analytic gradients of sum(render * grad_image) for every parameter.

    Also returns the loss-independent position-gradient norms that feed
    utilization tracking. Requires the cache from an immediately preceding
    render of the same view.
    """
    c = model._cache
    if c is None or c["view"] != view_index:
        raise ValueError("no render cache for this view; call render first")
    g = model.n_splats
    width, height = c["w"], c["h"]
    grad_image = np.ascontiguousarray(grad_image, dtype=np.float64)

    order = c["order"]
    g_mu = np.zeros((g, 2))
    g_s = np.zeros((g, 2))
    g_th = np.zeros(g)
    g_asum = np.zeros(g)
    g_chat = np.zeros((g, 3))
    fro2 = np.zeros(c["offsets"][-1])
    suffix = BACKGROUND[None, None, :] * c["trans"][:, :, None]
    suffix = np.ascontiguousarray(suffix)

    _raster.backward_kernel(c["means"], c["inv_eig"][:, 0].copy(),
                            c["inv_eig"][:, 1].copy(), c["cos_t"], c["sin_t"],
                            c["chat"], c["bbox"], c["offsets"][:-1],
                            c["alpha_flat"], c["t_flat"],
                            grad_image, width, height,
                            g_mu, g_s, g_th, g_asum, g_chat, fro2, suffix)

    # unsort back to model order
    inv = np.empty(g, dtype=np.int64)
    inv[order] = np.arange(g)
    g_mu, g_s, g_th = g_mu[inv], g_s[inv], g_th[inv]
    g_asum, g_chat = g_asum[inv], g_chat[inv]

    opac = c["opac_sorted"][inv]
    g_logit = g_asum * (1.0 - opac)

    a_glo, b_glo, gate = c["glo"]
    if model.glo_mapper is None:
        g_colors = g_chat.copy()
        g_latent, g_mapper = None, None
    else:
        g_colors = g_chat * gate * a_glo[None, :]
        g_pre = g_chat * gate
        g_raw_a = (g_pre * model.colors).sum(axis=0)
        g_b = g_pre.sum(axis=0)
        z = model.glo_latents[view_index]
        model.glo_mapper.forward(z)
        g_mapper, g_latent = model.glo_mapper.backward(
            z, np.concatenate([g_raw_a, g_b]))

    new_offsets, new_fro2 = _reorder_offsets(c["offsets"], inv, fro2)
    pos = PositionGradients(bbox=c["bbox"][inv], offsets=new_offsets,
                            fro2=new_fro2, width=width, height=height)
    return SplatGradients(g_mu, g_s, g_th, g_logit, g_colors,
                          g_latent, g_mapper, pos)


def _reorder_offsets(offsets, inv, flat):
    """Rebuild (offsets, flat) so blocks follow the original splat order."""
    g = len(offsets) - 1
    sizes = np.diff(offsets)
    new_sizes = sizes[inv]
    new_offsets = np.zeros(g + 1, dtype=np.int64)
    np.cumsum(new_sizes, out=new_offsets[1:])
    new_flat = np.empty_like(flat)
    for i in range(g):
        k = inv[i]
        new_flat[new_offsets[i]:new_offsets[i + 1]] = flat[offsets[k]:offsets[k + 1]]
    return new_offsets, new_flat


# ------------------------------------------------------------------ pruning

@dataclass
class UtilizationTracker:
    utilization: np.ndarray    # (G,) accumulated masked gradient energy
    updates: int = 0
    period: int = 100
    kappa: float = 1e-8

    @classmethod
    def for_model(cls, model: SplatModel, period: int = 100, kappa: float = 1e-8):
        return cls(np.zeros(model.n_splats), 0, period, kappa)

    def reset(self, n_splats: int) -> None:
        self.utilization = np.zeros(n_splats)
        self.updates = 0


def accumulate_utilization(tracker: UtilizationTracker,
                           position_grads: PositionGradients,
                           mask: np.ndarray) -> UtilizationTracker:
    """u_g += mean over pixels of mask(px) * ||d image / d mean_g||_F^2."""
    mask = np.ascontiguousarray(mask, dtype=np.float64)
    out = np.zeros(tracker.utilization.shape[0])
    _raster.util_kernel(position_grads.bbox, position_grads.offsets[:-1],
                        position_grads.fro2, mask, out)
    tracker.utilization += out / (position_grads.width * position_grads.height)
    tracker.updates += 1
    return tracker


def prune(model: SplatModel, tracker: UtilizationTracker) -> np.ndarray:
    """Drop splats with utilization < kappa; returns the kept index array.

    Never removes the last splat. Resets the tracker for the survivors;
    callers holding per-splat optimizer state should slice it by the
    returned indices.
    """
    keep = tracker.utilization >= tracker.kappa
    if not keep.any():
        keep[int(np.argmax(tracker.utilization))] = True
    idx = np.flatnonzero(keep)
    for name in SPLAT_PARAMS + ("depths",):
        setattr(model, name, getattr(model, name)[idx].copy())
    model._cache = None
    tracker.reset(len(idx))
    return idx


# ------------------------------------------------------------------ optimizer

class SplatAdam:
    """Adaptive-moment optimizer over the five splat parameter groups."""

    def __init__(self, model: SplatModel, lrs: dict | None = None,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.lrs = dict(DEFAULT_LRS if lrs is None else lrs)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(getattr(model, n)) for n in SPLAT_PARAMS}
        self.v = {n: np.zeros_like(getattr(model, n)) for n in SPLAT_PARAMS}

    def step(self, model: SplatModel, grads: SplatGradients) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        by_name = {
            "means": grads.means, "log_scales": grads.log_scales,
            "rotations": grads.rotations, "opacity_logits": grads.opacity_logits,
            "colors": grads.colors,
        }
        for name, grad in by_name.items():
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * grad
            v *= self.beta2
            v += (1 - self.beta2) * grad * grad
            p = getattr(model, name)
            p -= self.lrs[name] * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        model.clamp()

    def slice(self, idx: np.ndarray) -> None:
        """Keep moment rows for the surviving splats after a prune."""
        for name in SPLAT_PARAMS:
            self.m[name] = self.m[name][idx].copy()
            self.v[name] = self.v[name][idx].copy()
