"""The robust optimization loop binding every module together.

Each step renders one view, folds its residuals into the running histogram,
builds an inlier mask for the configured mode, softens it through the
warm-up schedule, and takes masked gradient steps on the splats (and, when
enabled, the per-view appearance latents and the inlier classifier).
Everything is deterministic given (config, dataset): same inputs give a
bitwise-identical log.
"""

import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import pngio, tensorio
from .datagen import SceneDataset, positional_encoding
from .kernels import RobustKernel, irls_weight
from .masking import MaskConfig, bernoulli_mask, robust_filter, schedule_alpha, trim_mask
from .residual_stats import ResidualHistogram
from .semantic import (
    agglomerate,
    build_classifier,
    classifier_adam,
    cluster_vote,
    make_labels,
    mlp_mask,
    mlp_step,
)
from .smallnet import DenseLayer, DenseNet, adam_for_net, net_adam_step
from .splats import (
    DEFAULT_LRS,
    SplatAdam,
    SplatModel,
    UtilizationTracker,
    accumulate_utilization,
    attach_glo,
    init_model,
    prune,
    render,
    render_backward,
)

MODES = ("none", "trim", "robust_filter", "sls_agg", "sls_mlp")


class TrainDivergence(RuntimeError):
    """Loss left the reals; training state at the failing step is attached."""


@dataclass
class TrainConfig:
    steps: int = 3000
    eval_every: int = 100
    seed: int = 0
    n_splats: int = 1500
    mode: str = "none"
    mask: MaskConfig = field(default_factory=MaskConfig)
    mask_before_hist: bool = False
    hist_bucket_width: float = 1e-3
    hist_max_residual: float = 2.0
    hist_discount: float = 0.99
    kernel: str | None = None  # IRLS reweighting baseline, replaces masking
    kernel_scale: float = 0.1
    glo: bool = True
    glo_dim: int = 8
    glo_hidden: int = 32
    glo_lr: float = 1e-3
    lrs: dict = field(default_factory=lambda: {k: v for k, v in DEFAULT_LRS.items()
                                               if k != "glo"})
    ubp: bool = False
    ubp_start: int = 500
    ubp_stop: int = 1500
    ubp_period: int = 100
    ubp_kappa: float = 1e-8
    sls_clusters: int = 100
    sls_lambda: float = 0.5
    sls_pe_degree: int = 8
    sls_hidden: tuple = (64, 64)
    sls_mlp_lr: float = 1e-3
    sls_label_warmup: int = 500

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.ubp_stop < self.ubp_start:
            raise ValueError("ubp stop must be >= start")
        if self.kernel is not None and self.mode != "none":
            raise ValueError("the kernel baseline replaces masking; use mode none")

    @classmethod
    def from_dict(cls, cfg: dict) -> "TrainConfig":
        """Build from the flat config mapping (see config.SCHEMA)."""
        from .config import hidden_widths

        mask = MaskConfig(
            tau=cfg["mask.tau"],
            box_threshold=cfg["mask.box_threshold"],
            patch_size=cfg["mask.patch_size"],
            neighborhood=cfg["mask.neighborhood"],
            patch_threshold=cfg["mask.patch_threshold"],
            beta1=cfg["mask.beta1"],
            beta2=cfg["mask.beta2"],
            patch_override=cfg["mask.patch_override"],
            use_smooth=cfg["mask.use_smooth"],
            use_patch=cfg["mask.use_patch"],
        )
        kernel = None if cfg["loss.kernel"] == "none" else cfg["loss.kernel"]
        lrs = {
            "means": cfg["train.lr_means"],
            "log_scales": cfg["train.lr_scales"],
            "rotations": cfg["train.lr_rotation"],
            "opacity_logits": cfg["train.lr_opacity"],
            "colors": cfg["train.lr_color"],
        }
        return cls(
            steps=cfg["train.steps"],
            eval_every=cfg["train.eval_every"],
            seed=cfg["train.seed"],
            n_splats=cfg["train.splats"],
            mode=cfg["mask.mode"],
            mask=mask,
            mask_before_hist=cfg["train.mask_before_hist"],
            hist_bucket_width=cfg["hist.bucket_width"],
            hist_max_residual=cfg["hist.max_residual"],
            hist_discount=cfg["hist.discount"],
            kernel=kernel,
            kernel_scale=cfg["loss.kernel_scale"],
            glo=cfg["glo.enabled"],
            glo_dim=cfg["glo.dim"],
            glo_hidden=cfg["glo.hidden"],
            glo_lr=cfg["train.lr_glo"],
            lrs=lrs,
            ubp=cfg["ubp.enabled"],
            ubp_start=cfg["ubp.start"],
            ubp_stop=cfg["ubp.stop"],
            ubp_period=cfg["ubp.period"],
            ubp_kappa=cfg["ubp.kappa"],
            sls_clusters=cfg["sls.clusters"],
            sls_lambda=cfg["sls.lambda"],
            sls_pe_degree=cfg["sls.pe_degree"],
            sls_hidden=tuple(hidden_widths(cfg)),
            sls_mlp_lr=cfg["sls.mlp_lr"],
            sls_label_warmup=cfg["sls.label_warmup"],
        )


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    iou: list = field(default_factory=list)
    splats: list = field(default_factory=list)
    alpha: list = field(default_factory=list)

    def append(self, step, psnr_v, loss_v, iou_v, splats_v, alpha_v) -> None:
        if self.steps and step <= self.steps[-1]:
            raise ValueError("log steps must increase")
        self.steps.append(int(step))
        self.psnr.append(float(psnr_v))
        self.loss.append(float(loss_v))
        self.iou.append(float(iou_v))
        self.splats.append(int(splats_v))
        self.alpha.append(float(alpha_v))

    def rows(self):
        for i in range(len(self.steps)):
            yield (self.steps[i], self.psnr[i], self.loss[i], self.iou[i],
                   self.splats[i], self.alpha[i])

    def to_csv(self) -> str:
        lines = ["step,psnr,loss,iou,splats,alpha"]
        for step, p, lo, io, sp, al in self.rows():
            lines.append(f"{step},{p!r},{lo!r},{io!r},{sp},{al!r}")
        return "\n".join(lines) + "\n"


# --- metrics ------------------------------------------------------------------


def residual_image(rendered, target) -> np.ndarray:
    """Per-pixel channel-mean absolute error, the masking residual."""
    return np.abs(np.asarray(rendered) - np.asarray(target)).mean(axis=2)


def masked_l1(rendered, target, mask):
    """Masked mean-absolute loss and its gradient image.

    loss = sum(mask * mean_ch|render - target|) / sum(mask); the inlier-count
    normalization keeps the effective step size constant as masks tighten.
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if rendered.shape != target.shape or mask.shape != rendered.shape[:2]:
        raise ValueError("image and mask dims do not match")
    total = mask.sum()
    if total == 0:
        warnings.warn("all-zero mask: loss and gradients are zero this step")
        return 0.0, np.zeros_like(rendered)
    diff = rendered - target
    loss = float((mask * np.abs(diff).mean(axis=2)).sum() / total)
    grad = mask[:, :, None] * np.sign(diff) / (3.0 * total)
    return loss, grad


def psnr(a, b) -> float:
    """10*log10(1/MSE) against a unit signal peak, capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image dims do not match")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 1e-12:
        return 99.0
    return float(min(10.0 * np.log10(1.0 / mse), 99.0))


def mask_iou(pred_outlier, gt_outlier) -> float:
    """Intersection over union of outlier sets; two empty sets agree fully."""
    p = np.asarray(pred_outlier).astype(bool)
    g = np.asarray(gt_outlier).astype(bool)
    if p.shape != g.shape:
        raise ValueError("mask dims do not match")
    union = (p | g).sum()
    if union == 0:
        return 1.0
    return float((p & g).sum() / union)


# --- mask engine ----------------------------------------------------------------


class MaskEngine:
    """Owns the histogram and per-mode state; serves mask_star in [0, 1].

    Before the histogram has seen any residuals the residual-driven modes
    fall back to an all-ones mask (only reachable with mask_before_hist).
    """

    def __init__(self, cfg: TrainConfig, dataset: SceneDataset):
        self.cfg = cfg
        self.hist = ResidualHistogram(cfg.hist_bucket_width, cfg.hist_max_residual,
                                      cfg.hist_discount)
        self.clusters = None
        self.classifier = None
        self.classifier_opt = None
        self.features = None
        if cfg.mode == "sls_agg":
            # one segmentation per view, fixed for the whole run
            self.clusters = [agglomerate(rec.features, cfg.sls_clusters)
                             for rec in dataset.views]
        elif cfg.mode == "sls_mlp":
            h, w = dataset.cfg.height, dataset.cfg.width
            pe = positional_encoding(h, w, cfg.sls_pe_degree)
            self.features = [np.concatenate([rec.features, pe], axis=2)
                             for rec in dataset.views]
            input_dim = self.features[0].shape[2]
            self.classifier = build_classifier(input_dim, cfg.sls_hidden,
                                               seed=cfg.seed)
            self.classifier_opt = classifier_adam(self.classifier, lr=cfg.sls_mlp_lr)

    def mask_star(self, residual: np.ndarray, view_index: int) -> np.ndarray:
        cfg = self.cfg
        if cfg.mode == "none":
            return np.ones_like(residual)
        if cfg.mode == "sls_mlp":
            return mlp_mask(self.classifier, self.features[view_index])
        if self.hist.total == 0:
            return np.ones_like(residual)
        if cfg.mode == "trim":
            return trim_mask(residual, self.hist.quantile(cfg.mask.tau))
        base = robust_filter(residual, self.hist, cfg.mask)
        if cfg.mode == "robust_filter":
            return base
        return cluster_vote(self.clusters[view_index], base)

    def learn(self, residual: np.ndarray, view_index: int, step: int) -> None:
        """One classifier update from labels the residual pipeline harvests.

        Supervision waits out sls_label_warmup steps: before the fit
        stabilizes the residuals do not separate outliers, and labels
        harvested from them push every output to one side of a sigmoid
        plateau the step budget cannot climb back out of.
        """
        if self.cfg.mode != "sls_mlp" or self.hist.total == 0:
            return
        if step < self.cfg.sls_label_warmup:
            return
        upper, lower = make_labels(residual, self.hist, self.cfg.mask)
        mlp_step(self.classifier, self.classifier_opt, self.features[view_index],
                 upper, lower, self.cfg.sls_lambda)


# --- evaluation -----------------------------------------------------------------


def _without_appearance(model: SplatModel) -> SplatModel:
    bare = SplatModel(means=model.means, log_scales=model.log_scales,
                      rotations=model.rotations,
                      opacity_logits=model.opacity_logits,
                      colors=model.colors, depths=model.depths)
    return bare


def snapshot_metrics(model: SplatModel, dataset: SceneDataset,
                     engine: MaskEngine):
    """Mean PSNR / masked loss / outlier IoU over all views, current state."""
    width, height = dataset.cfg.width, dataset.cfg.height
    psnrs, losses, ious = [], [], []
    for rec in dataset.views:
        img = render(model, rec.view_id, width, height)
        psnrs.append(psnr(img, rec.clean))
        resid = residual_image(img, rec.image)
        star = engine.mask_star(resid, rec.view_id)
        inlier = star > 0.5
        loss, _ = masked_l1(img, rec.image, inlier.astype(np.float64))
        losses.append(loss)
        ious.append(mask_iou(~inlier, rec.distractor_mask > 0.5))
    return float(np.mean(psnrs)), float(np.mean(losses)), float(np.mean(ious))


def evaluate(model: SplatModel, dataset: SceneDataset,
             engine: MaskEngine = None) -> dict:
    """Per-view PSNR with each view's appearance, identity-appearance PSNR,
    mean outlier IoU when a mask engine is supplied, and the splat count."""
    width, height = dataset.cfg.width, dataset.cfg.height
    per_view = []
    ious = []
    for rec in dataset.views:
        img = render(model, rec.view_id, width, height)
        per_view.append(psnr(img, rec.clean))
        if engine is not None:
            resid = residual_image(img, rec.image)
            star = engine.mask_star(resid, rec.view_id)
            ious.append(mask_iou(star <= 0.5, rec.distractor_mask > 0.5))
    ident = render(_without_appearance(model), 0, width, height)
    ident_psnr = float(np.mean([psnr(ident, rec.clean) for rec in dataset.views]))
    return {
        "psnr": float(np.mean(per_view)),
        "psnr_per_view": per_view,
        "psnr_identity": ident_psnr,
        "iou": float(np.mean(ious)) if ious else None,
        "splats": model.n_splats,
    }


# --- per-view latent optimizer ---------------------------------------------------


class LatentAdam:
    """Adam over per-view latent rows, each with its own step count."""

    def __init__(self, shape, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = np.zeros(shape[0], dtype=np.int64)

    def step(self, latents, view, grad) -> None:
        self.t[view] += 1
        t = self.t[view]
        self.m[view] = self.beta1 * self.m[view] + (1 - self.beta1) * grad
        self.v[view] = self.beta2 * self.v[view] + (1 - self.beta2) * grad * grad
        mhat = self.m[view] / (1 - self.beta1**t)
        vhat = self.v[view] / (1 - self.beta2**t)
        latents[view] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# --- checkpoints -----------------------------------------------------------------


def _pack_net(bundle: dict, prefix: str, net: DenseNet) -> None:
    for i, layer in enumerate(net.layers):
        bundle[f"{prefix}.{i}.weight"] = layer.weight
        bundle[f"{prefix}.{i}.bias"] = layer.bias
        bundle[f"{prefix}.{i}.c"] = np.array([layer.lipschitz_c])


def _unpack_net(bundle: dict, prefix: str, activations_for, lipschitz: bool):
    layers = []
    i = 0
    while f"{prefix}.{i}.weight" in bundle:
        layers.append(DenseLayer(bundle[f"{prefix}.{i}.weight"],
                                 bundle[f"{prefix}.{i}.bias"],
                                 float(bundle[f"{prefix}.{i}.c"][0]), "relu"))
        i += 1
    if not layers:
        return None
    acts = activations_for(len(layers))
    for layer, act in zip(layers, acts):
        layer.activation = act
    return DenseNet(layers, lipschitz=lipschitz)


def save_checkpoint(path, model: SplatModel, engine: MaskEngine,
                    steps_done: int) -> None:
    bundle = {
        "means": model.means, "log_scales": model.log_scales,
        "rotations": model.rotations, "opacity_logits": model.opacity_logits,
        "colors": model.colors, "depths": model.depths,
        "hist.buckets": engine.hist.buckets,
        "hist.meta": np.array([engine.hist.bucket_width, engine.hist.max_residual,
                               engine.hist.discount]),
        "meta": np.array([float(steps_done)]),
    }
    if model.glo_latents is not None:
        bundle["glo_latents"] = model.glo_latents
        _pack_net(bundle, "glo_mapper", model.glo_mapper)
    if engine.classifier is not None:
        _pack_net(bundle, "classifier", engine.classifier)
    tensorio.write_bundle(path, bundle)


def load_checkpoint(path):
    """Returns (model, hist, classifier, steps_done)."""
    b = tensorio.read_bundle(path)
    model = SplatModel(means=b["means"], log_scales=b["log_scales"],
                       rotations=b["rotations"],
                       opacity_logits=b["opacity_logits"],
                       colors=b["colors"], depths=b["depths"])
    if "glo_latents" in b:
        model.glo_latents = b["glo_latents"]
        model.glo_mapper = _unpack_net(
            b, "glo_mapper", lambda n: ["relu"] * (n - 1) + ["identity"],
            lipschitz=False)
    hist = ResidualHistogram(*(float(x) for x in b["hist.meta"]))
    hist.buckets[:] = b["hist.buckets"]
    classifier = _unpack_net(b, "classifier",
                             lambda n: ["relu"] * (n - 1) + ["sigmoid"],
                             lipschitz=True)
    return model, hist, classifier, int(b["meta"][0])


# --- the loop --------------------------------------------------------------------


def train(cfg: TrainConfig, dataset: SceneDataset, out_dir=None):
    """Run the optimization; returns (model, log, engine).

    When out_dir is given, emits log.csv, per-eval render/mask dumps, and a
    final checkpoint there.
    """
    views = dataset.views
    if not views:
        raise ValueError("dataset has no views")
    width, height = dataset.cfg.width, dataset.cfg.height
    n_views = len(views)

    mean_image = np.mean([rec.image for rec in views], axis=0)
    model = init_model(cfg.n_splats, width, height, seed=cfg.seed,
                       mean_image=mean_image)
    if cfg.glo:
        attach_glo(model, n_views, seed=cfg.seed, hidden=cfg.glo_hidden,
                   dim=cfg.glo_dim)
    splat_opt = SplatAdam(model, lrs=cfg.lrs)
    latent_opt = LatentAdam((n_views, cfg.glo_dim), lr=cfg.glo_lr) if cfg.glo else None
    mapper_opt = adam_for_net(model.glo_mapper, lr=cfg.glo_lr) if cfg.glo else None

    engine = MaskEngine(cfg, dataset)
    kernel = RobustKernel(cfg.kernel, cfg.kernel_scale) if cfg.kernel else None
    tracker = None
    log = TrainLog()

    if out_dir is not None:
        os.makedirs(os.path.join(out_dir, "dumps"), exist_ok=True)

    def log_row(step: int, dump_view: int = None):
        mean_psnr, mean_loss, mean_iou = snapshot_metrics(model, dataset, engine)
        alpha = schedule_alpha(step, cfg.mask)
        log.append(step, mean_psnr, mean_loss, mean_iou, model.n_splats, alpha)
        if out_dir is not None and dump_view is not None:
            img = render(model, dump_view, width, height)
            resid = residual_image(img, views[dump_view].image)
            star = engine.mask_star(resid, dump_view)
            tag = f"{step:05d}"
            pngio.save_rgb(os.path.join(out_dir, "dumps", f"render_{tag}.png"), img)
            pngio.save_gray(os.path.join(out_dir, "dumps", f"mask_{tag}.png"),
                            (star > 0.5).astype(np.float64))

    for t in range(cfg.steps):
        v = t % n_views
        if t % cfg.eval_every == 0:
            log_row(t, dump_view=v)

        img = render(model, v, width, height)
        resid = residual_image(img, views[v].image)
        if not np.all(np.isfinite(resid)):
            raise TrainDivergence(
                f"non-finite residuals at step {t} (view {v}, "
                f"{model.n_splats} splats)")
        if not cfg.mask_before_hist:
            engine.hist.update(resid)
        engine.learn(resid, v, t)
        if kernel is not None:
            mask = irls_weight(kernel, resid)
        else:
            star = engine.mask_star(resid, v)
            alpha = schedule_alpha(t, cfg.mask)
            mask = bernoulli_mask(star, alpha, cfg.seed, step=t)
        if cfg.mask_before_hist:
            engine.hist.update(resid)

        loss, grad_img = masked_l1(img, views[v].image, mask)
        if not np.isfinite(loss):
            raise TrainDivergence(
                f"non-finite loss at step {t} (view {v}, {model.n_splats} splats, "
                f"alpha {schedule_alpha(t, cfg.mask):.4f})")
        grads = render_backward(model, v, grad_img)

        in_window = cfg.ubp and cfg.ubp_start <= t < cfg.ubp_stop
        if in_window:
            if tracker is None:
                tracker = UtilizationTracker.for_model(model, cfg.ubp_period,
                                                       cfg.ubp_kappa)
            accumulate_utilization(tracker, grads.position, mask)

        splat_opt.step(model, grads)
        if cfg.glo:
            latent_opt.step(model.glo_latents, v, grads.glo_latent)
            net_adam_step(model.glo_mapper, mapper_opt, grads.glo_mapper)

        if in_window and tracker.updates >= cfg.ubp_period:
            idx = prune(model, tracker)
            splat_opt.slice(idx)

    log_row(cfg.steps, dump_view=cfg.steps % n_views)

    if out_dir is not None:
        with open(os.path.join(out_dir, "log.csv"), "w", encoding="utf-8") as f:
            f.write(log.to_csv())
        save_checkpoint(os.path.join(out_dir, "checkpoint.bin"), model, engine,
                        cfg.steps)
    return model, log, engine
