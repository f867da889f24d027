"""Semantic outlier masks: cluster voting and the learned classifier.

Residual masks see *where the fit hurts*; semantic masks see *what things
are*. Here feature maps are segmented into spatial clusters, each cluster
votes on a residual-derived mask (whole objects get one decision), and a
small Lipschitz-bounded MLP learns to predict inlier probability from
features, supervised only by loose/strict residual labels. Writes the
cluster map and both masks to demos/out/.
"""

import os

import numpy as np

from robustsplat.datagen import GenConfig, generate_scene, positional_encoding
from robustsplat.masking import MaskConfig
from robustsplat.pngio import save_clusters, save_gray
from robustsplat.residual_stats import ResidualHistogram
from robustsplat.semantic import (
    agglomerate,
    build_classifier,
    classifier_adam,
    cluster_vote,
    make_labels,
    mlp_mask,
    mlp_step,
)

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)

w = h = 64
scene = generate_scene(2, GenConfig(width=w, height=h, num_views=8,
                                    occupancy=0.25, persistence=8,
                                    feature_dim=8))
rec = scene.views[0]
gt_outlier = rec.distractor_mask > 0.5

# stand-in for mid-training residuals: distance from the clean image,
# plus noise so the residual mask is imperfect
rng = np.random.default_rng(0)
residuals = np.abs(rec.image - rec.clean).mean(axis=2)
residuals += rng.uniform(0, 0.05, residuals.shape)

hist = ResidualHistogram()
hist.update(residuals)
cfg = MaskConfig(tau=0.4)

clusters = agglomerate(rec.features, target_clusters=80)
save_clusters(os.path.join(OUT, "semantic_clusters.png"), clusters)

from robustsplat.masking import robust_filter  # noqa: E402

residual_mask = robust_filter(residuals, hist, cfg)
voted = cluster_vote(clusters, residual_mask)
save_gray(os.path.join(OUT, "semantic_residual_mask.png"), residual_mask)
save_gray(os.path.join(OUT, "semantic_voted_mask.png"), voted)

def iou(pred_inlier):
    pred_outlier = pred_inlier <= 0.5
    union = (pred_outlier | gt_outlier).sum()
    return (pred_outlier & gt_outlier).sum() / union if union else 1.0

print(f"clusters: {clusters.max() + 1}")
print(f"residual mask outlier-IoU {iou(residual_mask):.3f}")
print(f"cluster-voted outlier-IoU {iou(voted):.3f}")

# the classifier learns the same decision from features alone
feats = np.concatenate([rec.features, positional_encoding(h, w, 4)], axis=2)
clf = build_classifier(feats.shape[2], hidden=(32,), seed=0)
opt = classifier_adam(clf, lr=3e-3)
upper, lower = make_labels(residuals, hist, cfg)
for step in range(150):
    loss = mlp_step(clf, opt, feats, upper, lower, lam=0.5)
probs = mlp_mask(clf, feats)
save_gray(os.path.join(OUT, "semantic_mlp_mask.png"), probs)
print(f"classifier outlier-IoU {iou(probs):.3f} (final loss {loss:.4f})")
print(f"wrote masks to {OUT}/")
