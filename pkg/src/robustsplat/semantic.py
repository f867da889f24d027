"""Feature-space outlier detection.

Residual thresholds cannot tell a camouflaged distractor from scene content,
but a frozen feature map can. Two strategies share that input: cluster the
features per view and let each cluster vote on the residual mask (agg), or
train a small per-pixel inlier classifier on labels harvested from the
residual masks themselves (mlp).
"""

import heapq
from dataclasses import replace

import numpy as np

from .masking import MaskConfig, robust_filter
from .smallnet import (
    Adam,
    DenseNet,
    adam_for_net,
    dense_net,
    lipschitz_penalty,
    lipschitz_penalty_grad,
    net_adam_step,
)


def agglomerate(features, target_clusters: int) -> np.ndarray:
    """Greedy bottom-up clustering of the pixel grid, 8-connected.

    Starts from singletons and repeatedly merges the adjacent pair with the
    smallest Ward cost n_a*n_b/(n_a+n_b)*||mu_a - mu_b||^2 until
    target_clusters remain. Returns (H, W) int ids, contiguous from 0 in
    row-major order of first appearance.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim == 2:
        feats = feats[:, :, None]
    if feats.ndim != 3:
        raise ValueError("features must be (H, W) or (H, W, C)")
    if not np.isfinite(feats).all():
        raise ValueError("features must be finite")
    h, w, c = feats.shape
    n = h * w
    if not (1 <= target_clusters <= n):
        raise ValueError(f"target_clusters must be in [1, {n}], got {target_clusters}")

    parent = list(range(n))
    size = [1] * n
    sums = [list(row) for row in feats.reshape(n, c)]
    version = [0] * n

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def cost(a, b):
        na, nb = size[a], size[b]
        sa, sb = sums[a], sums[b]
        acc = 0.0
        for k in range(c):
            d = sa[k] / na - sb[k] / nb
            acc += d * d
        return (na * nb) / (na + nb) * acc

    neighbors = [set() for _ in range(n)]
    for y in range(h):
        base = y * w
        for x in range(w):
            i = base + x
            for dy in (-1, 0, 1):
                yy = y + dy
                if not 0 <= yy < h:
                    continue
                for dx in (-1, 0, 1):
                    xx = x + dx
                    if (dy or dx) and 0 <= xx < w:
                        neighbors[i].add(yy * w + xx)

    heap = []
    for i in range(n):
        for j in neighbors[i]:
            if i < j:
                heap.append((cost(i, j), i, j, 0, 0))
    heapq.heapify(heap)

    merges_left = n - target_clusters
    while merges_left:
        # the grid is connected, so a valid adjacent pair always exists
        cst, a, b, va, vb = heapq.heappop(heap)
        if parent[a] != a or parent[b] != b or version[a] != va or version[b] != vb:
            continue
        if size[a] < size[b]:
            a, b = b, a
        parent[b] = a
        size[a] += size[b]
        sa, sb = sums[a], sums[b]
        for k in range(c):
            sa[k] += sb[k]
        version[a] += 1
        merged = neighbors[a] | neighbors[b]
        neighbors[b] = set()
        fresh = set()
        for x in merged:
            r = find(x)
            if r != a:
                fresh.add(r)
        neighbors[a] = fresh
        va = version[a]
        for r in sorted(fresh):
            lo, hi = (a, r) if a < r else (r, a)
            heapq.heappush(heap, (cost(a, r), lo, hi, version[lo], version[hi]))
        merges_left -= 1

    labels = np.empty(n, dtype=np.int64)
    remap = {}
    for i in range(n):
        r = find(i)
        if r not in remap:
            remap[r] = len(remap)
        labels[i] = remap[r]
    return labels.reshape(h, w)


def cluster_vote(clusters, pixel_mask) -> np.ndarray:
    """Replace each pixel's mask value with its cluster's majority.

    A cluster is inlier iff its mean mask value strictly exceeds 0.5; exact
    ties count as outlier.
    """
    ids = np.asarray(clusters)
    mask = np.asarray(pixel_mask, dtype=np.float64)
    if ids.shape != mask.shape:
        raise ValueError("cluster map and mask dims do not match")
    flat = ids.ravel()
    k = int(flat.max()) + 1
    total = np.bincount(flat, minlength=k).astype(np.float64)
    inlier = np.bincount(flat, weights=mask.ravel(), minlength=k)
    prob = inlier / np.maximum(total, 1.0)
    return (prob[flat] > 0.5).astype(np.float64).reshape(mask.shape)


def make_labels(residuals, hist, cfg: MaskConfig = None):
    """Self-supervision label pair from the residual mask pipeline.

    U is the permissive inlier set (tau=0.5), L the strict one (tau=0.9);
    L is intersected into U so the pair can never contradict. Pixels with
    U=1, L=0 are the ambiguous band the classifier is free on.
    """
    cfg = MaskConfig() if cfg is None else cfg
    upper = robust_filter(residuals, hist, replace(cfg, tau=0.5))
    lower = robust_filter(residuals, hist, replace(cfg, tau=0.9))
    lower = np.minimum(lower, upper)
    return upper, lower


def build_classifier(input_dim: int, hidden=(64, 64), seed: int = 0) -> DenseNet:
    """Inlier classifier: relu stack into a sigmoid, Lipschitz-bounded.

    The output bias starts at +4 so initial probabilities sit near 0.98:
    an untrained classifier should pass everything through, mirroring the
    warm-up schedule's all-inlier start, and label supervision then only
    has to pull outliers down rather than lift every clean pixel up.
    """
    dims = [input_dim] + list(hidden) + [1]
    activations = ["relu"] * len(hidden) + ["sigmoid"]
    net = dense_net(dims, activations, seed=seed, lipschitz=True)
    net.layers[-1].bias[:] = 4.0
    return net


def mlp_mask(classifier: DenseNet, features, binary: bool = False) -> np.ndarray:
    """Per-pixel inlier probability, optionally binarized at 0.5."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 3:
        raise ValueError("features must be (H, W, C)")
    h, w, c = feats.shape
    if c != classifier.input_dim:
        raise ValueError(f"classifier expects {classifier.input_dim} channels, got {c}")
    probs = classifier.forward(feats.reshape(-1, c)).reshape(h, w)
    if binary:
        return (probs > 0.5).astype(np.float64)
    return probs


def mlp_step(classifier: DenseNet, opt: Adam, features, upper, lower,
             lam: float) -> float:
    """One optimizer step on the hinge pair plus the smoothness penalty.

    Per pixel the supervision is max(U - H, 0) + max(H - L, 0), averaged
    over the image; on U=1, L=0 pixels the two slopes cancel exactly, so the
    ambiguous band contributes no gradient. Returns the loss after the step.
    """
    feats = np.asarray(features, dtype=np.float64)
    h, w, c = feats.shape
    u = np.asarray(upper, dtype=np.float64).reshape(-1, 1)
    l = np.asarray(lower, dtype=np.float64).reshape(-1, 1)
    if np.any(l > u):
        raise ValueError("lower labels must be a subset of upper labels")
    x = feats.reshape(-1, c)
    probs = classifier.forward(x)
    grad = ((probs > l).astype(np.float64) - (probs < u).astype(np.float64)) / x.shape[0]
    param_grads, _ = classifier.backward(x, grad)
    extra = lam * lipschitz_penalty_grad(classifier)
    net_adam_step(classifier, opt, param_grads, extra_c_grads=extra)

    post = classifier.forward(x)
    hinge = np.maximum(u - post, 0.0) + np.maximum(post - l, 0.0)
    return float(hinge.mean() + lam * lipschitz_penalty(classifier))


def classifier_adam(classifier: DenseNet, lr: float = 1e-3) -> Adam:
    return adam_for_net(classifier, lr=lr)
