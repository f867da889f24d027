import os

import numpy as np
import pytest

from robustsplat.config import default_config
from robustsplat.datagen import GenConfig, SceneDataset, ViewRecord, generate_scene
from robustsplat.masking import MaskConfig
from robustsplat.splats import init_model
from robustsplat.trainer import (
    LatentAdam,
    MaskEngine,
    TrainConfig,
    TrainDivergence,
    TrainLog,
    evaluate,
    load_checkpoint,
    mask_iou,
    masked_l1,
    psnr,
    residual_image,
    save_checkpoint,
    train,
)


def tiny_dataset(width=32, height=32, views=3, occupancy=0.0, seed=0,
                 feature_dim=4):
    cfg = GenConfig(width=width, height=height, num_views=views,
                    occupancy=occupancy, persistence=1, jitter=0.02,
                    feature_dim=feature_dim)
    return generate_scene(seed, cfg)


def tiny_train_cfg(**kw):
    base = dict(steps=30, eval_every=10, seed=0, n_splats=40, mode="none",
                glo=False, sls_clusters=12, sls_hidden=(8,))
    base.update(kw)
    return TrainConfig(**base)


# --- masked_l1 ----------------------------------------------------------------


def test_masked_l1_zero_on_identical_images():
    img = np.random.default_rng(0).uniform(0, 1, (5, 7, 3))
    loss, grad = masked_l1(img, img, np.ones((5, 7)))
    assert loss == 0.0
    assert np.all(grad == 0.0)


def test_masked_l1_all_zero_mask_warns_and_returns_zero():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(0, 1, (4, 4, 3)), rng.uniform(0, 1, (4, 4, 3))
    with pytest.warns(UserWarning, match="all-zero mask"):
        loss, grad = masked_l1(a, b, np.zeros((4, 4)))
    assert loss == 0.0
    assert np.all(grad == 0.0)


def test_masked_l1_hand_example():
    # one inlier pixel with channel errors (0.3, 0.0, 0.6) -> mean 0.3
    a = np.zeros((1, 2, 3))
    b = np.zeros((1, 2, 3))
    a[0, 0] = [0.3, 0.0, 0.6]
    b[0, 1] = [1.0, 1.0, 1.0]  # masked out
    mask = np.array([[1.0, 0.0]])
    loss, grad = masked_l1(a, b, mask)
    assert loss == pytest.approx(0.3)
    # grad = mask * sign(a - b) / (3 * sum(mask))
    assert grad[0, 0] == pytest.approx([1 / 3, 0.0, 1 / 3])
    assert np.all(grad[0, 1] == 0.0)


def test_masked_l1_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    a = rng.uniform(0.1, 0.9, (3, 4, 3))
    b = rng.uniform(0.1, 0.9, (3, 4, 3))
    mask = (rng.uniform(size=(3, 4)) > 0.4).astype(np.float64)
    _, grad = masked_l1(a, b, mask)
    step = 1e-6
    for idx in [(0, 0, 0), (1, 2, 1), (2, 3, 2), (0, 3, 0)]:
        ap = a.copy()
        ap[idx] += step
        am = a.copy()
        am[idx] -= step
        fd = (masked_l1(ap, b, mask)[0] - masked_l1(am, b, mask)[0]) / (2 * step)
        assert grad[idx] == pytest.approx(fd, abs=1e-6)


def test_masked_l1_rejects_bad_shapes():
    with pytest.raises(ValueError, match="dims"):
        masked_l1(np.zeros((2, 2, 3)), np.zeros((2, 2, 3)), np.zeros((3, 3)))


def test_residual_image_is_channel_mean_abs():
    a = np.zeros((1, 1, 3))
    b = np.array([[[0.3, -0.3, 0.6]]])
    assert residual_image(a, b)[0, 0] == pytest.approx(0.4)


# --- metrics -------------------------------------------------------------------


def test_psnr_identical_images_cap():
    img = np.full((4, 4, 3), 0.25)
    assert psnr(img, img) == 99.0


def test_psnr_closed_form():
    a = np.zeros((2, 2, 3))
    b = np.full((2, 2, 3), 0.5)  # MSE = 0.25
    assert psnr(a, b) == pytest.approx(10 * np.log10(4.0))


def test_mask_iou_examples():
    a = np.zeros((4, 4), dtype=bool)
    b = np.zeros((4, 4), dtype=bool)
    assert mask_iou(a, b) == 1.0  # nothing flagged anywhere: agreement
    a[:2] = True
    assert mask_iou(a, a) == 1.0
    c = np.zeros((4, 4), dtype=bool)
    c[1:3] = True  # equal-area half overlap: 4 / 12
    assert mask_iou(a, c) == pytest.approx(1 / 3)
    assert mask_iou(a, b) == 0.0


# --- config and log -------------------------------------------------------------


def test_train_config_from_default_config_dict():
    cfg = TrainConfig.from_dict(default_config())
    assert cfg.steps == 3000
    assert cfg.mode == "none"
    assert cfg.kernel is None
    assert cfg.sls_hidden == (64, 64)
    assert cfg.lrs["means"] == pytest.approx(2e-3)
    assert cfg.mask.tau == pytest.approx(0.5)


def test_train_config_rejects_kernel_with_masking():
    with pytest.raises(ValueError, match="kernel"):
        TrainConfig(kernel="charbonnier", mode="trim")


def test_train_config_rejects_unknown_mode():
    with pytest.raises(ValueError, match="mode"):
        TrainConfig(mode="blur")


def test_log_rows_and_csv_format():
    log = TrainLog()
    log.append(0, 10.0, 0.5, 0.0, 40, 1.0)
    log.append(10, 12.25, 0.25, 0.5, 38, 0.75)
    csv = log.to_csv()
    lines = csv.strip().split("\n")
    assert lines[0] == "step,psnr,loss,iou,splats,alpha"
    assert lines[1] == "0,10.0,0.5,0.0,40,1.0"
    assert lines[2] == "10,12.25,0.25,0.5,38,0.75"
    with pytest.raises(ValueError, match="increase"):
        log.append(10, 1.0, 1.0, 0.0, 38, 0.5)


def test_latent_adam_matches_scalar_reference():
    opt = LatentAdam((2, 3), lr=0.1)
    latents = np.zeros((2, 3))
    g = np.array([1.0, -2.0, 0.5])
    opt.step(latents, 1, g)
    # first step: mhat = g, vhat = g^2, update = -lr * sign(g) (eps aside)
    expect = -0.1 * g / (np.abs(g) + 1e-8)
    assert latents[1] == pytest.approx(expect)
    assert np.all(latents[0] == 0.0)
    assert opt.t[0] == 0 and opt.t[1] == 1


# --- mask engine -----------------------------------------------------------------


def test_mask_engine_empty_histogram_falls_back_to_all_ones():
    ds = tiny_dataset(views=2, occupancy=0.2, seed=3)
    cfg = tiny_train_cfg(mode="trim")
    engine = MaskEngine(cfg, ds)
    resid = residual_image(ds.views[0].image, ds.views[0].clean)
    star = engine.mask_star(resid, 0)
    assert np.all(star == 1.0)
    engine.hist.update(resid)
    star2 = engine.mask_star(resid, 0)
    assert star2.min() == 0.0  # something gets trimmed once data exists


def test_mask_engine_sls_agg_votes_whole_clusters():
    ds = tiny_dataset(views=2, occupancy=0.25, seed=4)
    cfg = tiny_train_cfg(mode="sls_agg")
    engine = MaskEngine(cfg, ds)
    assert len(engine.clusters) == 2
    resid = residual_image(ds.views[0].image, ds.views[0].clean)
    engine.hist.update(resid)
    star = engine.mask_star(resid, 0)
    for cid in np.unique(engine.clusters[0]):
        vals = star[engine.clusters[0] == cid]
        assert np.all(vals == vals.flat[0])


def test_mask_engine_sls_mlp_learn_changes_the_mask():
    ds = tiny_dataset(views=2, occupancy=0.25, seed=5)
    cfg = tiny_train_cfg(mode="sls_mlp", sls_pe_degree=2)
    engine = MaskEngine(cfg, ds)
    resid = residual_image(ds.views[0].image, ds.views[0].clean)
    before = engine.mask_star(resid, 0)
    assert np.all((0.0 <= before) & (before <= 1.0))
    engine.hist.update(resid)
    engine.learn(resid, 0, step=0)
    frozen = engine.mask_star(resid, 0)
    assert np.array_equal(before, frozen)  # supervision gated until label_warmup
    engine.learn(resid, 0, step=cfg.sls_label_warmup)
    after = engine.mask_star(resid, 0)
    assert not np.array_equal(before, after)


# --- the loop ---------------------------------------------------------------------


def test_train_log_row_count_and_steps():
    ds = tiny_dataset(seed=6)
    cfg = tiny_train_cfg(steps=30, eval_every=10)
    _, log, _ = train(cfg, ds)
    assert log.steps == [0, 10, 20, 30]
    assert len(log.psnr) == 4
    assert all(np.isfinite(log.loss))


def test_train_fits_a_clean_scene():
    ds = tiny_dataset(seed=7)
    cfg = tiny_train_cfg(steps=150, eval_every=150, n_splats=60)
    _, log, _ = train(cfg, ds)
    assert log.psnr[-1] > log.psnr[0] + 3.0
    assert log.loss[-1] < log.loss[0]


def test_train_is_bitwise_deterministic():
    ds = tiny_dataset(views=3, occupancy=0.2, seed=8)
    cfg = tiny_train_cfg(steps=25, eval_every=5, mode="robust_filter")
    _, log_a, _ = train(cfg, ds)
    _, log_b, _ = train(cfg, ds)
    assert log_a.to_csv() == log_b.to_csv()
    assert log_a.psnr == log_b.psnr


def test_train_glo_path_runs_and_updates_latents():
    ds = tiny_dataset(views=3, seed=9)
    cfg = tiny_train_cfg(steps=12, eval_every=6, glo=True, glo_dim=4,
                         glo_hidden=8)
    model, _, _ = train(cfg, ds)
    assert model.glo_latents.shape == (3, 4)


def test_train_kernel_baseline_runs():
    ds = tiny_dataset(views=2, occupancy=0.2, seed=10)
    cfg = tiny_train_cfg(steps=12, eval_every=6, kernel="charbonnier",
                         kernel_scale=0.1)
    _, log, _ = train(cfg, ds)
    assert all(np.isfinite(log.loss))


def test_train_ubp_prunes_inside_window():
    ds = tiny_dataset(seed=11)
    cfg = tiny_train_cfg(steps=60, eval_every=20, n_splats=80,
                         ubp=True, ubp_start=10, ubp_stop=50, ubp_period=15,
                         ubp_kappa=6e-3)
    model, log, _ = train(cfg, ds)
    assert model.n_splats < 80
    assert log.splats[0] == 80
    assert log.splats[-1] == model.n_splats


def test_train_divergence_aborts_with_diagnostic():
    ds = tiny_dataset(views=1, seed=12)
    bad = ds.views[0].image.copy()
    bad[0, 0, 0] = np.nan
    poisoned = SceneDataset(
        views=[ViewRecord(image=bad, clean=ds.views[0].clean,
                          distractor_mask=ds.views[0].distractor_mask,
                          features=ds.views[0].features, view_id=0)],
        cfg=ds.cfg, seed=ds.seed)
    with pytest.raises(TrainDivergence, match="step 0"):
        train(tiny_train_cfg(steps=5, eval_every=5), poisoned)


def test_train_writes_outputs(tmp_path):
    ds = tiny_dataset(views=2, occupancy=0.2, seed=13)
    cfg = tiny_train_cfg(steps=10, eval_every=5, mode="trim")
    out = str(tmp_path / "run")
    model, log, _ = train(cfg, ds, out_dir=out)
    with open(os.path.join(out, "log.csv"), encoding="utf-8") as f:
        assert f.read() == log.to_csv()
    for tag in ("00000", "00005", "00010"):
        assert os.path.exists(os.path.join(out, "dumps", f"render_{tag}.png"))
        assert os.path.exists(os.path.join(out, "dumps", f"mask_{tag}.png"))
    loaded, hist, classifier, steps_done = load_checkpoint(
        os.path.join(out, "checkpoint.bin"))
    assert steps_done == 10
    assert classifier is None
    np.testing.assert_array_equal(loaded.means, model.means)
    np.testing.assert_array_equal(loaded.colors, model.colors)
    assert hist.total > 0


def test_checkpoint_roundtrip_with_glo_and_classifier(tmp_path):
    ds = tiny_dataset(views=2, occupancy=0.2, seed=14)
    cfg = tiny_train_cfg(steps=8, eval_every=4, mode="sls_mlp", glo=True,
                         glo_dim=4, glo_hidden=8, sls_pe_degree=2)
    model, _, engine = train(cfg, ds)
    path = str(tmp_path / "ck.bin")
    save_checkpoint(path, model, engine, 8)
    loaded, hist, classifier, steps_done = load_checkpoint(path)
    np.testing.assert_array_equal(loaded.glo_latents, model.glo_latents)
    np.testing.assert_array_equal(hist.buckets, engine.hist.buckets)
    assert steps_done == 8
    feats = engine.features[0]
    from robustsplat.semantic import mlp_mask
    np.testing.assert_allclose(mlp_mask(classifier, feats),
                               mlp_mask(engine.classifier, feats), atol=1e-12)
    # mapper survives too: rendering from the loaded model matches
    from robustsplat.splats import render
    w, h = ds.cfg.width, ds.cfg.height
    np.testing.assert_allclose(render(loaded, 1, w, h), render(model, 1, w, h),
                               atol=1e-12)


def test_evaluate_reports_per_view_and_identity():
    ds = tiny_dataset(views=3, occupancy=0.2, seed=15)
    cfg = tiny_train_cfg(steps=10, eval_every=10, mode="trim", glo=True,
                         glo_dim=4, glo_hidden=8)
    model, _, engine = train(cfg, ds)
    res = evaluate(model, ds, engine)
    assert len(res["psnr_per_view"]) == 3
    assert np.isfinite(res["psnr_identity"])
    assert 0.0 <= res["iou"] <= 1.0
    assert res["splats"] == model.n_splats
    assert evaluate(model, ds)["iou"] is None


def test_train_rejects_empty_dataset():
    ds = tiny_dataset(views=1, seed=16)
    empty = SceneDataset(views=[], cfg=ds.cfg, seed=0)
    with pytest.raises(ValueError, match="no views"):
        train(tiny_train_cfg(), empty)
