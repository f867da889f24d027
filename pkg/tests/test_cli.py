import os

import pytest

from robustsplat import cli
from robustsplat.trainer import TrainDivergence

GEN_ARGS = ["--scene.width", "32", "--scene.height", "32", "--scene.views", "2",
            "--scene.feature_dim", "4"]
TRAIN_ARGS = ["--train.steps", "10", "--train.eval_every", "5",
              "--train.splats", "40", "--glo.enabled", "false",
              "--sls.hidden", "8", "--sls.clusters", "12"]


def run_cli(argv):
    return cli.main(argv)


def make_dataset(tmp_path, preset="clean", extra=()):
    out = str(tmp_path / f"data_{preset}")
    code = run_cli(["generate", "--out", out, "--scene.preset", preset,
                    *GEN_ARGS, *extra])
    assert code == 0
    return out


def make_run(tmp_path, data, name="run", extra=()):
    out = str(tmp_path / name)
    code = run_cli(["train", "--data", data, "--out", out,
                    *TRAIN_ARGS, *extra])
    assert code == 0
    return out


def test_generate_writes_dataset_and_summary(tmp_path, capsys):
    out = make_dataset(tmp_path)
    printed = capsys.readouterr().out
    assert "views: 2" in printed
    assert "occupancy: 0.0000" in printed
    for name in ("view_0000.png", "clean_0001.png", "mask_0000.png",
                 "feat_0001.bin", "scene.cfg", "seed.txt", "preset.txt",
                 "gen.cfg"):
        assert os.path.exists(os.path.join(out, name))
    with open(os.path.join(out, "preset.txt"), encoding="utf-8") as f:
        assert f.read().strip() == "clean"


def test_generate_same_seed_is_byte_identical(tmp_path):
    a = str(tmp_path / "a")
    b = str(tmp_path / "b")
    for out in (a, b):
        assert run_cli(["generate", "--out", out, "--scene.preset", "easy",
                        *GEN_ARGS]) == 0
    for name in sorted(os.listdir(a)):
        with open(os.path.join(a, name), "rb") as fa, \
             open(os.path.join(b, name), "rb") as fb:
            assert fa.read() == fb.read(), name


def test_generate_occupancy_override_labels_custom(tmp_path):
    out = make_dataset(tmp_path, preset="easy", extra=["--scene.occupancy", "0.2"])
    with open(os.path.join(out, "preset.txt"), encoding="utf-8") as f:
        assert f.read().strip() == "custom"


def test_unknown_flag_exits_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run_cli(["generate", "--out", str(tmp_path / "x"), "--scene.nope", "1"])
    assert exc.value.code == 2


def test_bad_value_exits_2(tmp_path, capsys):
    code = run_cli(["generate", "--out", str(tmp_path / "x"),
                    "--scene.views", "two"])
    assert code == 2
    assert "config error" in capsys.readouterr().err


def test_train_writes_run_dir(tmp_path, capsys):
    data = make_dataset(tmp_path)
    run = make_run(tmp_path, data)
    printed = capsys.readouterr().out
    assert "psnr:" in printed and "splats: 40" in printed
    for name in ("log.csv", "checkpoint.bin", "run.cfg", "run_meta.txt"):
        assert os.path.exists(os.path.join(run, name))
    with open(os.path.join(run, "log.csv"), encoding="utf-8") as f:
        lines = f.read().strip().splitlines()
    assert len(lines) == 1 + 10 // 5 + 1  # header + eval rows + final row
    with open(os.path.join(run, "run_meta.txt"), encoding="utf-8") as f:
        meta = f.read()
    assert "preset = clean" in meta and "mode = none" in meta


def test_train_missing_dataset_exits_3(tmp_path, capsys):
    code = run_cli(["train", "--data", str(tmp_path / "nope"),
                    "--out", str(tmp_path / "run"), *TRAIN_ARGS])
    assert code == 3
    assert "data error" in capsys.readouterr().err


def test_train_kernel_plus_masking_exits_2(tmp_path, capsys):
    data = make_dataset(tmp_path)
    code = run_cli(["train", "--data", data, "--out", str(tmp_path / "run"),
                    *TRAIN_ARGS, "--loss.kernel", "l1", "--mask.mode", "trim"])
    assert code == 2


def test_cli_precedence_file_then_flag(tmp_path):
    data = make_dataset(tmp_path)
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("train.steps = 8\ntrain.splats = 40\nglo.enabled = false\n"
                   "train.eval_every = 4\nsls.hidden = 8\n")
    out = str(tmp_path / "run")
    assert run_cli(["train", "--data", data, "--out", out,
                    "--config", str(cfg), "--train.steps", "6",
                    "--train.eval_every", "3"]) == 0
    with open(os.path.join(out, "run.cfg"), encoding="utf-8") as f:
        resolved = f.read()
    assert "train.steps = 6" in resolved      # flag beats file
    assert "train.splats = 40" in resolved    # file beats default


def test_eval_reproduces_last_log_row(tmp_path, capsys):
    data = make_dataset(tmp_path, preset="easy")
    run = make_run(tmp_path, data, extra=["--mask.mode", "robust_filter"])
    capsys.readouterr()
    assert run_cli(["eval", "--run", run]) == 0
    printed = capsys.readouterr().out
    assert "reproduces log: yes" in printed
    with open(os.path.join(run, "log.csv"), encoding="utf-8") as f:
        last = f.read().strip().splitlines()[-1]
    assert last in printed


def test_eval_detects_tampered_log(tmp_path, capsys):
    data = make_dataset(tmp_path)
    run = make_run(tmp_path, data)
    log = os.path.join(run, "log.csv")
    with open(log, encoding="utf-8") as f:
        lines = f.read().strip().splitlines()
    lines[-1] = lines[-1].replace(lines[-1].split(",")[1], "12.5", 1)
    with open(log, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    assert run_cli(["eval", "--run", run]) == 3


def test_eval_corrupt_checkpoint_exits_3(tmp_path, capsys):
    data = make_dataset(tmp_path)
    run = make_run(tmp_path, data)
    ck = os.path.join(run, "checkpoint.bin")
    with open(ck, "rb") as f:
        blob = f.read()
    with open(ck, "wb") as f:
        f.write(blob[: len(blob) // 2])
    assert run_cli(["eval", "--run", run]) == 3
    assert "data error" in capsys.readouterr().err


def test_divergence_maps_to_exit_4(tmp_path, capsys, monkeypatch):
    data = make_dataset(tmp_path)

    def explode(*a, **kw):
        raise TrainDivergence("non-finite loss at step 3")

    monkeypatch.setattr(cli, "train", explode)
    code = run_cli(["train", "--data", data, "--out", str(tmp_path / "run"),
                    *TRAIN_ARGS])
    assert code == 4
    assert "divergence" in capsys.readouterr().err


def test_report_table_and_best_marker(tmp_path, capsys):
    data = make_dataset(tmp_path, preset="easy")
    run_none = make_run(tmp_path, data, name="rn")
    run_trim = make_run(tmp_path, data, name="rt", extra=["--mask.mode", "trim"])
    capsys.readouterr()
    csv_path = str(tmp_path / "report.csv")
    assert run_cli(["report", run_none, run_trim, "--csv", csv_path]) == 0
    printed = capsys.readouterr().out
    assert printed.count("easy") == 2
    assert printed.count("*") == 1
    with open(csv_path, encoding="utf-8") as f:
        lines = f.read().strip().splitlines()
    assert lines[0] == "preset,seed,mode,psnr,iou,splats,best"
    assert len(lines) == 3
    starred = [ln for ln in lines[1:] if ln.endswith("*")]
    assert len(starred) == 1
    best_psnr = max(float(ln.split(",")[3]) for ln in lines[1:])
    assert float(starred[0].split(",")[3]) == best_psnr


def test_report_missing_log_exits_3(tmp_path, capsys):
    os.makedirs(tmp_path / "empty_run", exist_ok=True)
    assert run_cli(["report", str(tmp_path / "empty_run")]) == 3


def test_sls_threads_env(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("SLS_THREADS", "1")
    assert run_cli(["generate", "--out", str(tmp_path / "d"), *GEN_ARGS,
                    "--scene.preset", "clean"]) == 0
    monkeypatch.setenv("SLS_THREADS", "lots")
    assert run_cli(["generate", "--out", str(tmp_path / "d2"), *GEN_ARGS]) == 2
    assert "SLS_THREADS" in capsys.readouterr().err


def test_mask_mode_sls_mlp_writes_mask_pngs(tmp_path):
    data = make_dataset(tmp_path, preset="easy")
    run = make_run(tmp_path, data, extra=["--mask.mode", "sls_mlp",
                                          "--sls.pe_degree", "2"])
    assert os.path.exists(os.path.join(run, "dumps", "mask_00000.png"))
    assert os.path.exists(os.path.join(run, "dumps", "render_00010.png"))
