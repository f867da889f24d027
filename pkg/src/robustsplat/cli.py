"""Command-line surface: generate / train / eval / report.

Every config key doubles as a flag (--mask.tau 0.7); precedence is
CLI > config file > default. Exit codes: 0 success, 2 config error,
3 data error, 4 numerical divergence.
"""

import argparse
import os
import sys

import numpy as np

from .config import SCHEMA, ConfigError, load_config, serialize_config
from .datagen import DatasetError, config_from_dict, generate_scene, load_dataset, save_dataset
from .masking import schedule_alpha
from .tensorio import TensorFormatError
from .trainer import (
    MaskEngine,
    TrainConfig,
    TrainDivergence,
    load_checkpoint,
    snapshot_metrics,
    train,
)

MODE_ORDER = ("none", "trim", "robust_filter", "sls_agg", "sls_mlp")


def _add_schema_flags(parser) -> None:
    for key, spec in SCHEMA.items():
        parser.add_argument(f"--{key}", dest=key, default=None, metavar="V",
                            help=f"{spec.help} (default {spec.default!r})")


def _collect_overrides(args) -> dict:
    raw = vars(args)
    return {key: raw[key] for key in SCHEMA if raw.get(key) is not None}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robustsplat",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesize a distractor dataset")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--config", default=None, help="config file path")
    _add_schema_flags(g)

    t = sub.add_parser("train", help="fit splats to a dataset")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="run output directory")
    t.add_argument("--config", default=None, help="config file path")
    _add_schema_flags(t)

    e = sub.add_parser("eval", help="recompute final metrics from a checkpoint")
    e.add_argument("--run", required=True, help="run directory from train")
    e.add_argument("--data", default=None,
                   help="dataset directory (default: the one recorded in the run)")

    r = sub.add_parser("report", help="join runs into a comparison table")
    r.add_argument("runs", nargs="+", help="run directories")
    r.add_argument("--csv", default=None, help="also write the table as CSV here")
    return p


def _measured_occupancy(ds) -> float:
    return float(np.mean([rec.distractor_mask.mean() for rec in ds.views]))


def cmd_generate(args) -> int:
    cfg = load_config(args.config, _collect_overrides(args))
    gcfg = config_from_dict(cfg)
    ds = generate_scene(cfg["scene.seed"], gcfg)
    save_dataset(ds, args.out)
    preset = cfg["scene.preset"] if cfg["scene.occupancy"] < 0 else "custom"
    with open(os.path.join(args.out, "preset.txt"), "w", encoding="utf-8") as f:
        f.write(preset + "\n")
    with open(os.path.join(args.out, "gen.cfg"), "w", encoding="utf-8") as f:
        f.write(serialize_config(cfg))
    print(f"dataset: {args.out}")
    print(f"views: {len(ds.views)}")
    print(f"occupancy: {_measured_occupancy(ds):.4f}")
    return 0


def _train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict(cfg)
    except ValueError as err:
        raise ConfigError(str(err)) from err


def _read_kv(path) -> dict:
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if "=" in line:
                key, value = line.split("=", 1)
                out[key.strip()] = value.strip()
    return out


def cmd_train(args) -> int:
    cfg = load_config(args.config, _collect_overrides(args))
    tcfg = _train_config(cfg)
    ds = load_dataset(args.data)
    preset_path = os.path.join(args.data, "preset.txt")
    if os.path.isfile(preset_path):
        with open(preset_path, encoding="utf-8") as f:
            preset = f.read().strip()
    else:
        preset = "custom"
    model, log, _ = train(tcfg, ds, out_dir=args.out)
    with open(os.path.join(args.out, "run.cfg"), "w", encoding="utf-8") as f:
        f.write(serialize_config(cfg))
    with open(os.path.join(args.out, "run_meta.txt"), "w", encoding="utf-8") as f:
        f.write(f"dataset = {os.path.abspath(args.data)}\n"
                f"preset = {preset}\n"
                f"scene_seed = {ds.seed}\n"
                f"train_seed = {tcfg.seed}\n"
                f"mode = {tcfg.mode}\n")
    print(f"run: {args.out}")
    print(f"steps: {log.steps[-1]}")
    print(f"psnr: {log.psnr[-1]:.2f}")
    print(f"iou: {log.iou[-1]:.3f}")
    print(f"splats: {model.n_splats}")
    return 0


def _final_row(tcfg: TrainConfig, model, ds, engine) -> str:
    mean_psnr, mean_loss, mean_iou = snapshot_metrics(model, ds, engine)
    alpha = schedule_alpha(tcfg.steps, tcfg.mask)
    return (f"{tcfg.steps},{mean_psnr!r},{mean_loss!r},{mean_iou!r},"
            f"{model.n_splats},{alpha!r}")


def cmd_eval(args) -> int:
    run_cfg = os.path.join(args.run, "run.cfg")
    if not os.path.isfile(run_cfg):
        raise DatasetError(f"not a run directory (missing run.cfg): {args.run}")
    cfg = load_config(run_cfg)
    tcfg = _train_config(cfg)
    data_dir = args.data
    if data_dir is None:
        meta = _read_kv(os.path.join(args.run, "run_meta.txt"))
        data_dir = meta.get("dataset")
        if not data_dir:
            raise DatasetError("run records no dataset path; pass --data")
    ds = load_dataset(data_dir)
    model, hist, classifier, steps_done = load_checkpoint(
        os.path.join(args.run, "checkpoint.bin"))
    if steps_done != tcfg.steps:
        raise DatasetError(f"checkpoint is from step {steps_done}, "
                           f"run config says {tcfg.steps}")
    engine = MaskEngine(tcfg, ds)
    engine.hist = hist
    if classifier is not None:
        engine.classifier = classifier
    row = _final_row(tcfg, model, ds, engine)
    print("step,psnr,loss,iou,splats,alpha")
    print(row)
    log_path = os.path.join(args.run, "log.csv")
    if os.path.isfile(log_path):
        with open(log_path, encoding="utf-8") as f:
            last = f.read().strip().splitlines()[-1]
        if row != last:
            print(f"logged row differs: {last}", file=sys.stderr)
            raise DatasetError("checkpoint does not reproduce the training log; "
                               "the dataset or run files were altered")
        print("reproduces log: yes")
    return 0


def cmd_report(args) -> int:
    rows = []
    for run in args.runs:
        meta = _read_kv(os.path.join(run, "run_meta.txt"))
        log_path = os.path.join(run, "log.csv")
        if not os.path.isfile(log_path):
            raise DatasetError(f"no log.csv under {run}")
        with open(log_path, encoding="utf-8") as f:
            last = f.read().strip().splitlines()[-1].split(",")
        rows.append({
            "preset": meta.get("preset", "custom"),
            "seed": int(meta.get("scene_seed", "0")),
            "mode": meta.get("mode", "?"),
            "psnr": float(last[1]),
            "iou": float(last[3]),
            "splats": int(last[4]),
        })
    best = {}
    for row in rows:
        key = row["preset"]
        if key not in best or row["psnr"] > best[key]:
            best[key] = row["psnr"]
    mode_rank = {m: i for i, m in enumerate(MODE_ORDER)}
    rows.sort(key=lambda r: (r["preset"], r["seed"],
                             mode_rank.get(r["mode"], len(mode_rank))))
    header = f"{'preset':<12} {'seed':>4} {'mode':<14} {'psnr':>7} {'iou':>6} {'splats':>6} best"
    print(header)
    lines = ["preset,seed,mode,psnr,iou,splats,best"]
    for row in rows:
        marker = "*" if row["psnr"] == best[row["preset"]] else ""
        print(f"{row['preset']:<12} {row['seed']:>4} {row['mode']:<14} "
              f"{row['psnr']:>7.2f} {row['iou']:>6.3f} {row['splats']:>6} {marker}")
        lines.append(f"{row['preset']},{row['seed']},{row['mode']},"
                     f"{row['psnr']!r},{row['iou']!r},{row['splats']},{marker}")
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
    return 0


def _apply_thread_cap() -> None:
    # best effort: the rasterizer is serial by design, but cap numba anyway
    raw = os.environ.get("SLS_THREADS")
    if not raw:
        return
    try:
        n = max(1, int(raw))
    except ValueError:
        raise ConfigError(f"SLS_THREADS must be an integer, got {raw!r}") from None
    try:
        import numba
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    except ImportError:
        pass


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _apply_thread_cap()
        return COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (DatasetError, TensorFormatError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return 3
    except TrainDivergence as err:
        print(f"divergence: {err}", file=sys.stderr)
        return 4
    except OSError as err:
        print(f"data error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
