"""Unified command-line entry point.

Subcommands: transmission, synth, train, predict, uncertainty, eval, report.
Every run writes its fully resolved configuration next to its outputs, and
any subcommand re-run with `--config <that file>` reproduces the outputs
bit-identically. Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .imagecore import LN2, GrayMap, read_png_gray, read_png_rgb, write_png
from .metrics import adaptive_threshold, ece, f_measure, mean_defined, mmse
from .synthdata import CorruptDatasetError, generate, make_specs, read_dataset, write_dataset
from .toynet import InvalidCheckpointError, TrainConfig, load_checkpoint, mc_sample, predict, train
from .transmission import TransmissionConfig, estimate_transmission_with_light
from .uncertainty import decompose


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _worker_count(n_items: int) -> int:
    env = os.environ.get("SMOKELENS_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(cap, n_items))


def _parallel_map(fn, items: list):
    """Order-preserving map, fanned out across processes when allowed."""
    workers = _worker_count(len(items))
    if workers <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _resolve(args, defaults: dict, required: tuple = ()) -> dict:
    """Merge hard defaults, then --config contents, then explicit flags."""
    resolved = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config file {config_path}: {e}")
        for k in defaults:
            if k in loaded:
                resolved[k] = loaded[k]
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            resolved[k] = v
    missing = [k for k in required if resolved.get(k) is None]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return resolved


def _echo_config(command: str, resolved: dict, path: Path) -> None:
    payload = {"command": command, **resolved}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


# -- synth ---------------------------------------------------------------


def _cmd_synth(args) -> int:
    cfg = _resolve(
        args,
        {
            "n": 200,
            "size": 64,
            "seed": 1,
            "out": None,
            "opacity_lo": 0.2,
            "opacity_hi": 0.9,
            "haze_max": 0.3,
        },
        required=("out",),
    )
    out = Path(cfg["out"])
    specs = make_specs(
        cfg["n"], cfg["seed"], cfg["size"], cfg["size"],
        opacity_lo=cfg["opacity_lo"], opacity_hi=cfg["opacity_hi"], haze_max=cfg["haze_max"],
    )
    scenes = _parallel_map(generate, specs)
    write_dataset(scenes, specs, out)
    _echo_config("synth", cfg, out / "synth_config.json")
    print(f"wrote {len(scenes)} scenes to {out}")
    return 0


# -- transmission ----------------------------------------------------------


def _cmd_transmission(args) -> int:
    cfg = _resolve(
        args,
        {"in_path": None, "out": None, "k": 0, "radius": 8, "eps": 1e-3, "fraction": 0.001},
        required=("in_path", "out"),
    )
    img = read_png_rgb(cfg["in_path"])
    k = cfg["k"] if cfg["k"] else TransmissionConfig.for_size(img.height, img.width).k
    tc = TransmissionConfig(k=k, fraction=cfg["fraction"], radius=cfg["radius"], eps=cfg["eps"])
    t, light = estimate_transmission_with_light(img, tc)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_png(t, out)
    sidecar = Path(str(out) + ".txt")
    sidecar.write_text(
        "atmospheric_light_r {}\natmospheric_light_g {}\natmospheric_light_b {}\n"
        "k {}\nfraction {}\nradius {}\neps {}\n".format(
            _fmt(light.r), _fmt(light.g), _fmt(light.b), k, _fmt(tc.fraction), tc.radius, _fmt(tc.eps)
        )
    )
    _echo_config("transmission", cfg, Path(str(out) + ".config.json"))
    print(f"wrote transmission map to {out}")
    return 0


# -- train ---------------------------------------------------------------


def _cmd_train(args) -> int:
    cfg = _resolve(
        args,
        {
            "data": None,
            "out": None,
            "seed": 0,
            "epochs": 8,
            "batch_size": 1,
            "B": 10,
            "lambda1": 0.3,
            "lambda2": 0.01,
            "lr_scale": 100.0,
            "no_trans": False,
            "no_calib": False,
            "plain_entropy": False,
        },
        required=("data", "out"),
    )
    scenes, _ = read_dataset(cfg["data"])
    train_cfg = TrainConfig(
        seed=cfg["seed"],
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        mc_samples=cfg["B"],
        lambda1=0.0 if cfg["no_trans"] else cfg["lambda1"],
        lambda2=0.0 if cfg["no_calib"] else cfg["lambda2"],
        entropy_mode="plain" if cfg["plain_entropy"] else "calibrated",
        lr_scale=cfg["lr_scale"],
    )
    result = train(scenes, train_cfg)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    result.model.save(out)
    _echo_config("train", cfg, Path(str(out) + ".config.json"))
    print(f"trained {train_cfg.epochs} epochs on {len(scenes)} scenes; "
          f"final loss {result.loss_trace[-1]:.4f}; checkpoint at {out}")
    return 0


# -- predict ---------------------------------------------------------------


def _input_images(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise FileNotFoundError(f"no such file or directory: {path}")
    named = sorted(path.glob("image_*.png"))
    if named:
        return named
    return sorted(
        p for p in path.glob("*.png")
        if not p.name.startswith(("mask_", "alpha_"))
    )


def _write_uncertainty(m: GrayMap, stem: Path, suffix: str) -> None:
    write_png(GrayMap(np.clip(m.data / LN2, 0.0, 1.0)), Path(f"{stem}_{suffix}.png"))
    np.save(f"{stem}_{suffix}.npy", m.data.astype(np.float32))


def _cmd_predict(args) -> int:
    cfg = _resolve(
        args,
        {"ckpt": None, "in_path": None, "out_dir": None},
        required=("ckpt", "in_path", "out_dir"),
    )
    model = load_checkpoint(cfg["ckpt"])
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    images = _input_images(Path(cfg["in_path"]))
    if not images:
        raise FileNotFoundError(f"no input PNGs under {cfg['in_path']}")
    for img_path in images:
        out = predict(model, read_png_rgb(img_path))
        stem = out_dir / img_path.stem
        write_png(out.probability, Path(f"{stem}_prob.png"))
        _write_uncertainty(out.predictive, stem, "up")
        _write_uncertainty(out.aleatoric, stem, "ua")
    _echo_config("predict", cfg, out_dir / "predict_config.json")
    print(f"wrote predictions for {len(images)} image(s) to {out_dir}")
    return 0


# -- uncertainty -----------------------------------------------------------


def _cmd_uncertainty(args) -> int:
    cfg = _resolve(
        args,
        {"ckpt": None, "in_path": None, "B": 10, "seed": 0, "out_dir": None},
        required=("ckpt", "in_path", "out_dir"),
    )
    model = load_checkpoint(cfg["ckpt"])
    img_path = Path(cfg["in_path"])
    samples = mc_sample(model, read_png_rgb(img_path), cfg["B"], cfg["seed"])
    maps = decompose(samples)
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = out_dir / img_path.stem
    _write_uncertainty(maps.predictive, stem, "up")
    _write_uncertainty(maps.aleatoric, stem, "ua")
    _write_uncertainty(maps.epistemic, stem, "ue")
    _echo_config("uncertainty", cfg, out_dir / "uncertainty_config.json")
    print(f"wrote uncertainty maps (B={cfg['B']}) to {out_dir}")
    return 0


# -- eval / report -----------------------------------------------------------


def _metric_files(pred_dir: Path, gt_dir: Path) -> list[tuple[Path, Path]]:
    preds = sorted(pred_dir.glob("*_prob.png")) or sorted(pred_dir.glob("*.png"))
    gts = sorted(gt_dir.glob("mask_*.png")) or sorted(gt_dir.glob("*.png"))
    if not preds or len(preds) != len(gts):
        raise CorruptDatasetError(
            f"prediction/ground-truth mismatch: {len(preds)} predictions vs {len(gts)} masks"
        )
    return list(zip(preds, gts))


def _eval_pair(job):
    pred_path, gt_path, beta2, threshold, adaptive, bins = job
    pred = read_png_gray(pred_path)
    gt = GrayMap((read_png_gray(gt_path).data > 0.5).astype(np.float64))
    if adaptive:
        threshold = adaptive_threshold(pred)
    report = ece(pred, gt, bins)
    return (
        pred_path.name,
        gt_path.name,
        mmse([pred], [gt]),
        f_measure(pred, gt, beta2=beta2, threshold=threshold),
        report.ece,
    )


def _cmd_eval(args) -> int:
    cfg = _resolve(
        args,
        {
            "pred_dir": None,
            "gt_dir": None,
            "out": None,
            "beta2": 0.3,
            "threshold": 0.5,
            "adaptive": False,
            "bins": 10,
        },
        required=("pred_dir", "gt_dir", "out"),
    )
    pairs = _metric_files(Path(cfg["pred_dir"]), Path(cfg["gt_dir"]))
    jobs = [(p, g, cfg["beta2"], cfg["threshold"], cfg["adaptive"], cfg["bins"]) for p, g in pairs]
    rows = _parallel_map(_eval_pair, jobs)

    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["prediction", "ground_truth", "mse", "f_beta", "ece"])
        for name, gt_name, mse_v, f_v, ece_v in rows:
            writer.writerow([name, gt_name, _fmt(mse_v), "" if f_v is None else _fmt(f_v), _fmt(ece_v)])
        writer.writerow([
            "aggregate", "",
            _fmt(float(np.mean([r[2] for r in rows]))),
            _fmt(mean_defined([r[3] for r in rows])),
            _fmt(float(np.mean([r[4] for r in rows]))),
        ])
    _echo_config("eval", cfg, Path(str(out) + ".config.json"))
    print(f"wrote metrics for {len(rows)} image(s) to {out}")
    return 0


def _cmd_report(args) -> int:
    cfg = _resolve(
        args,
        {"pred_dir": None, "gt_dir": None, "out": None, "bins": 10},
        required=("pred_dir", "gt_dir", "out"),
    )
    pairs = _metric_files(Path(cfg["pred_dir"]), Path(cfg["gt_dir"]))
    m = cfg["bins"]
    counts = np.zeros(m, dtype=np.int64)
    conf_sums = np.zeros(m)
    acc_sums = np.zeros(m)
    edges = None
    for pred_path, gt_path in pairs:
        pred = read_png_gray(pred_path)
        gt = GrayMap((read_png_gray(gt_path).data > 0.5).astype(np.float64))
        report = ece(pred, gt, m)
        edges = [(b.low, b.high) for b in report.bins]
        for i, b in enumerate(report.bins):
            counts[i] += b.count
            conf_sums[i] += b.count * b.mean_confidence
            acc_sums[i] += b.count * b.mean_accuracy

    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_low", "bin_high", "count", "mean_confidence", "mean_accuracy", "abs_gap"])
        for i in range(m):
            conf = conf_sums[i] / counts[i] if counts[i] else 0.0
            acc = acc_sums[i] / counts[i] if counts[i] else 0.0
            writer.writerow([
                _fmt(edges[i][0]), _fmt(edges[i][1]), int(counts[i]),
                _fmt(conf), _fmt(acc), _fmt(abs(acc - conf)),
            ])
    _echo_config("report", cfg, Path(str(out) + ".config.json"))
    print(f"wrote reliability table to {out}")
    return 0


# -- parser -----------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="smokelens", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, helptext):
        p = sub.add_parser(name, help=helptext)
        p.set_defaults(func=fn)
        p.add_argument("--config", help="JSON config echoed by a previous run")
        return p

    p = add("synth", _cmd_synth, "generate a synthetic smoke dataset")
    p.add_argument("--n", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--opacity-lo", dest="opacity_lo", type=float)
    p.add_argument("--opacity-hi", dest="opacity_hi", type=float)
    p.add_argument("--haze-max", dest="haze_max", type=float)

    p = add("transmission", _cmd_transmission, "estimate a transmission map from a PNG")
    p.add_argument("--in", dest="in_path")
    p.add_argument("--out")
    p.add_argument("--k", type=int)
    p.add_argument("--radius", type=int)
    p.add_argument("--eps", type=float)
    p.add_argument("--fraction", type=float)

    p = add("train", _cmd_train, "train the segmentation model on a dataset directory")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--B", type=int)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--lr-scale", dest="lr_scale", type=float)
    p.add_argument("--no-trans", dest="no_trans", action="store_const", const=True)
    p.add_argument("--no-calib", dest="no_calib", action="store_const", const=True)
    p.add_argument("--plain-entropy", dest="plain_entropy", action="store_const", const=True)

    p = add("predict", _cmd_predict, "deterministic prediction + sampling-free uncertainty")
    p.add_argument("--ckpt")
    p.add_argument("--in", dest="in_path")
    p.add_argument("--out-dir", dest="out_dir")

    p = add("uncertainty", _cmd_uncertainty, "Monte-Carlo uncertainty decomposition for one image")
    p.add_argument("--ckpt", "--model", dest="ckpt")
    p.add_argument("--in", dest="in_path")
    p.add_argument("--B", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", dest="out_dir")

    p = add("eval", _cmd_eval, "per-image and aggregate mMse / F-beta / ECE")
    p.add_argument("--pred-dir", dest="pred_dir")
    p.add_argument("--gt-dir", dest="gt_dir")
    p.add_argument("--out")
    p.add_argument("--beta2", type=float)
    p.add_argument("--threshold", type=float)
    p.add_argument("--adaptive", action="store_const", const=True,
                   help="binarize at twice the per-image prediction mean")
    p.add_argument("--bins", type=int)

    p = add("report", _cmd_report, "aggregate reliability-diagram bin table")
    p.add_argument("--pred-dir", dest="pred_dir")
    p.add_argument("--gt-dir", dest="gt_dir")
    p.add_argument("--out", "--reliability", dest="out")
    p.add_argument("--bins", type=int)

    return parser


def dispatch(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as e:  # -h/--help
        return int(e.code or 0)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (CorruptDatasetError, InvalidCheckpointError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
