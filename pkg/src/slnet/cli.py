"""Command-line surface: synth, train, eval, infer, bench, netscore.

Exit codes: 0 success, 1 usage/config error, 2 data or format error,
3 numeric failure (non-finite loss). All commands are deterministic for a
fixed seed. The SLNET_THREADS environment variable caps the worker threads
used to read dataset files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .backbone import ModelConfig, build_model
from .checkpoint import load_model, save_checkpoint
from .estimator import check_clouds
from .geom import PointCloud
from .netscore import (BenchConfig, EfficiencyRecord, count_params,
                       estimate_flops, measure_latency, measure_peak_memory,
                       netscore)
from .pointfile import FormatError, load_points, save_points
from .synth import SHAPE_NAMES, SynthSpec, synth_generate
from .train import (LossConfig, NumericError, OptimConfig, evaluate,
                    iou_metrics, metrics, softmax, train_classifier)


class UsageError(ValueError):
    """Bad arguments or config; maps to exit code 1."""


def worker_threads() -> int:
    env = os.environ.get("SLNET_THREADS", "1")
    try:
        return max(1, int(env))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# config files: one `key = value` per line, '#' comments, unknown keys fatal

def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise UsageError(f"expected a boolean, got {s!r}")


def _parse_ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(","))


CONFIG_KEYS = {
    # data
    "data": str,
    "n_points": int,
    "normalize": _parse_bool,
    # model
    "variant": str,
    "d": int,
    "k": int,
    "stage_depths": _parse_ints,
    "expansion": _parse_ints,
    "lrb_ratio": float,
    "embedding": str,
    "gmu_placement": str,
    "gmu_order": str,
    "sampling": str,
    "n_classes": int,
    # training
    "epochs": int,
    "batch_size": int,
    "lr": float,
    "lr_min": float,
    "momentum": float,
    "weight_decay": float,
    "ema_rho": float,
    "use_ema": _parse_bool,
    "loss": str,
    "label_smoothing": float,
    "focal_gamma": float,
    "seed": int,
    # output
    "out": str,
    "log": str,
}


def parse_config(path) -> dict:
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from e
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in CONFIG_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = CONFIG_KEYS[key](value)
        except (ValueError, UsageError) as e:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {e}") from e
    return values


def config_to_model(cfg: dict, n_classes: int) -> ModelConfig:
    from .backbone import PRESETS

    variant = cfg.get("variant", "tiny")
    if variant not in PRESETS:
        raise UsageError(f"unknown variant {variant!r} (use s, m or tiny)")
    kwargs = {}
    for key in ("d", "k", "stage_depths", "expansion", "lrb_ratio", "embedding",
                "gmu_placement", "gmu_order", "sampling", "n_points"):
        if key in cfg:
            kwargs[key] = cfg[key]
    kwargs["normalize_input"] = cfg.get("normalize", True)
    try:
        return PRESETS[variant](n_classes=n_classes, **kwargs)
    except ValueError as e:
        raise UsageError(str(e)) from e


# ---------------------------------------------------------------------------
# dataset directories

def _load_split(data_dir: Path, split: str, n_points: int, normalize: bool,
                seed: int) -> tuple[np.ndarray, np.ndarray]:
    split_dir = data_dir / split
    files = sorted(split_dir.glob("*.slpc")) + sorted(split_dir.glob("*.csv"))
    if not files:
        raise FormatError(f"no point files under {split_dir}")
    with ThreadPoolExecutor(max_workers=worker_threads()) as pool:
        clouds = list(pool.map(load_points, files))
    labels = []
    for f, c in zip(files, clouds):
        if c.labels is None:
            raise FormatError(f"{f} carries no labels")
        labels.append(int(np.asarray(c.labels).reshape(-1)[0]))
    arr = check_clouds([c.coords for c in clouds], n_points, normalize, seed)
    return arr, np.asarray(labels, dtype=np.int64)


def _read_classes(data_dir: Path) -> list[str]:
    path = data_dir / "classes.txt"
    if not path.exists():
        raise FormatError(f"missing {path}")
    return [line.strip() for line in path.read_text().splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    classes = tuple(args.classes.split(","))
    spec = SynthSpec(classes=classes, n_points=args.n,
                     per_class=args.per_class, noise=args.noise, seed=args.seed)
    train_x, train_y, test_x, test_y = synth_generate(spec)
    out = Path(args.out)
    for split, (xs, ys) in (("train", (train_x, train_y)),
                            ("test", (test_x, test_y))):
        (out / split).mkdir(parents=True, exist_ok=True)
        for i, (cloud, label) in enumerate(zip(xs, ys)):
            labels = np.full(cloud.shape[0], label, dtype=np.int32)
            save_points(out / split / f"{split}_{i:05d}.slpc",
                        PointCloud(coords=cloud, labels=labels))
    (out / "classes.txt").write_text("\n".join(classes) + "\n")
    print(f"wrote {len(train_x)} train / {len(test_x)} test clouds to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = parse_config(args.config)
    if "data" not in cfg:
        raise UsageError("config must set 'data'")
    data_dir = Path(cfg["data"])
    classes = _read_classes(data_dir)
    n_classes = cfg.get("n_classes", len(classes))
    model_cfg = config_to_model(cfg, n_classes)
    seed = cfg.get("seed", 0)
    train_x, train_y = _load_split(data_dir, "train", model_cfg.n_points,
                                   model_cfg.normalize_input, seed)
    test_x, test_y = _load_split(data_dir, "test", model_cfg.n_points,
                                 model_cfg.normalize_input, seed)
    model = build_model(model_cfg, seed=seed)
    optim = OptimConfig(lr0=cfg.get("lr", 0.1), epochs=cfg.get("epochs", 60),
                        momentum=cfg.get("momentum", 0.9),
                        weight_decay=cfg.get("weight_decay", 1e-4),
                        ema_rho=cfg.get("ema_rho", 0.95),
                        lr_min=cfg.get("lr_min", 0.0),
                        batch_size=cfg.get("batch_size", 50),
                        use_ema=cfg.get("use_ema", True))
    freqs = np.bincount(train_y, minlength=n_classes)
    loss_cfg = LossConfig(kind=cfg.get("loss", "ce"),
                          label_smoothing=cfg.get("label_smoothing", 0.0),
                          gamma=cfg.get("focal_gamma", 2.0),
                          class_freqs=freqs if cfg.get("loss") == "wce" else None)
    log_path = cfg.get("log")
    log_file = open(log_path, "w") if log_path else None

    def log(line):
        print(line)
        if log_file:
            log_file.write(line + "\n")

    try:
        result = train_classifier(model, train_x, train_y, optim, loss_cfg,
                                  seed=seed, log=log)
        oa_raw, macc_raw = metrics(evaluate(model, test_x, test_y))
        log(f"final raw_oa={oa_raw:.4f} raw_macc={macc_raw:.4f}")
        if result.ema is not None:
            result.ema.swap_in()
            oa, macc = metrics(evaluate(model, test_x, test_y))
            log(f"final ema_oa={oa:.4f} ema_macc={macc:.4f}")
            result.ema.swap_out()
        out_path = cfg.get("out", "model.slck")
        save_checkpoint(out_path, model, ema=result.ema)
        log(f"checkpoint saved to {out_path}")
    finally:
        if log_file:
            log_file.close()
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.checkpoint, use_ema=not args.raw_weights)
    data_dir = Path(args.data)
    cfg = model.config
    if cfg.head == "classify":
        xs, ys = _load_split(data_dir, args.split, cfg.n_points,
                             cfg.normalize_input, args.seed)
        oa, macc = metrics(evaluate(model, xs, ys, batch_size=args.batch))
        print(f"oa={oa:.4f} macc={macc:.4f}")
    else:
        ins, cls = _eval_segmentation(model, data_dir, args.split, args.seed)
        print(f"ins_iou={ins:.4f} cls_iou={cls:.4f}")
    return 0


def _eval_segmentation(model, data_dir: Path, split: str, seed: int):
    meta_path = data_dir / "seg_meta.json"
    if not meta_path.exists():
        raise FormatError(f"missing {meta_path}")
    meta = json.loads(meta_path.read_text())
    part_ranges = {int(k): tuple(v) for k, v in meta["part_ranges"].items()}
    split_dir = data_dir / split
    files = sorted(split_dir.glob("*.slpc"))
    if not files:
        raise FormatError(f"no point files under {split_dir}")
    preds, truths, cats = [], [], []
    cfg = model.config
    for f in files:
        cloud = load_points(f)
        if cloud.labels is None:
            raise FormatError(f"{f} carries no per-point labels")
        cat = int(meta["file_categories"][f.name])
        coords = check_clouds([cloud.coords], cfg.n_points,
                              cfg.normalize_input, seed)
        onehot = np.zeros((1, cfg.n_categories), dtype=np.float32)
        onehot[0, cat] = 1.0
        logits = model.forward_segment(coords, onehot, sample_seed=0)
        # score the resampled points against their source labels
        preds.append(logits.data[0].argmax(axis=1))
        idx_nearest = _nearest_labels(cloud, coords[0])
        truths.append(idx_nearest)
        cats.append(cat)
    return iou_metrics(preds, truths, cats, part_ranges)


def _nearest_labels(cloud: PointCloud, resampled: np.ndarray) -> np.ndarray:
    from .geom import knn, normalize_cloud

    ref = normalize_cloud(cloud.coords)
    nbr = knn(resampled, ref, 1)
    return np.asarray(cloud.labels)[nbr.neighbors[:, 0]]


def cmd_infer(args) -> int:
    model = load_model(args.checkpoint, use_ema=not args.raw_weights)
    cloud = load_points(args.input)
    cfg = model.config
    coords = check_clouds([cloud.coords], cfg.n_points, cfg.normalize_input, 0)
    logits = model.forward(coords, sample_seed=0)
    probs = softmax(logits.data)[0]
    order = np.argsort(-probs)[:args.topk]
    for rank, idx in enumerate(order, 1):
        print(f"{rank} class={idx} prob={probs[idx]:.4f}")
    return 0


def cmd_bench(args) -> int:
    model = load_model(args.checkpoint)
    if args.acc is None and args.data is None:
        raise UsageError("bench needs --acc or --data to fill the accuracy column")
    if args.acc is not None:
        acc = args.acc
    else:
        cfg = model.config
        xs, ys = _load_split(Path(args.data), "test", cfg.n_points,
                             cfg.normalize_input, 0)
        acc = 100.0 * metrics(evaluate(model, xs, ys))[0]
    bench = BenchConfig(warmup_iters=args.warmup, timed_iters=args.iters,
                        batch=args.batch, n_points=args.points)
    params_m = count_params(model) / 1e6
    flops_g = estimate_flops(model, n_points=args.points) / 1e9
    latency = measure_latency(model, bench)
    memory = measure_peak_memory(model, bench)
    name = args.name or Path(args.checkpoint).stem
    print("name,acc,params_m,flops_g,latency_ms,mem_mb")
    print(f"{name},{acc:.2f},{params_m:.4f},{flops_g:.4f},"
          f"{latency:.3f},{memory:.2f}")
    return 0


def _read_records_csv(path) -> list[EfficiencyRecord]:
    lines = [l.strip() for l in Path(path).read_text().splitlines() if l.strip()]
    if not lines:
        raise FormatError(f"{path} is empty")
    header = [h.strip() for h in lines[0].split(",")]
    expected = ["name", "acc", "params_m", "flops_g", "latency_ms", "mem_mb"]
    if header != expected:
        raise FormatError(
            f"{path}: expected header {','.join(expected)!r}, got {lines[0]!r}")
    records = []
    for lineno, line in enumerate(lines[1:], 2):
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 6:
            raise FormatError(f"{path}:{lineno}: expected 6 columns")
        name, acc, p, m, t, r = parts
        try:
            records.append(EfficiencyRecord(
                name=name, a=float(acc), p=float(p), m=float(m),
                t=float(t) if t else None, r=float(r) if r else None))
        except ValueError as e:
            raise FormatError(f"{path}:{lineno}: {e}") from e
    return records


def cmd_netscore(args) -> int:
    records = _read_records_csv(args.infile)
    rows = []
    for rec in records:
        score = netscore(rec, delta=0)
        plus = (netscore(rec, delta=1)
                if rec.t is not None and rec.r is not None else None)
        rows.append((rec.name, score, plus))
    rows.sort(key=lambda r: -r[1])
    print(f"{'name':<24}{'netscore':>10}{'netscore_plus':>15}")
    for name, score, plus in rows:
        plus_str = f"{plus:.2f}" if plus is not None else "-"
        print(f"{name:<24}{score:>10.2f}{plus_str:>15}")
    if args.out:
        with open(args.out, "w") as f:
            f.write("name,netscore,netscore_plus\n")
            for name, score, plus in rows:
                f.write(f"{name},{score:.2f},"
                        f"{'' if plus is None else f'{plus:.2f}'}\n")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slnet", description="Point-cloud backbone toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    p.add_argument("--classes", default="sphere,cube,cylinder,torus",
                   help=f"comma list from {','.join(SHAPE_NAMES)}")
    p.add_argument("--n", type=int, default=256, help="points per cloud")
    p.add_argument("--per-class", type=int, default=125)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train from a key=value config file")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--raw-weights", action="store_true",
                   help="evaluate raw weights even when EMA is stored")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="top-k classes for one point file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--topk", type=int, default=3)
    p.add_argument("--raw-weights", action="store_true")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("bench", help="emit an efficiency record CSV row")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--points", type=int, default=1024)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--acc", type=float, default=None,
                   help="accuracy percent for the record")
    p.add_argument("--data", default=None,
                   help="dataset dir; evaluates test OA when --acc is absent")
    p.add_argument("--name", default=None)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("netscore", help="score an efficiency-record CSV")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_netscore)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (FormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
