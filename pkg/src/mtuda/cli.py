"""Command line: data generation, training, evaluation, demos and multi-seed reports.

Exit codes: 0 ok, 2 usage/config error, 3 data error, 4 training divergence.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import platform
import statistics
import sys
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__, kernels
from .aalp import fuse_attention, select_patch
from .data import (DatasetFormatError, GeneratorConfig, GeneratorConfigError, firewall,
                   gen_synthetic_domains, load_dataset, read_image, save_dataset, write_image)
from .experiment import desk_config
from .style import stylize
from .trainer import (LOSS_NAMES, LossDivergence, TrainConfig, evaluate, load_checkpoint,
                      models_from_checkpoint, patch_geometry, recompute_selection, save_checkpoint, train)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("mtuda")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
CSV_COLUMNS = ("epoch", *LOSS_NAMES, "selection_score", "source_val_metric")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# config


def read_config(path):
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"malformed config {path}: {exc}") from exc


def train_config_from(raw: dict, preset: str = "reference") -> TrainConfig:
    """``[train]`` table layered over a preset (``reference`` defaults or ``desk``)."""
    base = desk_config() if preset == "desk" else TrainConfig()
    merged = base.to_dict()
    section = raw.get("train", {})
    for key, value in section.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = {**merged[key], **value}
        else:
            merged[key] = value
    try:
        return TrainConfig.from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad [train] config: {exc}") from exc


def generator_config_from(raw: dict) -> GeneratorConfig:
    try:
        return GeneratorConfig.from_dict(raw.get("generator", {})).validate()
    except (TypeError, GeneratorConfigError) as exc:
        raise UsageError(f"bad [generator] config: {exc}") from exc


def code_hash() -> str:
    """Content hash over the package sources."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(list(root.glob("*.py")) + list(root.glob("*.pyx"))):
        h.update(p.name.encode())
        h.update(b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()


def environment() -> dict:
    return {"python": platform.python_version(), "platform": platform.platform(),
            "torch": torch.__version__, "numpy": np.__version__,
            "kernel_backend": kernels.BACKEND, "package_version": __version__}


def write_json_atomic(path, obj):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True))
    os.replace(tmp, path)


# --------------------------------------------------------------------------
# tables


def format_table(headers, rows) -> str:
    cells = [list(map(str, headers))] + [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4f}"
    return "-" if v is None else str(v)


def summarize(values) -> dict:
    """Mean and sample standard deviation (``None`` for fewer than two values)."""
    vals = [float(v) for v in values]
    return {"mean": statistics.fmean(vals), "std": statistics.stdev(vals) if len(vals) > 1 else None,
            "n": len(vals), "values": vals}


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    cfg = generator_config_from(read_config(args.config))
    source, target = gen_synthetic_domains(cfg, args.seed)
    out = Path(args.out)
    save_dataset(source + target, out)
    write_json_atomic(out / "generator.json", {"seed": args.seed, "config": dataclasses.asdict(cfg)})
    print(f"wrote {len(source)} source and {len(target)} target slices to {out}")
    return EXIT_OK


def _write_epochs_csv(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for rep in history:
            w.writerow([rep.epoch, *(repr(float(rep.losses[n])) for n in LOSS_NAMES),
                        repr(float(rep.selection_score)), repr(float(rep.source_val_metric))])


def cmd_train(args):
    raw = read_config(args.config)
    config = train_config_from(raw, args.preset)
    if args.epochs is not None:
        config = dataclasses.replace(config, epochs=args.epochs,
                                     warmup_epochs=min(config.warmup_epochs, args.epochs))
    mode = "uda"
    if args.supervised:
        # upper bound: labeled target data stands in for the source domain
        mode = "supervised"
        if not args.target:
            raise UsageError("--supervised needs --target")
        source = load_dataset(args.target, "target")
        if any(c.mask is None for c in source):
            raise DatasetFormatError("supervised training needs target masks", args.target)
        target = []
        config = dataclasses.replace(config, warmup_epochs=config.epochs)
    else:
        if not args.source:
            raise UsageError("--source is required")
        source = load_dataset(args.source, "source")
        # target masks are never opened here; the firewall catches any stray access
        target = firewall(load_dataset(args.target, "target", masks=False)) if args.target else []
        if args.source_only:
            mode = "source_only"
            config = dataclasses.replace(config, warmup_epochs=config.epochs)
        elif not target:
            raise UsageError("adaptation needs --target (or pass --source-only)")
    if not source:
        raise DatasetFormatError("no training images found", args.source or args.target)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({"mode": mode, "train": config.to_dict()}, indent=2,
                                                sort_keys=True, default=list))
    started = time.time()
    try:
        result = train(config, source, target, seed=args.seed)
    except LossDivergence as exc:
        if exc.last_good is not None:
            save_checkpoint(out / "last_good.npz", exc.last_good)
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    save_checkpoint(out / "best.npz", result.best_checkpoint)
    _write_epochs_csv(out / "epochs.csv", result.history)
    header = result.best_checkpoint["header"]
    manifest = {
        "mode": mode,
        "config": config.to_dict(),
        "config_hash": header["config_hash"],
        "code_hash": code_hash(),
        "seed": args.seed,
        "started": started,
        "finished": time.time(),
        "epochs": [r.to_dict() for r in result.history],
        "best": {"epoch": header["epoch"], "selection_score": header["selection_score"],
                 "source_val_metric": header["source_val_metric"], "metric_pseudo": header["metric_pseudo"]},
        "environment": environment(),
        "target_mask_reads": sum(getattr(c, "mask_reads", 0) for c in target),
    }
    write_json_atomic(out / "manifest.json", manifest)
    print(f"best epoch {header['epoch']} selection score {header['selection_score']:.4f} -> {out / 'best.npz'}")
    return EXIT_OK


def cmd_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    student, teacher, config = models_from_checkpoint(ckpt)
    model = teacher if args.model == "teacher" else student
    out = {"checkpoint": str(args.checkpoint), "epoch": ckpt["header"]["epoch"], "seed": ckpt["header"]["seed"]}
    if args.data:
        cases = load_dataset(args.data, args.domain)
        if args.split != "all":
            keep = set(ckpt["header"]["split"][args.split])
            cases = [c for c in cases if c.case_id in keep]
        cases = [c for c in cases if c.mask is not None]
        if not cases:
            raise DatasetFormatError("no labeled images to evaluate", args.data)
        rep = evaluate(model, cases, config.network.num_classes, config.eval_batch_size,
                       epoch=ckpt["header"]["epoch"], seed=ckpt["header"]["seed"])
        out["report"] = rep.to_dict()
        out["num_images"] = len(cases)
    if args.source:
        source = load_dataset(args.source, "source")
        target = firewall(load_dataset(args.target, "target", masks=False)) if args.target else []
        score, m_src, m_pseudo = recompute_selection(ckpt, source, target)
        out["selection"] = {"selection_score": score, "source_val_metric": m_src, "metric_pseudo": m_pseudo}
    if len(out) == 3:
        raise UsageError("eval needs --data and/or --source")
    if args.save:
        write_json_atomic(args.save, out)
    print(json.dumps(out, indent=2))
    if "report" in out:
        r = out["report"]
        rows = [[c, r["per_class_iou"][c], r["per_class_dice"][c]] for c in range(len(r["per_class_iou"]))]
        print(format_table(["class", "IoU", "Dice"], rows))
        print(f"foreground IoU {r['foreground_iou']:.4f}  mean Dice {r['mean_dice']:.4f}")
    return EXIT_OK


def cmd_style_demo(args):
    src, tgt = read_image(args.src), read_image(args.tgt)
    if src.shape != tgt.shape:
        raise DatasetFormatError(f"image shapes differ: {src.shape} vs {tgt.shape}", args.tgt)
    out = stylize(src, tgt, args.method, args.beta, args.bins)
    write_image(args.out, out)
    print(json.dumps({"out": str(args.out), "method": args.method, "beta": args.beta,
                      "mean_abs_change": float(np.abs(out - src).mean())}))
    return EXIT_OK


def _overlay(image, saliency, bounds):
    H, W = image.shape
    gray = (np.clip(image, 0, 1) * 255).astype(np.uint8)
    sal = np.asarray(Image.fromarray(saliency.astype(np.float32)).resize((W, H), Image.NEAREST))
    span = float(sal.max() - sal.min()) or 1.0
    heat = ((sal - sal.min()) / span * 255).astype(np.uint8)
    rgb = np.stack([gray, ((gray.astype(np.uint16) + heat) // 2).astype(np.uint8), gray], axis=-1)
    top, left, h, w = bounds
    red = np.array([255, 0, 0], dtype=np.uint8)
    rgb[top, left:left + w] = red
    rgb[top + h - 1, left:left + w] = red
    rgb[top:top + h, left] = red
    rgb[top:top + h, left + w - 1] = red
    return Image.fromarray(rgb, mode="RGB")


def cmd_patch_demo(args):
    ckpt = load_checkpoint(args.checkpoint)
    student, teacher, config = models_from_checkpoint(ckpt)
    image = read_image(args.image)
    H, W = image.shape
    try:
        config.network.check_input(H, W)
    except ValueError as exc:
        raise DatasetFormatError(str(exc), args.image) from exc
    patch_size, grid = patch_geometry(config, H, W)
    teacher.eval()
    with torch.no_grad():
        maps = teacher(torch.from_numpy(image), capture_attention=True).attention_maps
    sal = fuse_attention([m[0] for m in maps])
    sel = select_patch(sal, (H, W), patch_size, grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _overlay(image, sal.values, sel.patch_bounds).save(out / "overlay.png")
    info = {"patch_bounds": list(sel.patch_bounds), "component_size": sel.component_size,
            "component_sizes": sel.component_sizes, "fallback": sel.fallback,
            "saliency": sal.values.tolist(), "saliency_mean": sal.mean_value}
    write_json_atomic(out / "patch.json", info)
    print(json.dumps({k: info[k] for k in ("patch_bounds", "component_size", "fallback")}))
    return EXIT_OK


def _flatten_numbers(prefix, obj, into):
    if isinstance(obj, dict):
        for k, v in obj.items():
            _flatten_numbers(f"{prefix}{k}." if not isinstance(v, (int, float)) else f"{prefix}{k}", v, into)
    elif isinstance(obj, (int, float)) and not isinstance(obj, bool) and math.isfinite(obj):
        into[prefix.rstrip(".")] = float(obj)


def collect_run(run_dir) -> dict:
    """Numeric summary of one run directory: best-epoch fields plus any ``eval*.json``."""
    run_dir = Path(run_dir)
    try:
        manifest = json.loads((run_dir / "manifest.json").read_text())
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        raise DatasetFormatError("missing or malformed manifest.json", run_dir) from exc
    values = {}
    _flatten_numbers("", {k: v for k, v in manifest["best"].items() if k != "epoch"}, values)
    for path in sorted(run_dir.glob("eval*.json")):
        rep = json.loads(path.read_text()).get("report", {})
        for key in ("foreground_iou", "mean_dice"):
            if key in rep:
                values[f"{path.stem}.{key}"] = float(rep[key])
    return values


def aggregate(runs: list[dict]) -> dict:
    keys = sorted(set().union(*runs)) if runs else []
    return {k: summarize([r[k] for r in runs if k in r]) for k in keys}


def cmd_report(args):
    runs = [collect_run(d) for d in args.runs]
    agg = aggregate(runs)
    print(json.dumps({"runs": [str(d) for d in args.runs], "metrics": agg}, indent=2))
    rows = [[k, a["mean"], a["std"], a["n"]] for k, a in agg.items()]
    print(format_table(["metric", "mean", "std", "n"], rows))
    return EXIT_OK


def cmd_ablate(args):
    from .experiment import run_study
    config = train_config_from(read_config(args.config), "desk")
    gen = generator_config_from(read_config(args.config))
    res = run_study(config, gen, seeds=tuple(args.seeds), data_seed=args.data_seed)
    if args.out:
        write_json_atomic(args.out, res)
    print(json.dumps(res["mean_target_iou"], indent=2))
    rows = [[name, summarize([r["target_iou"][name] for r in res["per_seed"]])["mean"],
             summarize([r["target_iou"][name] for r in res["per_seed"]])["std"]]
            for name in res["mean_target_iou"]]
    print(format_table(["variant", "target IoU", "std"], rows))
    return EXIT_OK


# --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="mtuda", description="Mean-teacher domain adaptation for lesion segmentation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic source/target domain pair")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one seed")
    t.add_argument("--config")
    t.add_argument("--preset", choices=("reference", "desk"), default="reference")
    t.add_argument("--source")
    t.add_argument("--target")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int)
    mode = t.add_mutually_exclusive_group()
    mode.add_argument("--supervised", action="store_true", help="train on labeled target data")
    mode.add_argument("--source-only", action="store_true", help="no adaptation")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="metrics of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--domain", choices=("source", "target"))
    e.add_argument("--split", choices=("all", "train", "val"), default="all")
    e.add_argument("--model", choices=("student", "teacher"), default="student")
    e.add_argument("--source", help="recompute the selection score from this source set")
    e.add_argument("--target")
    e.add_argument("--save")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("style-demo", help="stylize one image with another's appearance")
    s.add_argument("--src", required=True)
    s.add_argument("--tgt", required=True)
    s.add_argument("--beta", type=float, default=0.04)
    s.add_argument("--method", choices=("fft", "histogram"), default="fft")
    s.add_argument("--bins", type=int, default=256)
    s.add_argument("--out", default="stylized.png")
    s.set_defaults(func=cmd_style_demo)

    d = sub.add_parser("patch-demo", help="attention saliency and selected patch for one image")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--image", required=True)
    d.add_argument("--out", default="patch_demo")
    d.set_defaults(func=cmd_patch_demo)

    r = sub.add_parser("report", help="mean and sample std across run directories")
    r.add_argument("--runs", nargs="+", required=True)
    r.set_defaults(func=cmd_report)

    a = sub.add_parser("ablate", help="desk-scale source-only vs ablation ladder study")
    a.add_argument("--config")
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    a.add_argument("--data-seed", type=int, default=0)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DatasetFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except LossDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
