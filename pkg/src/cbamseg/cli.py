"""Command-line entry point: ``cbamseg <subcommand> ...``.

Every subcommand writes ``run_config.json`` (its resolved flags) next to its
outputs.  Exit codes: 0 success, 1 runtime error, 2 usage error, 3 training
diverged.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import augment as aug
from . import dataset as ds
from . import metrics, net as mnet, profile as prof
from .labels import write_labels
from .plotting import plot_report
from .synth import generate_dataset

DEFAULT_SEED = 42
EXIT_ERROR = 1
EXIT_DIVERGED = 3

log = logging.getLogger("cbamseg")


class CliError(RuntimeError):
    pass


def _kv(text: str) -> tuple[str, object]:
    """Parse ``key=value``; the value is read as JSON when possible."""
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().replace("-", "_"), value


def _overrides(pairs, cls) -> dict:
    fields = set(cls.__dataclass_fields__)
    out = dict(pairs or [])
    unknown = sorted(set(out) - fields)
    if unknown:
        raise CliError(f"unknown {cls.__name__} field(s): {', '.join(unknown)}")
    return out


def write_run_config(out_dir, args: argparse.Namespace, **resolved) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    flags = {k: v for k, v in vars(args).items() if k != "func"}
    doc = {"subcommand": args.command, "flags": flags, **resolved}
    path = out / "run_config.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------- subcommands

def cmd_generate(args) -> int:
    man = generate_dataset(args.n, args.canopy_fraction, args.seed, out=args.out)
    write_run_config(args.out, args)
    seasons = [it["season"] for it in man["items"]]
    print(f"wrote {len(seasons)} scenes to {args.out} "
          f"(canopy {seasons.count('canopy')}, dormant {seasons.count('dormant')})")
    return 0


def cmd_augment(args) -> int:
    man = ds.read_manifest(args.manifest)
    if not ds.select(man, "train"):
        raise CliError("manifest has no training split to augment")
    spec = aug.AugmentSpec(**_overrides(args.aug, aug.AugmentSpec))
    new = aug.augment_manifest(man, args.out, args.seed, spec, strict=not args.lenient)
    write_run_config(args.out, args, augment_spec=vars(spec))
    n_train = len(ds.select(new, "train"))
    print(f"train {len(ds.select(man, 'train'))} -> {n_train}; dropped {new['augment_dropped']} polygons")
    return 0


def cmd_split(args) -> int:
    man = ds.read_manifest(args.manifest)
    ds.assign_splits(man, args.seed)
    out = Path(args.out)
    root = ds.manifest_root(man)
    # paths stay relative, now relative to the new manifest's directory
    for item in man["items"]:
        for key in ("path", "label_path"):
            item[key] = Path(os.path.relpath(os.path.join(root, item[key]), out.resolve())).as_posix()
    man["seed"] = args.seed
    ds.write_manifest(out / "manifest.json", man)
    write_run_config(out, args)
    counts = {s: len(ds.select(man, s)) for s in ds.SPLITS}
    print(" ".join(f"{k} {v}" for k, v in counts.items()))
    return 0


def _load_split(man, split, strict=True):
    return [ds.load_item(man, it, strict=strict) for it in ds.select(man, split)]


def cmd_train(args) -> int:
    man = ds.read_manifest(args.manifest)
    over = _overrides(args.net, mnet.NetConfig)
    over["cbam"] = args.cbam
    cfg = mnet.NetConfig(**over)
    train_data = _load_split(man, "train", not args.lenient)
    val_data = _load_split(man, "val", not args.lenient)
    out = Path(args.out)
    write_run_config(out, args, net_config=cfg.to_dict())
    net = mnet.build_network(cfg, args.seed)

    def progress(s):
        log.info("epoch %d train %.4f val %.4f", s.epoch, s.train_loss, s.val_loss)

    try:
        _, history = mnet.train(net, train_data, val_data, args.epochs, args.seed, args.patience, progress)
    except mnet.TrainingDiverged as exc:
        net.load_state(exc.last_good)
        mnet.save_checkpoint(out / "last_good.ckpt", net, {"diverged": str(exc)})
        (out / "history.csv").write_text(mnet.history_csv(exc.history), encoding="utf-8")
        print(f"training diverged: {exc}; last good weights in {out / 'last_good.ckpt'}", file=sys.stderr)
        return EXIT_DIVERGED
    best = min(history, key=lambda h: h.val_loss) if history else None
    mnet.save_checkpoint(out / "model.ckpt", net,
                         {"seed": args.seed, "epochs_run": len(history),
                          "best_epoch": best.epoch if best else 0})
    (out / "history.csv").write_text(mnet.history_csv(history), encoding="utf-8")
    msg = f"{len(history)} epochs"
    if best:
        msg += f", best val loss {best.val_loss:.4f} at epoch {best.epoch}"
    print(msg)
    return 0


def predict_split(net, man, items, conf: float, iou: float, pred_dir: Path):
    """Run forward, decode and NMS per image; write prediction files; return per-phase ms lists."""
    pred_dir.mkdir(parents=True, exist_ok=True)
    size = net.config.image_size
    timing = {"preprocess": [], "inference": [], "postprocess": []}
    paths = []
    for it in items:
        t0 = time.perf_counter()
        image = ds.load_image(ds.resolve(man, it["path"]))
        if image.shape != (3, size, size):
            raise CliError(f"{it['path']}: image shape {image.shape} does not fit the network")
        t1 = time.perf_counter()
        raw = mnet.forward(net, image)
        t2 = time.perf_counter()
        preds = mnet.nms(mnet.decode(raw, conf, num_classes=net.config.num_classes), iou)
        records = mnet.predictions_to_records(preds)
        t3 = time.perf_counter()
        path = pred_dir / f"{it['id']}.txt"
        write_labels(path, records)
        paths.append(path)
        timing["preprocess"].append(1e3 * (t1 - t0))
        timing["inference"].append(1e3 * (t2 - t1))
        timing["postprocess"].append(1e3 * (t3 - t2))
    return paths, timing


def _evaluate(args, curves_only: bool) -> int:
    man = ds.read_manifest(args.manifest)
    items = ds.select(man, args.split, args.season)
    if not items:
        raise CliError(f"no {args.season} images in the {args.split} split")
    net = mnet.load_checkpoint(args.checkpoint)
    out = Path(args.out)
    pred_paths, timing = predict_split(net, man, items, args.conf, args.iou, out / "predictions")
    gt_paths = [ds.resolve(man, it["label_path"]) for it in items]
    size = net.config.image_size
    report = metrics.evaluate(pred_paths, gt_paths, resolution=(size, size), strict=not args.lenient)
    report.timing = {k: float(np.median(v)) for k, v in timing.items()}
    if curves_only:
        for fam, cs in report.curves.items():
            for key, curve in cs.items():
                label = key if isinstance(key, str) else metrics.CLASS_NAMES[key].lower()
                (out / f"curve_{fam}_{label}.csv").write_text(metrics.curves_csv(curve), encoding="utf-8")
    else:
        metrics.write_report(report, out)
    plot_report(report, out)
    write_run_config(out, args, n_images=len(items))
    if not curves_only:
        print(metrics.report_csv(report.rows), end="")
        print("median ms/image: " + ", ".join(f"{k} {v:.2f}" for k, v in report.timing.items()))
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    return _evaluate(args, curves_only=False)


def cmd_curves(args) -> int:
    return _evaluate(args, curves_only=True)


def cmd_profile(args) -> int:
    if args.graph:
        doc = json.loads(Path(args.graph).read_text(encoding="utf-8"))
        graph = prof.graph_from_dicts(doc.get("layers", []))
        shape = tuple(doc.get("input_shape", (3, 96, 96)))
    else:
        if args.checkpoint:
            cfg = mnet.read_checkpoint_config(args.checkpoint)
        elif args.config:
            cfg = mnet.NetConfig.from_dict(json.loads(Path(args.config).read_text(encoding="utf-8")))
        else:
            cfg = mnet.NetConfig()
        if args.cbam:
            cfg.cbam = True
        net = mnet.build_network(cfg, 0)
        graph = net.layer_specs()
        shape = (3, cfg.image_size, cfg.image_size)
    result = prof.profile(graph, shape, count_activations=not args.no_activations)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "profile.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    write_run_config(out, args)
    print(f"layers {result['layers']}  params {result['params']}  GFLOPs {result['gflops']:.6f}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cbamseg", description="Desk-scale CBAM instance segmentation pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, reads_labels=True):
        sp = sub.add_parser(name, help=help_text)
        sp.set_defaults(func=func)
        sp.add_argument("--out", required=True, help="output directory")
        if reads_labels:
            sp.add_argument("--lenient", action="store_true",
                            help="skip malformed label lines instead of aborting")
        return sp

    g = add("generate", cmd_generate, "render a synthetic orchard dataset", False)
    g.add_argument("--n", type=int, default=200)
    g.add_argument("--canopy-fraction", type=float, default=0.5)
    g.add_argument("--seed", type=int, default=DEFAULT_SEED)

    a = add("augment", cmd_augment, "triple the training split with random transforms")
    a.add_argument("--manifest", required=True)
    a.add_argument("--seed", type=int, default=DEFAULT_SEED)
    a.add_argument("--aug", type=_kv, action="append", metavar="FIELD=VALUE",
                   help="AugmentSpec override, repeatable")

    s = add("split", cmd_split, "reassign the 8:1:1 train/val/test split", False)
    s.add_argument("--manifest", required=True)
    s.add_argument("--seed", type=int, default=DEFAULT_SEED)

    t = add("train", cmd_train, "train the segmenter")
    t.add_argument("--manifest", required=True)
    t.add_argument("--cbam", action="store_true", help="insert CBAM after every backbone convolution")
    t.add_argument("--epochs", type=int, default=300)
    t.add_argument("--patience", type=int, default=30)
    t.add_argument("--seed", type=int, default=DEFAULT_SEED)
    t.add_argument("--net", type=_kv, action="append", metavar="FIELD=VALUE",
                   help="NetConfig override, repeatable")

    for name, func, text in (("eval", cmd_eval, "evaluate a checkpoint on one split"),
                             ("curves", cmd_curves, "write only the confidence curves and figures")):
        e = add(name, func, text)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--manifest", required=True)
        e.add_argument("--split", choices=ds.SPLITS, default="test")
        e.add_argument("--season", choices=("dormant", "canopy", "mixed"), default="mixed")
        e.add_argument("--conf", type=float, default=0.001, help="decode confidence threshold")
        e.add_argument("--iou", type=float, default=0.5, help="NMS IoU threshold")

    f = add("profile", cmd_profile, "count parameters and FLOPs", False)
    src = f.add_mutually_exclusive_group()
    src.add_argument("--checkpoint")
    src.add_argument("--config", help="NetConfig JSON")
    src.add_argument("--graph", help='JSON {"input_shape": [C,H,W], "layers": [...]}')
    f.add_argument("--cbam", action="store_true")
    f.add_argument("--no-activations", action="store_true", help="give activation layers zero cost")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CliError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
