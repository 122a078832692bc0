"""Command-line entry point.

Subcommands: anchors-report, assign-report, eval, tta-merge, train-demo.
Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as cfgmod
from .anchors import AnchorConfig, anchor_count, level_anchor_sizes, mean_gt_aspect_ratio, retinaface_style_config
from .assigner import AssignerConfig, ScaleBucket, distribution_report, retinaface_style_assigner
from .config import ConfigError
from .dataio import AugConfig, ParseError, atomic_write_text, load_wider_gt, read_predictions, write_prediction_set
from .evaluation import DIFFICULTIES, EvalError, evaluate_run, load_difficulty_list
from .losses import FocalConfig, LossWeights
from .netops import extractor_ledger
from .plotting import line_chart
from .postprocess import FusionConfig, TTAPlan, TTAVariant, merge_tta
from .traindemo import DEMO_ANCHORS, HISTORY_COLUMNS, Pipeline, SceneConfig, TrainConfig, TrainingDiverged, evaluate_model, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("facedetkit")


@dataclass(frozen=True)
class EvalConfig:
    iou_thr: float = 0.5
    num_thresholds: int = 1000


@dataclass(frozen=True)
class LedgerConfig:
    head_channels: int = 256
    inception_branches: tuple[int, ...] = (1, 2, 3)


SCHEMA = {
    "anchors": AnchorConfig,
    "assigner": AssignerConfig,
    "focal": FocalConfig,
    "losses": LossWeights,
    "fusion": FusionConfig,
    "tta": TTAPlan,
    "aug": AugConfig,
    "eval": EvalConfig,
    "ledger": LedgerConfig,
    "train": TrainConfig,
    "scene": SceneConfig,
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def resolve_config(args, sections: Sequence[str], defaults: dict | None = None) -> dict:
    raw = cfgmod.read_config(args.config) if args.config else {}
    raw = cfgmod.apply_overrides(raw, args.set or [])
    if args.seed is not None:
        raw.setdefault("train", {})["seed"] = str(args.seed)
        raw.setdefault("aug", {})["seed"] = str(args.seed)
    resolved = cfgmod.load_sections(raw, SCHEMA, defaults)
    return {name: resolved[name] for name in sections}


def print_config(sections: dict, out) -> str:
    digest = cfgmod.config_hash(sections)
    out.write(f"# resolved config (hash {digest})\n")
    for line in cfgmod.dump_config(sections).splitlines():
        out.write(f"# {line}\n" if line else "#\n")
    return digest


def csv_text(header: Sequence[str], rows, digest: str) -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash={digest}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        w, h = int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None
    if w <= 0 or h <= 0:
        raise argparse.ArgumentTypeError("image dims must be positive")
    return w, h


# anchors-report


def cmd_anchors_report(args, out) -> int:
    sections = resolve_config(args, ["anchors", "ledger"])
    acfg = sections["anchors"]
    if args.gt:
        records = _load_gt(args.gt)
        boxes = np.concatenate([r.boxes for r in records]) if records else np.zeros((0, 4))
        boxes = boxes[(boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])]
        if len(boxes) == 0:
            raise DataError(f"{args.gt}: no positive-extent boxes to derive an aspect ratio from")
        acfg = replace(acfg, aspect_ratios=(mean_gt_aspect_ratio(boxes),))
        sections["anchors"] = acfg
    digest = print_config(sections, out)
    w, h = args.image_size
    lcfg = sections["ledger"]
    ledger = extractor_ledger(w, h, acfg, lcfg.head_channels, lcfg.inception_branches)
    rows = []
    for i, lvl in enumerate(ledger.levels):
        sizes = level_anchor_sizes(acfg, i)
        rows.append([lvl.name, lvl.stride, lvl.feat_w, lvl.feat_h, " ".join(f"{s:.4f}" for s in sizes), lvl.anchors])
    out.write(f"{'level':<6}{'stride':>8}{'feat':>12}  {'sizes':<28}{'anchors':>10}\n")
    for name, stride, fw, fh, sizes, n in rows:
        out.write(f"{name:<6}{stride:>8}{f'{fw}x{fh}':>12}  {sizes:<28}{n:>10}\n")
    out.write(f"dcn stages: {', '.join(str(s) for s, on in ledger.dcn_stages.items() if on)}\n")
    out.write(f"inception branches (3x3 convs each): {list(ledger.inception_branches)}\n")
    total = anchor_count(acfg, w, h)
    assert total == ledger.total_anchors
    out.write(f"total {total}\n")
    if args.out_dir:
        atomic_write_text(
            Path(args.out_dir) / "anchors.csv",
            csv_text(["level", "stride", "feat_w", "feat_h", "sizes", "anchors"], rows, digest),
        )
    return EXIT_OK


# assign-report

PRESETS = {
    "default": (AnchorConfig(), AssignerConfig()),
    "retinaface": (retinaface_style_config(), retinaface_style_assigner()),
}


def _load_gt(path):
    try:
        return load_wider_gt(path)
    except OSError as exc:
        raise DataError(str(exc)) from None


def _compare_configs(args, base_sections) -> list[tuple[str, AnchorConfig, AssignerConfig]]:
    specs = args.compare or ["default", "retinaface"]
    out = []
    for spec in specs:
        if spec == "config":
            # the anchors/assigner sections resolved from --config and --set
            out.append((spec, base_sections["anchors"], base_sections["assigner"]))
            continue
        if spec in PRESETS:
            a, s = PRESETS[spec]
            out.append((spec, a, s))
            continue
        raw = cfgmod.read_config(spec)
        res = cfgmod.load_sections(raw, SCHEMA)
        out.append((Path(spec).stem, res["anchors"], res["assigner"]))
    return out


def cmd_assign_report(args, out) -> int:
    sections = resolve_config(args, ["anchors", "assigner"])
    configs = _compare_configs(args, sections)
    records = _load_gt(args.gt)
    dataset = []
    for r in records:
        boxes = r.boxes
        boxes = boxes[(boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])]
        if len(boxes) == 0:
            continue
        if args.image_size:
            size = args.image_size
        else:
            size = (max(int(math.ceil(boxes[:, 2].max())), 1), max(int(math.ceil(boxes[:, 3].max())), 1))
        dataset.append((boxes, size))
    if not dataset:
        raise DataError(f"{args.gt}: dataset has no ground-truth faces")
    digest = print_config({**sections, **{f"{n}.anchors": a for n, a, _ in configs},
                           **{f"{n}.assigner": s for n, _, s in configs}}, out)
    out_dir = Path(args.out_dir) if args.out_dir else None
    summary = []
    for name, acfg, scfg in configs:
        rep = distribution_report(dataset, acfg, scfg, jobs=args.jobs)
        means = {b: rep.buckets[b].mean for b in ScaleBucket}
        ratio = rep.mean_ratio() if rep.buckets[ScaleBucket.SMALL].count and rep.buckets[ScaleBucket.LARGE].count else float("nan")
        summary.append([name] + [rep.buckets[b].count for b in ScaleBucket] + [f"{means[b]:.4f}" for b in ScaleBucket] + [f"{ratio:.4f}"])
        out.write(
            f"{name}: "
            + " ".join(f"{b.value}(n={rep.buckets[b].count}) mean={means[b]:.4f}" for b in ScaleBucket)
            + f" large/small={ratio:.4f}\n"
        )
        if out_dir:
            atomic_write_text(
                out_dir / f"assign_{name}.csv",
                csv_text(["bucket", "positives_count", "frequency", "cumulative"], rep.rows(), digest),
            )
            cdf = []
            dens = []
            for b in ScaleBucket:
                d = rep.buckets[b].density()
                if d:
                    ks = [k for k, _, _ in d]
                    cdf.append((b.value, ks, [c for _, _, c in d]))
                    dens.append((b.value, ks, [f for _, f, _ in d]))
            atomic_write_text(
                out_dir / f"assign_{name}_cdf.svg",
                line_chart(cdf, f"{name}: CDF of positives per gt", "positives", "cumulative", ylim=(0, 1)),
            )
            atomic_write_text(
                out_dir / f"assign_{name}_density.svg",
                line_chart(dens, f"{name}: density of positives per gt", "positives", "frequency"),
            )
    if out_dir:
        header = ["config"] + [f"n_{b.value}" for b in ScaleBucket] + [f"mean_{b.value}" for b in ScaleBucket] + ["large_over_small"]
        atomic_write_text(out_dir / "assign_summary.csv", csv_text(header, summary, digest))
    return EXIT_OK


# eval


def cmd_eval(args, out) -> int:
    sections = resolve_config(args, ["eval"])
    ecfg = sections["eval"]
    lists = {}
    for name in DIFFICULTIES:
        path = getattr(args, name)
        if path is None:
            raise UsageError(f"missing --{name} difficulty list")
        try:
            lists[name] = load_difficulty_list(path)
        except OSError as exc:
            raise DataError(str(exc)) from None
    records = _load_gt(args.gt)
    if not Path(args.pred_dir).is_dir():
        raise DataError(f"prediction dir {args.pred_dir} does not exist")
    digest = print_config(sections, out)
    results = evaluate_run(args.pred_dir, records, lists, ecfg.iou_thr, ecfg.num_thresholds, jobs=args.jobs)
    if args.out_dir:
        out_dir = Path(args.out_dir)
        for name, res in results.items():
            atomic_write_text(
                out_dir / f"pr_{name}.csv", csv_text(["threshold", "precision", "recall"], res.curve.rows(), digest)
            )
        series = [(f"{n} ({r.ap:.4f})", r.curve.recall, r.curve.precision) for n, r in results.items()]
        atomic_write_text(
            out_dir / "pr_curves.svg", line_chart(series, "precision-recall", "recall", "precision", xlim=(0, 1), ylim=(0, 1))
        )
        rows = [[n, f"{r.ap:.6f}", r.num_gt, r.num_dets] for n, r in results.items()]
        atomic_write_text(out_dir / "summary.csv", csv_text(["subset", "ap", "num_gt", "num_dets"], rows, digest))
    out.write("easy medium hard\n")
    out.write(" ".join(f"{results[n].ap:.4f}" for n in DIFFICULTIES) + "\n")
    return EXIT_OK


# tta-merge


def _read_variant(vdir: Path) -> tuple[TTAVariant | None, float | None]:
    """Returns (fixed variant, short_edge) from ``variant.ini``."""
    meta = vdir / "variant.ini"
    if not meta.is_file():
        raise DataError(f"{vdir}: missing variant.ini metadata")
    raw = cfgmod.read_config(str(meta)).get("variant")
    if raw is None:
        raise DataError(f"{meta}: missing [variant] section")
    allowed = {"scale", "short_edge", "shift", "flip"}
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"variant.{key}", "unknown key")
    vals = {k: cfgmod.parse_value(v, f"variant.{k}") for k, v in raw.items()}
    if ("scale" in vals) == ("short_edge" in vals):
        raise DataError(f"{meta}: give exactly one of scale / short_edge")
    shift = tuple(int(v) for v in vals.get("shift", (0, 0)))
    flip = bool(vals.get("flip", False))
    if "scale" in vals:
        return TTAVariant(float(vals["scale"]), shift, flip), None
    return TTAVariant(1.0, shift, flip), float(vals["short_edge"])


def _read_sizes(path) -> dict[str, tuple[int, int]]:
    from .dataio import image_key

    sizes = {}
    with open(path, encoding="utf-8") as fh:
        for row in csv.reader(line for line in fh if not line.startswith("#")):
            if not row or row[0] == "image":
                continue
            sizes[image_key(row[0])] = (int(row[1]), int(row[2]))
    return sizes


def cmd_tta_merge(args, out) -> int:
    sections = resolve_config(args, ["tta"])
    plan = sections["tta"]
    if not args.out_dir:
        raise UsageError("tta-merge needs --out-dir")
    variants = []
    for v in args.variant:
        vdir = Path(v)
        if not vdir.is_dir():
            raise DataError(f"variant dir {vdir} does not exist")
        variants.append((vdir, *_read_variant(vdir), read_predictions(vdir)))
    needs_sizes = any(fixed.flip or short is not None for _, fixed, short, _ in variants)
    sizes = {}
    if args.image_sizes:
        sizes = _read_sizes(args.image_sizes)
    elif needs_sizes:
        raise UsageError("flip / short_edge variants need --image-sizes")
    print_config(sections, out)
    keys = sorted(set().union(*(p.keys() for *_, p in variants)))
    merged = {}
    for key in keys:
        if key in sizes:
            w, h = sizes[key]
        elif needs_sizes:
            raise DataError(f"no image size for {key}")
        else:
            w, h = 1, 1  # unused: scale and shift only
        per_variant = []
        for _, fixed, short, preds in variants:
            variant = fixed if short is None else replace(fixed, scale=short / min(w, h))
            per_variant.append((variant, preds.get(key, [])))
        merged[key] = merge_tta(per_variant, plan, w, h)
    write_prediction_set(args.out_dir, merged)
    out.write(f"merged {len(variants)} variants over {len(keys)} images -> {args.out_dir}\n")
    return EXIT_OK


# train-demo


def cmd_train_demo(args, out) -> int:
    # demo scenes are 128 px, so the anchor default stops at stride 32
    sections = resolve_config(
        args, ["train", "scene", "anchors", "assigner", "focal", "losses"], defaults={"anchors": DEMO_ANCHORS}
    )
    tcfg = sections["train"]
    acfg = sections["anchors"]
    digest = print_config(sections, out)
    pipeline = Pipeline(sections["scene"], acfg, sections["assigner"], sections["focal"], sections["losses"])
    try:
        result = train(tcfg, pipeline)
    except TrainingDiverged as exc:
        out.write(f"diverged: {exc}\n")
        return EXIT_NUMERIC
    initial_ap = evaluate_model(result.initial_model, pipeline, tcfg) if args.initial_ap else None
    if args.out_dir:
        out_dir = Path(args.out_dir)
        rows = []
        for h, s in zip(result.history, result.smoothed):
            rows.append([h["iteration"], repr(h["lr"])] + [repr(h[k]) for k in ("total", "cls", "reg", "iou")] + [h["num_positives"], repr(float(s))])
        atomic_write_text(out_dir / "history.csv", csv_text(list(HISTORY_COLUMNS) + ["smoothed"], rows, digest))
        result.model.save(out_dir / "model.bin")
        atomic_write_text(out_dir / "ap.csv", csv_text(["metric", "value"], [["ap50", f"{result.ap:.6f}"]], digest))
    if initial_ap is not None:
        out.write(f"initial AP@0.5 {initial_ap:.6f}\n")
    out.write(f"final AP@0.5 {result.ap:.6f}\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir")
    common.add_argument("--jobs", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="facedetkit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("anchors-report", parents=[common], help="anchor sizes and counts per level")
    p.add_argument("--image-size", type=parse_size, default=(640, 640), metavar="WxH")
    p.add_argument("--gt", help="derive the aspect ratio from this WIDER ground-truth file")
    p.set_defaults(func=cmd_anchors_report)

    p = sub.add_parser("assign-report", parents=[common], help="positives-per-gt distributions by scale")
    p.add_argument("--gt", required=True)
    p.add_argument("--compare", action="append", metavar="PRESET|INI", help="default, retinaface, config (the resolved --config/--set), or an INI file")
    p.add_argument("--image-size", type=parse_size, metavar="WxH")
    p.set_defaults(func=cmd_assign_report)

    p = sub.add_parser("eval", parents=[common], help="Easy/Medium/Hard AP")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt", required=True)
    for name in DIFFICULTIES:
        p.add_argument(f"--{name}", help=f"{name} difficulty list")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tta-merge", parents=[common], help="merge per-variant predictions")
    p.add_argument("--variant", action="append", required=True, metavar="DIR")
    p.add_argument("--image-sizes", help="CSV of image,width,height")
    p.set_defaults(func=cmd_tta_merge)

    p = sub.add_parser("train-demo", parents=[common], help="synthetic end-to-end training")
    p.add_argument("--initial-ap", action="store_true", help="also report the untrained model's AP")
    p.set_defaults(func=cmd_train_demo)
    return parser


def main(argv: Sequence[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args, out)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ParseError, EvalError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
