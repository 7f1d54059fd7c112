"""Command-line interface: ``boxquery {synth,run,query,clicks,eval,report}``.

Exit codes: 0 on success, 1 on usage or configuration errors, 2 on data errors.
"""

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from boxquery._validation import DataError
from boxquery.acquisition import (
    STRATEGIES, ImageInputs, build_priorities, candidates_from_maps, parse_strategy, select_query,
    uses_metaseg,
)
from boxquery.alloop import THRESHOLD_FRACTION, ExperimentConfig, Experiment, mean_rows, run_experiment, \
    threshold_crossing
from boxquery.clickcost import DEFAULT_EPSILON, click_map, count_true_clicks, estimate_box_clicks
from boxquery.formats import (
    fmt_float, read_pgm, read_pmap, read_polygons, read_results, write_heatmap, write_queries, write_results,
)
from boxquery.metaseg import MetaSegRegressor, Segmentation
from boxquery.segmentation import ConfusionAccumulator
from boxquery.synth import SceneSpec, generate_dataset

log = logging.getLogger("boxquery")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_pair(text):
    try:
        lo, hi = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected MIN,MAX, got {text!r}") from None
    return lo, hi


def _threads(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get("BOXQUERY_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"BOXQUERY_THREADS must be an integer, got {env!r}") from None
    return 1


def _write_text(out, text, default_name=None):
    """Write to ``out`` (a file, or ``out/default_name`` if it is a directory), else stdout."""
    if out is None:
        sys.stdout.write(text)
        return
    path = Path(out)
    if default_name is not None and (path.is_dir() or not path.suffix):
        path.mkdir(parents=True, exist_ok=True)
        path = path / default_name
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _files_by_id(directory, suffix):
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory}: not a directory")
    return {p.stem: p for p in sorted(directory.glob(f"*{suffix}"))}


# --- commands -----------------------------------------------------------------------

def cmd_synth(args):
    if args.size < 8:
        raise UsageError("--size must be at least 8")
    spec = SceneSpec(height=args.size, width=args.size, classes=args.classes, shapes_per_image=args.shapes,
                     color_noise=args.noise, seed=args.seed)
    pool, val = generate_dataset(spec, args.pool, args.val, args.out)
    print(f"wrote {pool['images']} pool and {val['images']} validation scenes to {args.out}")


def cmd_run(args):
    overrides = {"seed": args.seed, "out_dir": args.out, "iterations": args.iterations}
    cfg = ExperimentConfig.from_file(args.config, **{k: v for k, v in overrides.items() if v is not None})
    cfg.threads = _threads(args)
    ckpt = Path(cfg.out_dir) / "checkpoints" if args.checkpoint else None
    rows, summary = run_experiment(cfg, Experiment(cfg), checkpoint_dir=ckpt, resume=args.resume)
    thr = summary["threshold"]
    where = f"cost_A {thr['cost_interpolated']:.2f}% at iteration {thr['iteration']}" if thr else "not reached"
    print(f"{summary['strategy']}: full-set mIoU {summary['full_set_miou']:.4f}, 95% threshold {where}")


def _load_labeled(directory, ids, shapes):
    out = {i: np.zeros(shapes[i], dtype=bool) for i in ids}
    if directory is None:
        return out
    files = _files_by_id(directory, ".pgm")
    for image_id in ids:
        if image_id in files:
            m = read_pgm(files[image_id]) > 0
            if m.shape != shapes[image_id]:
                raise DataError(f"{files[image_id]}: labeled mask shape {m.shape} differs from its prediction")
            out[image_id] = m
    return out


def cmd_query(args):
    kind = parse_strategy(args.strategy)
    files = _files_by_id(args.pmaps, ".pmap")
    if not files:
        raise DataError(f"{args.pmaps}: no .pmap files")
    ids = sorted(files)
    segs = [Segmentation(read_pmap(files[i]), args.ignore_id) for i in ids]
    labeled = _load_labeled(args.labeled, ids, {i: s.mask.shape for i, s in zip(ids, segs)})
    metaseg = None
    if uses_metaseg(kind):
        if args.meta_pmaps is None or args.meta_gt is None:
            raise UsageError(f"strategy {kind} needs --meta-pmaps and --meta-gt")
        meta_files = _files_by_id(args.meta_pmaps, ".pmap")
        gt_files = _files_by_id(args.meta_gt, ".pgm")
        missing = sorted(set(meta_files) - set(gt_files))
        if missing:
            raise DataError(f"no ground-truth mask for meta image {missing[0]}")
        meta_ids = sorted(meta_files)
        metaseg = MetaSegRegressor(ignore_id=args.ignore_id, random_state=args.seed).fit(
            [Segmentation(read_pmap(meta_files[i]), args.ignore_id) for i in meta_ids],
            [read_pgm(gt_files[i]) for i in meta_ids])
    polygons = {i: [] for i in ids}
    if args.polygons is not None:
        for poly in read_polygons(args.polygons):
            polygons.setdefault(poly.image_id, []).append(poly)
    inputs = [ImageInputs(i, s, labeled[i], tuple(polygons[i])) for i, s in zip(ids, segs)]
    scores, eligible = build_priorities(kind, inputs, args.b, args.stride, metaseg=metaseg,
                                        epsilon=args.epsilon, seed=args.seed)
    candidates = candidates_from_maps(ids, scores, eligible, args.b, args.stride)
    boxes = select_query(candidates, args.m_q) if candidates else []
    out = Path(args.out)
    (out / "heatmaps").mkdir(parents=True, exist_ok=True)
    write_queries(out / "queries.jsonl", boxes, STRATEGIES[kind], args.iteration)
    for image_id, s in zip(ids, scores):
        write_heatmap(out / "heatmaps" / f"{image_id}.pgm", s)
    print(f"selected {len(boxes)} boxes from {len(candidates)} candidates in {len(ids)} images")


def cmd_clicks(args):
    masks = _files_by_id(args.masks, ".pgm")
    if not masks:
        raise DataError(f"{args.masks}: no .pgm masks")
    polygons = {}
    if args.polygons is not None:
        for poly in read_polygons(args.polygons):
            polygons.setdefault(poly.image_id, []).append(poly)
    lines = []
    if args.box is None:
        lines.append("image_id,estimated,true_c_p")
    else:
        lines.append("image_id,row,col,b,estimated,c_p,c_i,c_b,c_c")
    for image_id in sorted(masks):
        mask = read_pgm(masks[image_id])
        kappa = click_map(mask, args.epsilon, args.ignore_id)
        polys = polygons.get(image_id, [])
        if args.box is None:
            true = sum(len(p.vertices) for p in polys) if polys else ""
            lines.append(f"{image_id},{int(kappa.sum())},{true}")
            continue
        row, col, b = args.box
        est = estimate_box_clicks(kappa, (row, col, b))
        if polys:
            c = count_true_clicks((row, col, b), polys, mask, args.ignore_id)
            lines.append(f"{image_id},{row},{col},{b},{est},{c.c_p},{c.c_i},{c.c_b},{c.c_c}")
        else:
            lines.append(f"{image_id},{row},{col},{b},{est},,,,")
    _write_text(args.out, "\n".join(lines) + "\n", "clicks.csv")


def cmd_eval(args):
    preds = _files_by_id(args.pred, ".pgm")
    gts = _files_by_id(args.gt, ".pgm")
    common = sorted(set(preds) & set(gts))
    if not common:
        raise DataError("no image ids shared by the prediction and ground-truth directories")
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise DataError(f"no prediction for ground-truth image {missing[0]}")
    acc = ConfusionAccumulator(args.classes, args.ignore_id)
    for image_id in common:
        acc.update(read_pgm(preds[image_id]), read_pgm(gts[image_id]))
    ious = acc.class_ious()
    doc = {"images": len(common), "miou": float(acc.mean_iou()),
           "class_iou": [None if np.isnan(v) else float(v) for v in ious]}
    _write_text(args.out, json.dumps(doc, indent=1) + "\n", "eval.json")


def cmd_report(args):
    runs_by_strategy = {}
    full = args.full_set_miou
    for path in args.results:
        rows = [r for r in read_results(path) if r["run"] != "mean"]
        for r in rows:
            runs_by_strategy.setdefault(r["strategy"], []).append(r)
        if full is None:
            summary = Path(path).with_name("summary.json")
            if summary.exists():
                full = json.loads(summary.read_text())["full_set_miou"]
    if full is None:
        raise UsageError("--full-set-miou is required when no summary.json accompanies the results")
    target = THRESHOLD_FRACTION * full
    curves = []
    table = ["strategy,runs,threshold_iteration,cost_a,cost_b,cost_a_at_iteration"]
    for strategy in sorted(runs_by_strategy):
        rows = runs_by_strategy[strategy]
        means = mean_rows(rows)
        curves.extend(means)
        a = threshold_crossing(means, target, "cost_a")
        b = threshold_crossing(means, target, "cost_b")
        n_runs = len({r["run"] for r in rows})
        if a is None:
            table.append(f"{strategy},{n_runs},,,,")
        else:
            table.append(f"{strategy},{n_runs},{a['iteration']},{fmt_float(a['cost_interpolated'])},"
                         f"{fmt_float(b['cost_interpolated'])},{fmt_float(a['cost_at_iteration'])}")
    text = "\n".join(table) + "\n"
    if args.out is None:
        sys.stdout.write(f"# target mIoU {fmt_float(target)} (95% of {fmt_float(full)})\n" + text)
        return
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.csv").write_text(text)
    write_results(out / "curves.csv", curves)
    sys.stdout.write(text)


# --- parser --------------------------------------------------------------------------

def _common(p, out_help):
    p.add_argument("--seed", type=int, default=None, help="random seed (default: command specific)")
    p.add_argument("--out", default=None, help=out_help)
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: $BOXQUERY_THREADS or 1)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser():
    parser = _Parser(prog="boxquery", description="Region-based active learning with box queries.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic pool and validation split")
    _common(p, "output directory (required)")
    p.add_argument("--pool", type=int, default=200, help="number of pool scenes")
    p.add_argument("--val", type=int, default=50, help="number of validation scenes")
    p.add_argument("--classes", type=int, default=5, help="classes including background")
    p.add_argument("--size", type=int, default=128, help="image height and width in pixels")
    p.add_argument("--shapes", type=_int_pair, default=(3, 6), help="shapes per image as MIN,MAX")
    p.add_argument("--noise", type=float, default=0.08, help="per-pixel color noise std")
    p.set_defaults(func=cmd_synth, seed_default=0, out_required=True)

    p = sub.add_parser("run", help="run an active-learning experiment from a config file")
    _common(p, "output directory (overrides out_dir in the config)")
    p.add_argument("--config", required=True, help="key=value experiment config")
    p.add_argument("--iterations", type=int, default=None, help="override the iteration budget")
    p.add_argument("--checkpoint", action="store_true", help="checkpoint after every iteration")
    p.add_argument("--resume", action="store_true", help="continue from existing checkpoints")
    p.set_defaults(func=cmd_run, seed_default=None, out_required=False)

    p = sub.add_parser("query", help="select boxes from a directory of PMAP predictions")
    _common(p, "output directory for queries.jsonl and heatmaps/ (required)")
    p.add_argument("--pmaps", required=True, help="directory of <image_id>.pmap files")
    p.add_argument("--strategy", default="metabox_plus", help=f"one of: {', '.join(STRATEGIES)}")
    p.add_argument("--labeled", default=None, help="directory of <image_id>.pgm already-labeled masks")
    p.add_argument("--meta-pmaps", default=None, help="meta-set PMAP directory (MetaBox strategies)")
    p.add_argument("--meta-gt", default=None, help="meta-set ground-truth PGM directory")
    p.add_argument("--polygons", default=None, help="ground-truth polygon JSONL (starred strategies)")
    p.add_argument("--b", type=int, default=32, help="box width")
    p.add_argument("--stride", type=int, default=8, help="anchor grid stride")
    p.add_argument("--m-q", dest="m_q", type=int, default=32, help="boxes to select")
    p.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON, help="RDP tolerance in pixels")
    p.add_argument("--ignore-id", type=int, default=None, help="class id excluded from segments")
    p.add_argument("--iteration", type=int, default=0, help="iteration number written to the queries")
    p.set_defaults(func=cmd_query, seed_default=0, out_required=True)

    p = sub.add_parser("clicks", help="RDP click estimates versus true polygon clicks")
    _common(p, "output CSV file or directory (default: stdout)")
    p.add_argument("--masks", required=True, help="directory of <image_id>.pgm masks")
    p.add_argument("--polygons", default=None, help="ground-truth polygon JSONL")
    p.add_argument("--box", type=lambda t: tuple(int(v) for v in t.split(",")), default=None,
                   help="restrict to one box ROW,COL,B")
    p.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON, help="RDP tolerance in pixels")
    p.add_argument("--ignore-id", type=int, default=None, help="class id excluded from segments")
    p.set_defaults(func=cmd_clicks, seed_default=0, out_required=False)

    p = sub.add_parser("eval", help="mIoU of predicted masks against ground truth")
    _common(p, "output JSON file or directory (default: stdout)")
    p.add_argument("--pred", required=True, help="directory of predicted <image_id>.pgm masks")
    p.add_argument("--gt", required=True, help="directory of ground-truth <image_id>.pgm masks")
    p.add_argument("--classes", type=int, required=True, help="number of classes")
    p.add_argument("--ignore-id", type=int, default=None, help="ground-truth id excluded from scoring")
    p.set_defaults(func=cmd_eval, seed_default=0, out_required=False)

    p = sub.add_parser("report", help="mean curves and 95%%-threshold table from results CSVs")
    _common(p, "output directory for table.csv and curves.csv (default: table on stdout)")
    p.add_argument("results", nargs="+", help="results.csv files")
    p.add_argument("--full-set-miou", type=float, default=None,
                   help="reference mIoU (default: read summary.json next to the results)")
    p.set_defaults(func=cmd_report, seed_default=0, out_required=False)
    return parser


def run_cli(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.out_required and args.out is None:
            raise UsageError(f"boxquery {args.command}: --out is required")
        if args.seed is None:
            args.seed = args.seed_default
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        args.func(args)
        return 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError, csv.Error, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
