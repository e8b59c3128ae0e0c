"""Command-line entry point: ``sphg <command> [options]``.

Every command writes into ``--out DIR`` and finishes by writing
``manifest.tsv`` (relative path, byte size, sha256 of every other file in
that directory). Exit codes: 0 success, 1 bad configuration, 2 missing or
unreadable input, 3 numeric failure, 4 internal invariant breach.
"""

import argparse
import hashlib
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint
from .config import load_config
from .errors import (CheckpointError, ConfigError, ContractError, DatasetParseError,
                     MissingInputError, NumericError)
from .pipeline import evaluate_heatmaps, load_datasets, predict_heatmaps, run_pipeline
from .plots import export_run_plots, plot_overlay, write_table
from .slots import infer_slots
from .synth import SceneParams, generate_dataset, read_pgm, read_split, render_heatmap_targets

log = logging.getLogger("sphg")

EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_NUMERIC, EXIT_INTERNAL = 0, 1, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def write_manifest(out_dir):
    out = Path(out_dir)
    rows = []
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.tsv" and not p.name.endswith(".tmp"):
            data = p.read_bytes()
            rows.append((p.relative_to(out).as_posix(), len(data), hashlib.sha256(data).hexdigest()))
    write_table(out / "manifest.tsv", ["path", "bytes", "sha256"], rows)
    return rows


def _config(args):
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "data", None):
        overrides.append(f"data.dir={args.data}")
    return load_config(args.config, overrides, preset=args.preset)


def _emit(pairs):
    """Print ``key<TAB>value`` lines between begin/end markers."""
    print("# begin")
    for k, v in pairs:
        print(f"{k}\t{v:.6f}" if isinstance(v, float) else f"{k}\t{v}")
    print("# end")


# -- commands ---------------------------------------------------------------------
def cmd_gen_data(args):
    cfg = _config(args)
    params = cfg.scene_params()
    if args.clean:
        params = SceneParams.clean(size=params.size, width_min=params.width_min,
                                   width_max=params.width_max, max_slots=params.max_slots)
    if args.mixed_scales:
        params = SceneParams.mixed_scales(size=params.size)
    n = args.num if args.num is not None else cfg["data.num_scenes"]
    train, val = generate_dataset(args.out, n, cfg["seed"], params, cfg["data.train_fraction"])
    _emit([("scenes", n), ("train", len(train)), ("val", len(val))])


def _stage_command(until, chain=False):
    def run(args):
        cfg = _config(args)
        out = Path(args.out)
        if until != "cen" and not (out / "latest.ckpt").exists():
            raise MissingInputError(f"{out / 'latest.ckpt'} not found; run the earlier stages first")
        r = run_pipeline(cfg, out, until=None if args.chain or chain else until)
        _emit([("cursor", r.cursor), ("tasks", len(r.tasks)), ("params", r.net.num_params())])
    return run


def _eval_set(cfg, split):
    train, val = load_datasets(cfg)
    if split == "train":
        return train
    if split == "val":
        return val
    from .synth import Dataset

    return Dataset(np.concatenate([train.images, val.images]), train.gts + val.gts)


def measure_latency(net, image, cfg, runs=50):
    """Median wall time of single-image forward plus post-processing."""
    times = []
    with T.single_threaded():
        for _ in range(runs):
            t0 = time.perf_counter()
            hm = predict_heatmaps(net, image[None])[0]
            infer_slots(hm[0], hm[1], hm[2], cfg.slot_config())
            times.append(time.perf_counter() - t0)
    return float(np.median(times))


def cmd_eval(args):
    cfg = _config(args)
    data = _eval_set(cfg, args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.oracle:
        hms = np.stack([np.stack(render_heatmap_targets(g, data.images.shape[-1], cfg["data.corner_sigma"],
                                                        cfg["data.line_sigma"]).as_tuple())
                        for g in data.gts])
        net, meta = None, {}
    else:
        st = load_checkpoint(args.checkpoint)
        net, meta = st.net, st.meta
        with T.single_threaded():
            hms = predict_heatmaps(net, data.images)
    res = evaluate_heatmaps(hms, data.gts, cfg, curve=True, slots=True)
    name = args.name or ("oracle" if args.oracle else Path(args.checkpoint).stem)
    write_table(out / f"miss_rate_{name}.tsv", ["threshold", "fppi", "miss_rate"], res["curve"].tolist())
    pairs = [("images", len(data)), ("precision", res["precision"]), ("recall", res["recall"]),
             ("accuracy", res["accuracy"]), ("loc_error_px", res["err_px"]), ("loc_error_px_std", res["err_px_std"]),
             ("loc_error_cm", res["err_cm"]), ("loc_error_cm_std", res["err_cm_std"]),
             ("miss_rate_at_fppi", res["miss_rate_at_fppi"]),
             ("slot_precision", res["slot_precision"]), ("slot_recall", res["slot_recall"])]
    if net is not None:
        base = meta.get("baseline_params")
        pairs.append(("params", net.num_params()))
        pairs.append(("param_ratio", net.num_params() / base if base else 1.0))
        pairs.append(("latency_ms", 1000 * measure_latency(net, data.images[0], cfg, cfg["eval.latency_runs"])))
    write_table(out / f"eval_{name}.tsv", ["metric", "value"], pairs)
    _emit(pairs)


def cmd_infer(args):
    cfg = _config(args)
    net = load_checkpoint(args.checkpoint).net
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for path in args.image:
        img = read_pgm(path)
        with T.single_threaded():
            hm = predict_heatmaps(net, img[None].astype(np.float32))[0]
        peaks, slots = infer_slots(hm[0], hm[1], hm[2], cfg.slot_config())
        for i, s in enumerate(slots):
            rows.append((Path(path).name, i, s.p1[0], s.p1[1], s.p2[0], s.p2[1], s.angle,
                         s.direction[0], s.direction[1], s.confidence))
        if args.overlay:
            plot_overlay(img, peaks, slots, out / f"{Path(path).stem}_overlay.png")
    write_table(out / "slots.tsv", ["image", "slot", "x1", "y1", "x2", "y2", "angle", "dir_x", "dir_y",
                                    "confidence"], rows)
    _emit([("images", len(args.image)), ("slots", len(rows))])


def cmd_export_plots(args):
    files = export_run_plots(args.run, args.out)
    _emit([("files", len(files))] + [(f"file{i}", Path(f).name) for i, f in enumerate(files)])


# -- parser -----------------------------------------------------------------------
def build_parser():
    p = _Parser(prog="sphg", description="Select-and-prune hourglass parking-slot detector")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--preset", default="desk", choices=("desk", "full"))
        sp.add_argument("--out", required=True, help="output directory")
        if data:
            sp.add_argument("--data", help="dataset directory (overrides data.dir)")

    g = sub.add_parser("gen-data", help="write a synthetic dataset to --out")
    common(g, data=False)
    g.add_argument("--num", type=int)
    g.add_argument("--clean", action="store_true", help="no clutter, noise or degradation")
    g.add_argument("--mixed-scales", action="store_true")
    g.set_defaults(fn=cmd_gen_data)

    for name, until, text in (("train", "cen", "warm-up and CEN pre-training"),
                              ("select", "select", "per-layer kernel selection"),
                              ("prune", "prune", "pruning epochs with tier snapshots"),
                              ("finetune", "finetune", "per-tier fine-tuning")):
        sp = sub.add_parser(name, help=text)
        common(sp)
        sp.add_argument("--chain", action="store_true", help="continue through all later stages")
        sp.set_defaults(fn=_stage_command(until))

    e = sub.add_parser("eval", help="metrics, parameter count and latency")
    common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--oracle", action="store_true", help="score the ground-truth target heatmaps")
    e.add_argument("--split", default="val", choices=("train", "val", "all"))
    e.add_argument("--name", help="label for the written curve and metric tables")
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("infer", help="slot records (and overlays) for PGM images")
    common(i, data=False)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", nargs="+", required=True)
    i.add_argument("--overlay", action="store_true")
    i.set_defaults(fn=cmd_infer)

    x = sub.add_parser("export-plots", help="figure tables and images from a run directory")
    x.add_argument("--run", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("-v", "--verbose", action="store_true")
    x.set_defaults(fn=cmd_export_plots)
    return p


def exit_code(exc):
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (MissingInputError, FileNotFoundError, DatasetParseError, CheckpointError)):
        return EXIT_INPUT
    if isinstance(exc, (NumericError, FloatingPointError)):
        return EXIT_NUMERIC
    return EXIT_INTERNAL


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    if args.command == "eval" and not args.oracle and not args.checkpoint:
        print("sphg eval: --checkpoint or --oracle is required", file=sys.stderr)
        return EXIT_CONFIG
    try:
        args.fn(args)
    except Exception as exc:  # mapped to the documented exit codes
        code = exit_code(exc)
        print(f"sphg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        if code == EXIT_INTERNAL and not isinstance(exc, ContractError):
            log.exception("unexpected failure")
        return code
    finally:
        if Path(args.out).is_dir():
            write_manifest(args.out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
