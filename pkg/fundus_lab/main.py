#!/usr/bin/env python3
"""
main.py  command-line entry point for fundus age/gender estimation and
age-conditioned fundus generation.

  python -m fundus_lab.main synth    --count 8 --seed 42 --out data/
  python -m fundus_lab.main ingest   --metadata odir.xlsx --images odir/ --out data/manifest.csv
  python -m fundus_lab.main split    --manifest data/manifest.csv --folds 5 --out data/folds.csv
  python -m fundus_lab.main train    --config run.cfg --override train.max_epochs=5
  python -m fundus_lab.main evaluate --checkpoint runs/run/fold-1/best.ckpt --manifest data/manifest.csv
  python -m fundus_lab.main generate --checkpoint best.ckpt --image eye.png --ages 10:80:10 --out grid.png
  python -m fundus_lab.main report   --run-dir runs/run

Exit status is 0 on success, 1 on a validation or I/O failure (printed as
"<category> error: <message>") and 2 on a usage error.
"""
import argparse
import logging
import sys
from pathlib import Path

import torch

from . import constants as C
from .config import format_config, load_config
from .dataio import ingest_table, kfold_split, load_manifest, write_folds, write_manifest
from .errors import FundusLabError, InvalidInputError
from .reports import (CV_COLUMNS, GENDER_COLUMNS, cv_table, gender_table, load_fold_rows,
                      progression_grid, regression_table, write_table)
from .synth import SynthParams, synth_generate
from .trainer import evaluate_fold, run_cross_validation

logger = logging.getLogger(__name__)

INGEST_FORMATS = {
    "odir": C.ODIR_COLUMNS,
    "papila": C.PAPILA_COLUMNS,
    "10y-pc": C.TEN_YEAR_COLUMNS,
}


# ------------------------------------------------------------------ helpers
def parse_ages(text):
    """'10,20,40' or an inclusive range 'start:stop:step' such as '10:80:10'."""
    text = text.strip()
    try:
        if ":" in text:
            start, stop, step = (float(p) for p in text.split(":"))
            if step <= 0:
                raise ValueError("step must be positive")
            count = int(round((stop - start) / step)) + 1
            return [start + i * step for i in range(max(count, 0))]
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError as e:
        raise InvalidInputError(f"cannot parse ages {text!r}: {e}") from e


def setup_logging(log_dir, verbose=False):
    log_dir = Path(log_dir)
    log_dir.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=[logging.FileHandler(log_dir / C.LOG_FILE), logging.StreamHandler()],
        force=True,
    )


def _existing_parent(path):
    parent = Path(path).parent
    return parent if parent.is_dir() else Path(".")


# ------------------------------------------------------------------ commands
def cmd_synth(args):
    params = SynthParams(count=args.count, seed=args.seed, image_size=args.size,
                         age_range=(args.age_min, args.age_max))
    manifest = synth_generate(params, args.out)
    print(f"Wrote {len(manifest)} images, {C.MANIFEST_FILE} and {C.TRUTH_FILE} to {args.out}")


def cmd_ingest(args):
    columns = INGEST_FORMATS[args.format]
    manifest = ingest_table(args.metadata, args.images, source=args.format, **columns)
    write_manifest(manifest, args.out)
    print(f"Wrote manifest {args.out} ({manifest.provenance})")


def cmd_split(args):
    manifest = load_manifest(args.manifest)
    folds = kfold_split(manifest, args.folds, args.seed)
    write_folds(manifest, folds, args.out)
    print(f"Wrote {args.folds} subject-grouped folds to {args.out}")


def cmd_train(args, cfg):
    manifest = load_manifest(cfg["data.manifest"])
    runs_root = Path(args.runs_dir or C.RUNS_DIR)
    results = run_cross_validation(cfg, manifest, runs_root=runs_root, fold_ids=args.fold)
    for result in results:
        print(f"Wrote {result.best_checkpoint} ({len(result.history)} epochs, {result.seconds:.1f}s)")
    rows = [r.evaluation.row() for r in results if r.evaluation is not None]
    if rows and all(c in rows[0] for c in CV_COLUMNS):
        run_dir = runs_root / cfg["train.name"]
        write_table(cv_table(rows), run_dir / "cv_table.csv", run_dir / "cv_table.txt")
        print(f"Wrote {run_dir / 'cv_table.csv'}")


def cmd_evaluate(args):
    manifest = load_manifest(args.manifest)
    evaluation = evaluate_fold(args.checkpoint, manifest, args.fold, out_dir=args.out, seed=args.seed)
    summary = ", ".join(f"{k}={v:.3f}" if isinstance(v, float) else f"{k}={v}"
                        for k, v in evaluation.row().items())
    print(summary)
    if args.out:
        print(f"Wrote {Path(args.out) / C.EVAL_FILE}")


def cmd_generate(args):
    grid = progression_grid(args.checkpoint, args.image, parse_ages(args.ages), args.seed,
                            args.out, stretch=args.stretch)
    print(f"Wrote {args.out} ({len(grid.panels) + 1} panels)")


def cmd_report(args):
    rows = load_fold_rows(args.run_dir)
    out = Path(args.run_dir)
    if all(c in rows[0] for c in GENDER_COLUMNS):
        tables = {"gender_table": gender_table(rows)}
    else:
        tables = {"cv_table": cv_table(rows), "regression_table": regression_table(rows)}
    for name, table in tables.items():
        write_table(table, out / f"{name}.csv", out / f"{name}.txt")
        print(f"Wrote {out / (name + '.csv')}")
        print(table.to_string(float_format=lambda v: f"{v:.{C.TABLE_DECIMALS}f}"))


# ------------------------------------------------------------------ parser
def build_parser():
    parser = argparse.ArgumentParser(prog="fundus_lab",
                                     description="Fundus age/gender estimation and age-conditioned generation.")
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=None, help="Random seed.")
        return p

    p = add("synth", "Render synthetic fundus images with a manifest.")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=64, help="Image side in pixels.")
    p.add_argument("--age-min", type=int, default=20)
    p.add_argument("--age-max", type=int, default=80)

    p = add("ingest", "Build a manifest from a dataset metadata table.")
    p.add_argument("--metadata", required=True, help="CSV or .xlsx metadata table.")
    p.add_argument("--images", required=True, help="Directory holding the images.")
    p.add_argument("--format", choices=sorted(INGEST_FORMATS), default="odir")
    p.add_argument("--out", required=True, help="Manifest CSV to write.")

    p = add("split", "Assign subjects to k folds.")
    p.add_argument("--manifest", required=True)
    p.add_argument("--folds", type=int, default=C.NUM_FOLDS)
    p.add_argument("--out", required=True)

    p = add("train", "Train and evaluate a model over subject-grouped folds.")
    p.add_argument("--config", default=None, help="Flat key=value config file.")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--fold", type=int, action="append", default=None, help="Run only this fold (repeatable).")
    p.add_argument("--name", default=None, help="Run name (train.name).")
    p.add_argument("--runs-dir", default=None, help=f"Runs root; defaults to ${{FUNDUS_LAB_RUNS_DIR}} or '{C.RUNS_DIR}'.")
    p.add_argument("--print-config", action="store_true", help="Print the effective config and exit.")

    p = add("evaluate", "Score a checkpoint on a manifest.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", default=C.MANIFEST_FILE)
    p.add_argument("--fold", type=int, default=1)
    p.add_argument("--out", default=None, help="Directory for eval.csv and predictions.csv.")

    p = add("generate", "Render an age-progression grid with an FGC-Net checkpoint.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--ages", default="10:80:10", help="'10,20,40' or 'start:stop:step'.")
    p.add_argument("--out", required=True, help="Grid PNG path.")
    p.add_argument("--stretch", action="store_true", help="Min-max stretch each difference panel.")

    p = add("report", "Collect fold evaluations of a run into tables.")
    p.add_argument("--run-dir", required=True)
    return parser


def _log_dir(args, cfg):
    if args.command == "synth":
        return args.out
    if args.command == "train":
        return Path(args.runs_dir or C.RUNS_DIR) / cfg["train.name"]
    if args.command == "evaluate":
        return args.out or _existing_parent(args.checkpoint)
    if args.command == "report":
        return args.run_dir
    return _existing_parent(args.out)


# ------------------------------------------------------------------ main
def main(argv=None):
    """Parses ``argv``, runs one subcommand and returns its exit status."""
    args = build_parser().parse_args(argv)
    try:
        cfg = None
        if args.command == "train":
            cfg = load_config(args.config, args.override, args.seed)
            if args.name:
                cfg["train.name"] = args.name
            if args.print_config:
                sys.stdout.write(format_config(cfg))
                return 0
        if args.seed is None:
            args.seed = cfg["train.seed"] if cfg else C.DEFAULT_SEED
        setup_logging(_log_dir(args, cfg), args.verbose)
        torch.manual_seed(args.seed)
        logger.info(f"Running {args.command} (seed {args.seed})")

        if args.command == "train":
            cmd_train(args, cfg)
        else:
            {"synth": cmd_synth, "ingest": cmd_ingest, "split": cmd_split, "evaluate": cmd_evaluate,
             "generate": cmd_generate, "report": cmd_report}[args.command](args)
    except FundusLabError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"{e.category} error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"io error: {e}", file=sys.stderr)
        return 1
    logger.info(f"{args.command} finished.")
    return 0


# ------------------------------------------------------------------ entrypoint
if __name__ == "__main__":
    sys.exit(main())
