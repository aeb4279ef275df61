"""Command-line entry point: ``cacscore <command> ...``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .candidates import AnnotationFormatError, load_annotations, threshold_candidates
from .cnn import NonFiniteError, Network, gradient_check, he_init, shrunken_network
from .metrics import evaluate_volume, summarize
from .patches import PatchStore, PatchStoreFormatError, build_patch_store
from .phantom import PhantomPlanError, generate_cohort, read_manifest, write_cohort
from .scoring import RISK_CLASSES, ConstantModel, ScoreReport, predict_volume, reference_score, score_candidates
from .trainer import (
    CheckpointError,
    StratumExhaustedError,
    TrainConfig,
    TrainingDivergedError,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .volume import DimensionMismatchError, VolumeFormatError, load_mask, load_volume

log = logging.getLogger("cacscore")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_FORMAT = 4
EXIT_CONFIG = 5
EXIT_GRID = 6
EXIT_TRAINING = 7
EXIT_GRADCHECK = 8

GRADCHECK_TOLERANCE = 1e-5

EPILOG = f"""\
exit codes:
  {EXIT_OK}  success
  {EXIT_INTERNAL}  unexpected internal error
  {EXIT_USAGE}  bad command line (unknown flag, missing argument)
  {EXIT_MISSING_FILE}  input file or directory not found
  {EXIT_FORMAT}  malformed input file (CTV, CTMSK, patch store, checkpoint, JSON)
  {EXIT_CONFIG}  invalid configuration value or unsatisfiable phantom plan
  {EXIT_GRID}  inputs disagree on the voxel grid
  {EXIT_TRAINING}  training failed (non-finite loss, empty stratum)
  {EXIT_GRADCHECK}  gradient check above tolerance ({GRADCHECK_TOLERANCE:g})

On failure a single JSON line {{"error": kind, "exit_code": n, "message": ...}}
is written to stderr.

file formats:
  .ctv      b"CTVOL\\0\\0" + version byte, JSON header line (dims, spacing),
            little-endian int16 voxels, x fastest
  .ctmsk    b"CTMSK\\0\\0" + version byte, JSON header line, uint8 voxels
  .ann.json list of {{"voxels": [[x, y, z], ...], "label": coronary|aortic|other}}
  .cacpdb   b"CACPDB\\x01", u64 record count, packed records of
            (center u32 x3, label u8, 51x51 float32 normalized values)
  .cacnn    b"CACNN" + version byte, JSON header line (architecture, config,
            RNG state, step), float64 parameters, then Adagrad accumulators
  manifest.json  cohort listing: id, seed, file names, reference score, class
"""


class UsageError(Exception):
    pass


class ConfigError(ValueError):
    pass


class GradcheckFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{path}: no such file or directory")
    return p


def _write_text(path, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text, encoding="utf-8")


# -- commands ---------------------------------------------------------------------


def cmd_phantom_gen(args) -> dict:
    base = args.base_seed if args.base_seed is not None else args.seed
    classes = args.classes.split(",") if args.classes else None
    if classes and not set(classes) <= set(RISK_CLASSES):
        raise ConfigError(f"--classes must be drawn from {','.join(RISK_CLASSES)}, got {args.classes!r}")
    cohort = generate_cohort(args.n, base_seed=base, class_mix=classes, threads=args.threads)
    manifest = write_cohort(cohort, args.out, base_seed=base)
    print(f"wrote {manifest['count']} phantoms to {args.out}")
    return manifest


def cmd_patches_build(args):
    vol = load_volume(_existing(args.vol))
    mask = load_mask(_existing(args.mask))
    anns = load_annotations(_existing(args.ann))
    store = build_patch_store(vol, anns, mask)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    store.save(args.out)
    counts = {label.annotation_name: n for label, n in store.counts().items() if n}
    print(f"wrote {len(store)} patches to {args.out} {json.dumps(counts, sort_keys=True)}")


def _load_stores(directory) -> PatchStore:
    d = _existing(directory)
    files = sorted(d.glob("*.cacpdb"))
    if not files:
        raise FileNotFoundError(f"{directory}: no .cacpdb patch stores found")
    return PatchStore.concatenate([PatchStore.load(f) for f in files])


def resolve_train_config(args) -> TrainConfig:
    """Defaults, then the JSON config file, then explicit flags."""
    try:
        values = TrainConfig().to_dict()
        if args.config:
            with open(_existing(args.config), encoding="utf-8") as fh:
                values.update(TrainConfig.from_dict(json.load(fh)).to_dict())
        overrides = {
            "batch_size": args.batch_size,
            "learning_rate": args.learning_rate,
            "max_epochs": args.max_epochs,
            "early_stop_patience": args.patience,
            "validation_interval": args.validation_interval,
            "aortic_negative_fraction": args.aortic_fraction,
            "dropout_rate": args.dropout,
            "rng_seed": args.seed if args.seed_given else None,
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return TrainConfig.from_dict(values)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.config}: not valid JSON ({exc})") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def cmd_train(args):
    cfg = resolve_train_config(args)
    log.info("training config %s", json.dumps(cfg.to_dict(), sort_keys=True))
    train_store = _load_stores(args.train_dir)
    val_store = _load_stores(args.val_dir)
    model, report = train(train_store, val_store, cfg)
    Path(args.out_model).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(args.out_model, model, cfg=cfg, step=report.steps)
    base = args.report or str(args.out_model)
    _write_text(base + ".report.json", report.to_json())
    _write_text(base + ".report.csv", report.to_csv())
    print(
        f"trained {report.steps} steps, best epoch {report.best_epoch} "
        f"(val loss {report.best_val_loss!r}), stop: {report.stop_reason}"
    )


def _predictor(args):
    if args.oracle_positive:
        return ConstantModel(1.0)
    if args.oracle_negative:
        return ConstantModel(0.0)
    if not args.model:
        raise UsageError("predict: --model is required unless an oracle stub is selected")
    return load_checkpoint(_existing(args.model)).model


def cmd_predict(args):
    model = _predictor(args)
    vol = load_volume(_existing(args.vol))
    mask = load_mask(_existing(args.mask))
    vid = args.volume_id or Path(args.vol).name.split(".")[0]
    report = predict_volume(model, vol, mask, vid, threshold=args.threshold, min_area=args.min_area, threads=args.threads)
    _write_text(args.out_report, report.to_json())
    print(report.csv_line())


def cmd_score(args):
    vol = load_volume(_existing(args.vol))
    vid = args.volume_id or Path(args.vol).name.split(".")[0]
    if args.all_candidates:
        if not args.mask:
            raise UsageError("score: --all-candidates needs --mask")
        mask = load_mask(_existing(args.mask))
        report = score_candidates(vol, threshold_candidates(vol, mask), vid, args.min_area)
    else:
        if not args.ann:
            raise UsageError("score: --ann is required unless --all-candidates is given")
        report = reference_score(vol, load_annotations(_existing(args.ann)), vid, args.min_area)
    if args.out_report:
        _write_text(args.out_report, report.to_json())
    print(report.csv_line())


def _bland_altman_csv(summary: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "volume_id", "mean", "diff"])
    for v in summary["volumes"]:
        p, r = v["predicted_score"], v["reference_score"]
        w.writerow(["point", v["volume_id"], repr((p + r) / 2.0), repr(p - r)])
    ba = summary["bland_altman"]
    if ba is not None:
        for key in ("mean_diff", "loa_low", "loa_high"):
            w.writerow([key, "", "", repr(ba[key])])
    return buf.getvalue()


def _agreement_csv(summary: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["reference\\predicted", *RISK_CLASSES])
    for cls, row in zip(RISK_CLASSES, summary["agreement_table"]):
        w.writerow([cls, *row])
    return buf.getvalue()


def cmd_evaluate(args):
    pred_dir = _existing(args.pred_dir)
    ref_dir = _existing(args.ref_dir)
    manifest = read_manifest(ref_dir)
    reports = {}
    for f in sorted(pred_dir.glob("*.json")):
        rep = ScoreReport.load(f)
        reports[rep.volume_id] = rep
    evals = []
    for entry in manifest["volumes"]:
        rep = reports.get(entry["id"])
        if rep is None:
            raise FileNotFoundError(f"{pred_dir}: no prediction report for volume {entry['id']}")
        vol = load_volume(ref_dir / entry["volume"])
        mask = load_mask(ref_dir / entry["mask"])
        anns = load_annotations(ref_dir / entry["annotations"])
        evals.append(evaluate_volume(entry["id"], vol, mask, anns, rep.kept_pixels, rep.agatston))
    summary = summarize(evals)
    out = Path(args.out_dir)
    _write_text(out / "metrics.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_text(out / "bland_altman.csv", _bland_altman_csv(summary))
    _write_text(out / "agreement.csv", _agreement_csv(summary))
    px = summary["pixel"]["per_scan_mean"]
    print(
        f"volumes {summary['n_volumes']} sensitivity {px['sensitivity']} specificity {px['specificity']} "
        f"pearson {summary['pearson']} kappa {summary['weighted_kappa']} accuracy {summary['risk_accuracy']}"
    )
    return summary


def run_gradcheck(seeds, full: bool = False, max_params: int | None = None, n_patches: int = 4) -> list[float]:
    """Max relative gradient error per seed, in float64."""
    errors = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        base = Network.pixel_classifier() if full else shrunken_network()
        model = he_init(base, rng)
        x = rng.normal(size=(n_patches, model.input_size, model.input_size))
        y = rng.integers(0, 2, size=n_patches)
        errors.append(gradient_check(model, x, y, max_params=max_params, seed=seed))
    return errors


def cmd_gradcheck(args):
    seeds = [args.seed + i for i in range(args.seeds)]
    max_params = args.max_params if args.full else None
    errors = run_gradcheck(seeds, full=args.full, max_params=max_params)
    for s, e in zip(seeds, errors):
        print(f"seed {s} max_rel_error {e!r}")
    worst = max(errors)
    print(f"max_rel_error {worst!r}")
    if not worst < GRADCHECK_TOLERANCE:
        raise GradcheckFailed(f"max relative error {worst!r} >= {GRADCHECK_TOLERANCE:g}")


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    def globals_parser(default):
        p = _Parser(add_help=False)
        p.add_argument("--seed", type=int, default=default, help="master seed (default 0)")
        p.add_argument("--threads", type=int, default=default, help="worker threads (default 1)")
        p.add_argument("--verbose", "-v", action="store_true", default=default, help="log progress to stderr")
        return p

    top = globals_parser(None)
    # SUPPRESS so a subcommand's defaults never clobber flags given before it
    common = globals_parser(argparse.SUPPRESS)

    parser = _Parser(
        prog="cacscore",
        description="Coronary calcium scoring with a patch CNN.",
        epilog=EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
        parents=[top],
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def add(name, **kw):
        return sub.add_parser(name, parents=[common], formatter_class=argparse.RawDescriptionHelpFormatter, **kw)

    ph = add("phantom", help="synthetic phantom cohorts")
    ph_sub = ph.add_subparsers(dest="action", metavar="action", parser_class=_Parser)
    ph_sub.required = True
    gen = ph_sub.add_parser("gen", parents=[common], help="generate a cohort with manifest.json")
    gen.add_argument("--n", type=int, required=True, help="number of phantoms")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--base-seed", type=int, default=None, help="phantom i uses seed base+i (default --seed)")
    gen.add_argument("--classes", help="comma-separated target risk classes, cycled (default A,B,C,D,E)")
    gen.set_defaults(func=cmd_phantom_gen)

    pa = add("patches", help="patch stores")
    pa_sub = pa.add_subparsers(dest="action", metavar="action", parser_class=_Parser)
    pa_sub.required = True
    build = pa_sub.add_parser("build", parents=[common], help="extract labeled 51x51 patches from one volume")
    build.add_argument("--vol", required=True)
    build.add_argument("--mask", required=True)
    build.add_argument("--ann", required=True)
    build.add_argument("--out", required=True, help="output .cacpdb file")
    build.set_defaults(func=cmd_patches_build)

    tr = add("train", help="train the CNN on patch stores")
    tr.add_argument("--train-dir", required=True, help="directory of .cacpdb training stores")
    tr.add_argument("--val-dir", required=True, help="directory of .cacpdb validation stores")
    tr.add_argument("--config", help="JSON training config; flags below override it")
    tr.add_argument("--out-model", required=True, help="output checkpoint (.cacnn)")
    tr.add_argument("--report", help="report path prefix (default: the model path)")
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--learning-rate", type=float)
    tr.add_argument("--max-epochs", type=int)
    tr.add_argument("--patience", type=int, help="early-stopping patience")
    tr.add_argument("--validation-interval", type=int)
    tr.add_argument("--aortic-fraction", type=float, help="aortic share of the negative half of a batch")
    tr.add_argument("--dropout", type=float, help="dropout rate on the dense layer")
    tr.set_defaults(func=cmd_train)

    pr = add("predict", help="score a volume with a trained model")
    pr.add_argument("--model", help="trained checkpoint")
    pr.add_argument("--vol", required=True)
    pr.add_argument("--mask", required=True)
    pr.add_argument("--out-report", required=True, help="output ScoreReport JSON")
    pr.add_argument("--volume-id", help="id written into the report (default: volume file stem)")
    pr.add_argument("--threshold", type=float, default=0.5, help="keep pixels with pCAC above this")
    pr.add_argument("--min-area", type=float, default=0.0, help="drop lesions smaller than this (mm^2)")
    oracle = pr.add_mutually_exclusive_group()
    oracle.add_argument("--oracle-positive", action="store_true", help="test hook: every candidate is coronary")
    oracle.add_argument("--oracle-negative", action="store_true", help="test hook: no candidate is coronary")
    pr.set_defaults(func=cmd_predict)

    sc = add("score", help="reference Agatston score from annotations (no CNN)")
    sc.add_argument("--ann")
    sc.add_argument("--vol", required=True)
    sc.add_argument("--mask", help="ROI mask, needed with --all-candidates")
    sc.add_argument("--all-candidates", action="store_true", help="score every thresholded candidate instead")
    sc.add_argument("--min-area", type=float, default=0.0)
    sc.add_argument("--volume-id")
    sc.add_argument("--out-report", help="also write a ScoreReport JSON")
    sc.set_defaults(func=cmd_score)

    ev = add("evaluate", help="detection and agreement statistics over a cohort")
    ev.add_argument("--pred-dir", required=True, help="directory of ScoreReport JSON files")
    ev.add_argument("--ref-dir", required=True, help="phantom cohort directory with manifest.json")
    ev.add_argument("--out-dir", required=True, help="writes metrics.json, bland_altman.csv, agreement.csv")
    ev.set_defaults(func=cmd_evaluate)

    gc = add("gradcheck", help="finite-difference check of the CNN gradients")
    gc.add_argument("--full", action="store_true", help="check the full 51x51 network on sampled parameters")
    gc.add_argument("--seeds", type=int, default=5, help="number of seeds, starting at --seed")
    gc.add_argument("--max-params", type=int, default=1000, help="parameters sampled with --full")
    gc.set_defaults(func=cmd_gradcheck)
    return parser


def _resolved(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "seed_given")}


def _error_line(kind: str, code: int, message: str) -> int:
    print(json.dumps({"error": kind, "exit_code": code, "message": message}), file=sys.stderr)
    return code


_ERROR_CODES = (
    (UsageError, "usage", EXIT_USAGE),
    (FileNotFoundError, "missing_file", EXIT_MISSING_FILE),
    (IsADirectoryError, "missing_file", EXIT_MISSING_FILE),
    (DimensionMismatchError, "grid_mismatch", EXIT_GRID),
    (VolumeFormatError, "format", EXIT_FORMAT),
    (PatchStoreFormatError, "format", EXIT_FORMAT),
    (AnnotationFormatError, "format", EXIT_FORMAT),
    (CheckpointError, "format", EXIT_FORMAT),
    (json.JSONDecodeError, "format", EXIT_FORMAT),
    (ConfigError, "config", EXIT_CONFIG),
    (PhantomPlanError, "config", EXIT_CONFIG),
    (TrainingDivergedError, "training", EXIT_TRAINING),
    (StratumExhaustedError, "training", EXIT_TRAINING),
    (NonFiniteError, "training", EXIT_TRAINING),
    (GradcheckFailed, "gradcheck", EXIT_GRADCHECK),
)


def run(argv=None) -> int:
    """Run one command; returns the process exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        args.seed_given = args.seed is not None
        args.seed = 0 if args.seed is None else args.seed
        args.threads = 1 if args.threads is None else args.threads
        args.verbose = bool(args.verbose)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        print(json.dumps({"resolved_config": _resolved(args)}, default=str), file=sys.stderr)
        args.func(args)
        return EXIT_OK
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except Exception as exc:
        for cls, kind, code in _ERROR_CODES:
            if isinstance(exc, cls):
                return _error_line(kind, code, str(exc))
        log.debug("internal error", exc_info=True)
        return _error_line("internal", EXIT_INTERNAL, f"{type(exc).__name__}: {exc}")


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
