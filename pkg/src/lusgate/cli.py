"""Command-line front end: generate phantom data, train, evaluate, simulate, explain, report.

Every command writes ``config_<command>.json`` next to its outputs with all
effective parameters, and all randomness flows from ``--seed``.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .dataset import FoldSplit, Manifest, frames_for, load_manifest
from .diagnosis import DIAG_HYPER, POSITIVE, crossval_run, p_positive
from .loop import AcquisitionPolicy, operator_source, simulate_acquisition
from .metrics import (
    TARGETS,
    VariantSummary,
    accuracy_by_quality,
    baseline_summary,
    diagnosis_lines,
    roc_curve,
    screened_eval,
    summarize,
    table_lines,
    table_text,
)
from .nn import Hyperparams, ModelFormatError, load_model, save_model
from .phantom import PhantomConfig, generate_dataset
from .qa import QA_BIN_HYPER, QA_ND_HYPER, VARIANTS, QAModels, save_novelty, train_qa_bin, train_qa_nd
from .saliency import export_map, guided_grad_cam
from .seeding import derive_seed

log = logging.getLogger("lusgate")


class UsageError(ValueError):
    pass


# -- helpers ---------------------------------------------------------------------


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8")
    return path


def _lines(path: Path, lines: Sequence[str]) -> Path:
    return _write(path, "\n".join(lines) + "\n")


def _jsonable(v):
    if dataclasses.is_dataclass(v):
        return {k: _jsonable(x) for k, x in dataclasses.asdict(v).items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def _echo(out: Path, command: str, args, **effective) -> Path:
    """Config echo: the parsed arguments plus every derived parameter."""
    given = {k: v for k, v in vars(args).items() if k != "func"}
    doc = {"command": command, "version": __version__, "args": _jsonable(given), "effective": _jsonable(effective)}
    return _write(out / f"config_{command.replace(' ', '_')}.json", json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _manifest(args) -> Manifest:
    if not args.manifest:
        raise UsageError("--manifest is required")
    return load_manifest(args.manifest)


def _hyper(base: Hyperparams, args, seed: int) -> Hyperparams:
    h = replace(base, seed=seed)
    if args.epochs is not None:
        h = replace(h, epochs=args.epochs)
    if args.lr is not None:
        h = replace(h, learning_rate=args.lr)
    if args.batch_size is not None:
        h = replace(h, batch_size=args.batch_size)
    return h


def _history_lines(history) -> list[str]:
    out = []
    for i, h in enumerate(history):
        if isinstance(h, dict):
            out.append(" ".join([f"epoch {i}"] + [f"{k} {v:.6f}" for k, v in sorted(h.items()) if k != "epoch"]))
        else:
            out.append(f"epoch {i} loss {h:.6f}")
    return out


# -- commands --------------------------------------------------------------------


def cmd_gen(args) -> int:
    out = _out_dir(args)
    config = PhantomConfig(
        frame_size=(args.size, args.size),
        n_patients_positive=args.positive,
        n_patients_control=args.control,
        frames_per_patient=args.frames,
        insufficient_fraction=args.insufficient_fraction,
        noise_level=args.noise,
        seed=args.seed,
    )
    manifest = generate_dataset(config, out, site=args.site)
    _echo(out, "gen", args, phantom=config)
    print(f"wrote {len(manifest.records)} frames to {out / 'manifest.tsv'}")
    return 0


def cmd_train_qa_bin(args) -> int:
    manifest = _manifest(args)
    out = _out_dir(args)
    hyper = _hyper(QA_BIN_HYPER, args, derive_seed(args.seed, "qa-bin"))
    samples = frames_for(manifest, manifest.patients)
    model = train_qa_bin(samples, hyper)
    save_model(model, out / "qa_bin.lgm")
    _lines(out / "qa_bin_log.txt", [f"frames {len(samples)}"] + _history_lines(model.train_meta["history"]))
    _echo(out, "train qa-bin", args, hyper=hyper.to_dict())
    print(f"QA classifier trained on {len(samples)} frames -> {out / 'qa_bin.lgm'}")
    return 0


def cmd_train_qa_nd(args) -> int:
    manifest = _manifest(args)
    out = _out_dir(args)
    hyper = _hyper(QA_ND_HYPER, args, derive_seed(args.seed, "qa-nd"))
    samples = frames_for(manifest, manifest.patients)
    keep = [s for s in samples if s[1].sufficient]
    excluded = len(samples) - len(keep)
    log.info("novelty training: excluded %d insufficient-quality frames", excluded)
    model = train_qa_nd(keep, hyper)
    save_novelty(model, out)
    lines = [f"frames {len(keep)}", f"excluded_insufficient {excluded}"] + _history_lines(model.history)
    _lines(out / "qa_nd_log.txt", lines)
    _echo(out, "train qa-nd", args, hyper=hyper.to_dict(), excluded_insufficient=excluded)
    print(f"novelty model trained on {len(keep)} frames ({excluded} insufficient excluded) -> {out}")
    return 0


def cmd_train_diag(args) -> int:
    manifest = _manifest(args)
    out = _out_dir(args)
    hyper = _hyper(DIAG_HYPER, args, 0)
    split, results = crossval_run(manifest, args.folds, args.seed, hyper)
    for r in results:
        save_model(r.model, out / f"dbin_fold{r.fold_index}.lgm")
    _lines(out / "folds.tsv", split.lines())
    _lines(out / "cv_scores.tsv", ["frame_id fold p_positive label"] + [s.line() for r in results for s in r.scores])
    log_lines = []
    for r in results:
        log_lines += [f"fold {r.fold_index} train_patients {len(r.train_patients)} test_frames {len(r.scores)}"]
        log_lines += [f"fold {r.fold_index} " + h for h in _history_lines(r.model.train_meta["history"])]
    _lines(out / "diag_log.txt", log_lines)
    fold_seeds = [derive_seed(args.seed, "diag", i) for i in range(args.folds)]
    _echo(out, "train diag", args, hyper=hyper.to_dict(), fold_seeds=fold_seeds,
          kfold_seed=derive_seed(args.seed, "kfold"))
    print(f"trained {len(results)} fold models -> {out}")
    return 0


def _load_split(path: Path) -> FoldSplit:
    folds: dict[int, set] = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            i, pid = line.split("\t")
            folds.setdefault(int(i), set()).add(pid)
    k = len(folds)
    if sorted(folds) != list(range(k)):
        raise ValueError(f"{path}: fold indices are not 0..{k - 1}")
    return FoldSplit(k, tuple(frozenset(folds[i]) for i in range(k)))


def cmd_eval(args) -> int:
    manifest = _manifest(args)
    out = _out_dir(args)
    qa = QAModels.load(args.qa_dir)
    diag_dir = Path(args.diag_dir)
    split = _load_split(diag_dir / "folds.tsv")
    variants = VARIANTS if args.qa_variant in (None, "all") else (args.qa_variant,)
    threshold = 0.5 if args.qa_threshold is None else args.qa_threshold

    per_variant: dict[str, list] = {v: [] for v in variants}
    score_rows = ["frame_id fold quality diagnosis p_positive p_bin p_nd " + " ".join(f"accept_{v}" for v in variants)]
    reject_rows = ["variant fold frame_id"]
    split_rows = ["fold n_sufficient n_insufficient acc_sufficient acc_insufficient"]
    for i in range(split.k):
        model = load_model(diag_dir / f"dbin_fold{i}.lgm")
        test = [s for s in frames_for(manifest, split.test(i)) if s[1].diagnosis in ("positive", "control")]
        probs = p_positive(model, test)
        evals = {v: screened_eval(test, qa, v, None, threshold, diag_scores=probs) for v in variants}
        for v, e in evals.items():
            per_variant[v].append(e)
            reject_rows += [f"{v} {i} {fid}" for fid in e.rejection.rejected]
        first = evals[variants[0]].verdicts
        for (f, lab), p, verdict, *acc in zip(test, probs, first, *(evals[v].verdicts for v in variants)):
            flags = " ".join(str(int(a.accepted)) for a in acc)
            score_rows.append(f"{f.frame_id} {i} {lab.quality} {lab.diagnosis} {p:.6f} "
                              f"{verdict.p_bin:.6f} {verdict.p_nd:.6f} {flags}")
        y = [lab.positive for _, lab in test]
        q = [lab.sufficient for _, lab in test]
        split_acc = accuracy_by_quality(probs, y, q)
        split_rows.append(f"{i} {sum(q)} {len(q) - sum(q)} {split_acc['sufficient']:.6f} "
                          f"{split_acc['insufficient']:.6f}")

    rows = [summarize(v, per_variant[v]) for v in variants]
    baseline = baseline_summary(per_variant[variants[0]])
    _write(out / "table.txt", table_text(rows, baseline))
    _lines(out / "table.tsv", table_lines(rows))
    diag = diagnosis_lines(rows)
    diag += ["", "ungated sens@0.8 sens@0.9 sens@0.95 spec@0.8 spec@0.9 spec@0.95",
             "none " + " ".join(f"{v:.3f}" for v in (*baseline.sens_at_spec, *baseline.spec_at_sens))]
    _lines(out / "diagnosis.tsv", diag)
    _lines(out / "scores.tsv", score_rows)
    _lines(out / "rejections.tsv", reject_rows)
    _lines(out / "quality_split.tsv", split_rows)
    summary = {"variants": [dataclasses.asdict(r) for r in rows], "baseline": dataclasses.asdict(baseline),
               "threshold": threshold, "targets": list(TARGETS)}
    _write(out / "summary.json", json.dumps(_jsonable(summary), sort_keys=True, indent=1) + "\n")
    _echo(out, "eval", args, variants=list(variants), threshold=threshold, folds=split.k,
          priors=qa.priors)
    sys.stdout.write(table_text(rows, baseline))
    return 0


def cmd_simulate(args) -> int:
    out = _out_dir(args)
    qa = QAModels.load(args.qa_dir)
    schedule = [float(p) for p in args.schedule.split(",") if p.strip()]
    policy = AcquisitionPolicy(args.max_attempts, args.qa_variant or "bin+nd",
                               0.5 if args.qa_threshold is None else args.qa_threshold)
    config = PhantomConfig(frame_size=(args.size, args.size), noise_level=args.noise)
    seed = derive_seed(args.seed, "simulate")
    source = operator_source(config, schedule, seed, args.locations)
    _, loop_log = simulate_acquisition(source, qa, policy)
    _lines(out / "loop_log.txt", loop_log.lines())
    _write(out / "loop_summary.txt", loop_log.summary_block())
    _echo(out, "simulate", args, policy=policy, schedule=schedule, source_seed=seed, phantom=config)
    sys.stdout.write(loop_log.summary_block())
    return 0


def cmd_saliency(args) -> int:
    manifest = _manifest(args)
    out = _out_dir(args)
    record = manifest.by_id(args.frame)
    frame, _ = manifest.load(record)
    model = load_model(args.model)
    target = POSITIVE if args.target_class == "positive" else 1 - POSITIVE
    smap = guided_grad_cam(model, frame, target, args.layer)
    raw, over = export_map(smap, frame, out, f"{args.frame}_{args.target_class}")
    _echo(out, "saliency", args, target_class_index=target, target_layer=smap.target_layer)
    print(f"{raw}\n{over}")
    return 0


def cmd_report(args) -> int:
    from .plotting import plot_accuracy, plot_roc

    out = _out_dir(args)
    eval_dir = Path(args.eval_dir)
    summary = json.loads((eval_dir / "summary.json").read_text(encoding="utf-8"))

    def restore(d):
        d = {k: (math.nan if v is None else v) for k, v in d.items()}
        d["qa_rates"] = tuple(math.nan if v is None else v for v in d["qa_rates"])
        d["sens_at_spec"] = tuple(math.nan if v is None else v for v in d["sens_at_spec"])
        d["spec_at_sens"] = tuple(math.nan if v is None else v for v in d["spec_at_sens"])
        return VariantSummary(**d)

    rows = [restore(d) for d in summary["variants"]]
    baseline = restore(summary["baseline"])

    header, *body = (eval_dir / "scores.tsv").read_text(encoding="utf-8").splitlines()
    cols = header.split()
    table = [line.split() for line in body if line.strip()]
    y = np.array([t[cols.index("diagnosis")] == "positive" for t in table], dtype=int)
    p = np.array([float(t[cols.index("p_positive")]) for t in table])
    curves = {}
    if 0 < y.sum() < len(y):
        curves["no QA"] = roc_curve(p, y)
    for r in rows:
        keep = np.array([t[cols.index(f"accept_{r.variant}")] == "1" for t in table])
        if keep.any() and 0 < y[keep].sum() < keep.sum():
            curves[f"QA^{r.variant}"] = roc_curve(p[keep], y[keep])
    figures = [plot_roc(curves, out / "roc.png"), plot_accuracy(rows, out / "accuracy.png")]

    parts = ["== summary table (fold means) ==", table_text(rows, baseline).rstrip("\n"),
             "", "== machine-readable ==", *table_lines(rows),
             "", "== diagnosis accuracy ==", *diagnosis_lines(rows)]
    if args.loop_dir:
        parts += ["", "== closed-loop summary ==",
                  (Path(args.loop_dir) / "loop_summary.txt").read_text(encoding="utf-8").rstrip("\n")]
    parts += ["", "== figures =="] + [f.name for f in figures]
    _lines(out / "report.txt", parts)
    _echo(out, "report", args)
    print(out / "report.txt")
    return 0


# -- parser ----------------------------------------------------------------------


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--manifest", help="dataset manifest (manifest.tsv)")
    p.add_argument("--qa-variant", choices=VARIANTS + ("all",), default=None)
    p.add_argument("--qa-threshold", type=float, default=None, help="QA accept threshold (default 0.5)")
    return p


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="lusgate", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="render a phantom dataset")
    p.add_argument("--positive", type=int, default=10, help="positive patients")
    p.add_argument("--control", type=int, default=12, help="control patients")
    p.add_argument("--frames", type=int, default=100, help="frames per patient")
    p.add_argument("--insufficient-fraction", type=float, default=0.15)
    p.add_argument("--size", type=int, default=64, help="frame side in pixels")
    p.add_argument("--noise", type=float, default=0.5, help="speckle level")
    p.add_argument("--site", choices=("A", "B"), default="A")
    p.set_defaults(func=cmd_gen)

    train = sub.add_parser("train", help="train a model").add_subparsers(dest="model", required=True)
    p = train.add_parser("qa-bin", parents=[common], help="supervised quality classifier")
    _train_flags(p)
    p.set_defaults(func=cmd_train_qa_bin)
    p = train.add_parser("qa-nd", parents=[common], help="one-class novelty model (sufficient frames only)")
    _train_flags(p)
    p.set_defaults(func=cmd_train_qa_nd)
    p = train.add_parser("diag", parents=[common], help="diagnosis classifiers, one per fold")
    p.add_argument("--folds", type=int, default=5)
    _train_flags(p)
    p.set_defaults(func=cmd_train_diag)

    p = sub.add_parser("eval", parents=[common], help="screened evaluation with a summary table")
    p.add_argument("--qa-dir", required=True)
    p.add_argument("--diag-dir", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("simulate", parents=[common], help="closed-loop acquisition simulation")
    p.add_argument("--qa-dir", required=True)
    p.add_argument("--locations", type=int, default=100)
    p.add_argument("--schedule", default="0.8,0.4,0.1", help="per-attempt insufficient probabilities")
    p.add_argument("--max-attempts", type=int, default=5)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.5)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("saliency", parents=[common], help="guided Grad-CAM for one frame")
    p.add_argument("--model", required=True, help="diagnosis model file (.lgm)")
    p.add_argument("--frame", required=True, help="frame id from the manifest")
    p.add_argument("--class", dest="target_class", choices=("positive", "control"), default="positive")
    p.add_argument("--layer", type=int, default=None, help="conv layer index (default: last conv)")
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("report", parents=[common], help="render the report and figures")
    p.add_argument("--eval-dir", required=True)
    p.add_argument("--loop-dir", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, ModelFormatError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"lusgate: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
