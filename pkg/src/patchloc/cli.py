"""Command-line runner: synth, train, eval, compare, stability, report.

Exit codes: 0 success, 2 configuration or input error, 3 numeric abort
(non-finite loss or divergent alternation). All commands write a JSON export
of their resolved configuration next to their outputs.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import warnings
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint
from .config import (ConfigError, RunConfig, load_config, resolved_dict,
                     write_resolved_config)
from .losses import AnnotationError, stability_report, write_stability_csv
from .metrics import (EvalError, LocalizationResult, accuracy_table_rows,
                      evaluate_localization, make_folds, svg_bar_chart,
                      write_metrics_csv)
from .synth import SynthDataError, SynthDataset, generate
from .synth import load as load_dataset
from .tensor import NonFiniteError
from .thresholds import AlternationError
from .train import Trainer, load_model, predict_scores, select_training_indices

CHECKPOINT_NAME = "checkpoint.plck"


def _fold_dir(out: str, fold: int) -> str:
    return os.path.join(out, f"fold_{fold}")


def _annotated_ids(dataset: SynthDataset) -> List[str]:
    return [s.id for s in dataset.samples if s.is_annotated]


def _write_rows(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    write_metrics_csv(path, header, rows)


def _train_run(cfg: RunConfig, dataset: SynthDataset, out: str) -> None:
    """Train one model per fold; each fold directory gets the checkpoint, the
    epoch log, and the final thresholds."""
    os.makedirs(out, exist_ok=True)
    write_resolved_config(cfg, os.path.join(out, "resolved_config.json"))
    plan = make_folds(_annotated_ids(dataset), cfg.folds, cfg.seed)
    for fold in range(cfg.folds):
        fold_dir = _fold_dir(out, fold)
        os.makedirs(fold_dir, exist_ok=True)
        indices = select_training_indices(dataset, plan.train_ids(fold),
                                          cfg.train.unannotated_fraction, cfg.seed, fold)
        trainer = Trainer(cfg, dataset, indices, fold)
        trainer.fit(checkpoint_path=os.path.join(fold_dir, CHECKPOINT_NAME))
        k = trainer.bcfg.classes
        _write_rows(os.path.join(fold_dir, "training_log.csv"),
                    ["epoch", "phase", "lr", "loss"] + [f"loss_class_{i}" for i in range(k)],
                    [[st.epoch, st.phase, repr(st.lr), repr(st.loss)]
                     + [repr(float(v)) for v in st.per_class] for st in trainer.history])
        th = trainer.thresholds
        _write_rows(os.path.join(fold_dir, "thresholds.csv"),
                    ["class", "tau", "rho", "tau_hat", "rho_hat"],
                    [[i, repr(float(th.tau[i])), repr(float(th.rho[i])),
                      repr(float(th.tau_hat[i])), repr(float(th.rho_hat[i]))]
                     for i in range(k)])
        e1 = sum(1 for s in trainer.history if s.phase == 1)
        e2 = len(trainer.history) - e1
        last = trainer.history[-1].loss if trainer.history else float("nan")
        print(f"fold {fold}: {e1} phase-1 epochs, {e2} phase-2 epochs, "
              f"final loss {last:.6f} over {trainer.count} samples")


def _eval_run(cfg: RunConfig, dataset: SynthDataset, out: str) -> Dict[str, np.ndarray]:
    """Evaluate every fold's checkpoint on its held-out annotated samples.

    Returns per-class across-fold aggregates and writes metrics.csv plus one
    SVG per criterion into the run directory.
    """
    plan = make_folds(_annotated_ids(dataset), cfg.folds, cfg.seed)
    bcfg = cfg.backbone_config()
    id_to_index = {s.id: i for i, s in enumerate(dataset.samples)}
    per_fold: List[LocalizationResult] = []
    for fold in range(cfg.folds):
        path = os.path.join(_fold_dir(out, fold), CHECKPOINT_NAME)
        state = load_checkpoint(path)
        weights, crf, _ = load_model(cfg, state, fold)
        samples = [dataset.samples[id_to_index[sid]] for sid in plan.val_ids(fold)]
        images = np.stack([s.image for s in samples])
        scores = predict_scores(images, bcfg, weights, crf,
                                batch_size=cfg.train.batch_size)
        truths = [s.annotation(bcfg.patch_grid) for s in samples]
        per_fold.append(evaluate_localization(scores, truths, cfg.eval.min_overlap,
                                              cfg.eval.detection_threshold))

    def stack(attr):
        return np.stack([getattr(r, attr) for r in per_fold])

    with warnings.catch_warnings():
        # classes absent from every fold aggregate to NaN, silently
        warnings.simplefilter("ignore", RuntimeWarning)
        agg = {
            "iou_acc": np.nanmean(stack("iou_acc"), axis=0),
            "iou_std": np.nanstd(stack("iou_acc"), axis=0),
            "ior_acc": np.nanmean(stack("ior_acc"), axis=0),
            "ior_std": np.nanstd(stack("ior_acc"), axis=0),
            "mean_iou": np.nanmean(stack("mean_iou"), axis=0),
            "mean_ior": np.nanmean(stack("mean_ior"), axis=0),
            "counts": stack("counts").sum(axis=0),
            # fold-level class means, for the summary line
            "fold_iou": np.array([np.nanmean(r.iou_acc) for r in per_fold]),
            "fold_ior": np.array([np.nanmean(r.ior_acc) for r in per_fold]),
        }
    result = LocalizationResult(iou_acc=agg["iou_acc"], ior_acc=agg["ior_acc"],
                                counts=agg["counts"], mean_iou=agg["mean_iou"],
                                mean_ior=agg["mean_ior"])
    rows = accuracy_table_rows(result, cfg.eval.min_overlap)
    _write_rows(os.path.join(out, "metrics.csv"),
                ["class", "criterion", "T", "accuracy", "n"], rows)
    _emit_charts(out, {"accuracy": agg["iou_acc"]}, {"accuracy": agg["ior_acc"]},
                 cfg.eval.min_overlap)
    return agg


def _emit_charts(out: str, iou_series: Dict[str, Sequence[float]],
                 ior_series: Dict[str, Sequence[float]], min_overlap: float) -> None:
    any_series = next(iter(iou_series.values()))
    labels = [str(k) for k in range(len(any_series))]
    clean = lambda d: {n: np.nan_to_num(np.asarray(v), nan=0.0) for n, v in d.items()}
    svg_bar_chart(os.path.join(out, "iou_accuracy.svg"), labels, clean(iou_series),
                  title=f"IoU accuracy (T={min_overlap})", ylabel="accuracy", ymax=1.0)
    svg_bar_chart(os.path.join(out, "ior_accuracy.svg"), labels, clean(ior_series),
                  title=f"IoR accuracy (T={min_overlap})", ylabel="accuracy", ymax=1.0)


def _fmt(v: float) -> str:
    return "  -  " if np.isnan(v) else f"{v:.3f}"


def _quiet_nanmean(arr) -> float:
    arr = np.asarray(arr, dtype=float)
    live = arr[~np.isnan(arr)]
    return float(live.mean()) if live.size else float("nan")


def _print_summary(agg: Dict[str, np.ndarray], title: str) -> None:
    k = agg["iou_acc"].shape[0]
    print(title)
    print(f"{'class':>5}  {'IoU acc':>15}  {'IoR acc':>15}  {'n':>5}")
    for i in range(k):
        print(f"{i:>5}  {_fmt(agg['iou_acc'][i]):>7} ± {_fmt(agg['iou_std'][i]):<5}  "
              f"{_fmt(agg['ior_acc'][i]):>7} ± {_fmt(agg['ior_std'][i]):<5}  "
              f"{int(agg['counts'][i]):>5}")
    fi, fr = agg["fold_iou"], agg["fold_ior"]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        print(f"{'mean':>5}  {_fmt(float(np.nanmean(fi))):>7} ± {_fmt(float(np.nanstd(fi))):<5}  "
              f"{_fmt(float(np.nanmean(fr))):>7} ± {_fmt(float(np.nanstd(fr))):<5}")


# -- subcommands --------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _config_for(args)
    out = args.out or cfg.data.dir
    dataset = generate(cfg.synth_config(), out)
    write_resolved_config(cfg, os.path.join(out, "resolved_config.json"))
    n_ann = len(dataset.annotated_indices())
    print(f"wrote {len(dataset)} images to {out} ({n_ann} annotated)")
    return 0


def cmd_train(args) -> int:
    cfg = _config_for(args)
    dataset = load_dataset(cfg.data.dir)
    _train_run(cfg, dataset, args.out or "out")
    return 0


def cmd_eval(args) -> int:
    cfg = _config_for(args)
    dataset = load_dataset(cfg.data.dir)
    out = args.out or "out"
    agg = _eval_run(cfg, dataset, out)
    _print_summary(agg, f"localization accuracy, mean ± std over {cfg.folds} folds")
    return 0


def _flatten(d: dict, prefix: str = "") -> Dict[str, object]:
    flat = {}
    for key, val in d.items():
        name = f"{prefix}{key}"
        if isinstance(val, dict):
            flat.update(_flatten(val, name + "."))
        else:
            flat[name] = val
    return flat


_ARM_AXES = ("loss.family", "train.unannotated_fraction")


def validate_arms(base: RunConfig, variant: RunConfig) -> None:
    """Comparison arms may differ only in loss family and unannotated fraction."""
    a = _flatten(resolved_dict(base))
    b = _flatten(resolved_dict(variant))
    bad = [key for key in a if a[key] != b[key] and key not in _ARM_AXES]
    if bad:
        raise ConfigError(f"arm configs differ outside the comparable axes: {sorted(bad)}")


def _arm_label(cfg: RunConfig, other: RunConfig) -> str:
    label = cfg.loss.family
    if cfg.train.unannotated_fraction != other.train.unannotated_fraction:
        label += f"_u{cfg.train.unannotated_fraction:g}"
    return label


def cmd_compare(args) -> int:
    base = load_config(args.config, _overrides(args, arm_axes=False))
    variant = load_config(args.config, _overrides(args, arm_axes=True))
    validate_arms(base, variant)
    out = args.out or "out"
    os.makedirs(out, exist_ok=True)
    dataset = load_dataset(base.data.dir)
    labels = (_arm_label(base, variant), _arm_label(variant, base))
    if labels[0] == labels[1]:
        labels = (labels[0] + "_a", labels[1] + "_b")
    results = {}
    for label, cfg in zip(labels, (base, variant)):
        arm_dir = os.path.join(out, f"arm_{label}")
        _train_run(cfg, dataset, arm_dir)
        results[label] = _eval_run(cfg, dataset, arm_dir)

    a, b = labels
    k = results[a]["iou_acc"].shape[0]
    rows = []
    for criterion in ("iou", "ior"):
        for i in range(k):
            va = results[a][f"{criterion}_acc"][i]
            vb = results[b][f"{criterion}_acc"][i]
            rows.append([i, criterion, base.eval.min_overlap,
                         "" if np.isnan(va) else f"{va:.6f}",
                         "" if np.isnan(vb) else f"{vb:.6f}",
                         int(results[a]["counts"][i])])
    _write_rows(os.path.join(out, "comparison.csv"),
                ["class", "criterion", "T", f"accuracy_{a}", f"accuracy_{b}", "n"], rows)
    _emit_charts(out, {a: results[a]["iou_acc"], b: results[b]["iou_acc"]},
                 {a: results[a]["ior_acc"], b: results[b]["ior_acc"]},
                 base.eval.min_overlap)
    print(f"comparison: {a} vs {b}")
    print(f"{'class':>5}  {'crit':>4}  {a:>10}  {b:>10}")
    for i, criterion, _, va, vb, _n in rows:
        print(f"{i:>5}  {criterion:>4}  {va or '-':>10}  {vb or '-':>10}")
    for crit in ("iou", "ior"):
        ma = _quiet_nanmean(results[a][f"{crit}_acc"])
        mb = _quiet_nanmean(results[b][f"{crit}_acc"])
        print(f"mean {crit}: {a} {ma:.3f}  {b} {mb:.3f}")
    return 0


def cmd_stability(args) -> int:
    out = args.out or "out"
    os.makedirs(out, exist_ok=True)
    rows = stability_report()
    path = os.path.join(out, "stability.csv")
    write_stability_csv(rows, path)
    flagged = sum(r.underflow for r in rows)
    print(f"wrote {path}: {len(rows)} configurations, {flagged} with raw-product underflow")
    for r in rows:
        if r.underflow:
            print(f"  P={r.grid} p={r.p_value} {r.precision}: raw product 0.0, "
                  f"log-domain {r.eq1_logdomain:.3f}, hinge loss {r.eq9_loss:.3f}")
    return 0


def cmd_report(args) -> int:
    """Re-emit charts and the stdout table from an existing metrics.csv."""
    out = args.out or "out"
    path = os.path.join(out, "metrics.csv")
    if not os.path.exists(path):
        raise EvalError(f"no metrics.csv under {out}; run eval first")
    acc = {"iou": {}, "ior": {}}
    counts = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            i = int(row["class"])
            val = float(row["accuracy"]) if row["accuracy"] else float("nan")
            acc[row["criterion"]][i] = val
            counts[i] = int(row["n"])
            min_overlap = float(row["T"])
    k = max(counts) + 1
    iou = np.array([acc["iou"].get(i, np.nan) for i in range(k)])
    ior = np.array([acc["ior"].get(i, np.nan) for i in range(k)])
    _emit_charts(out, {"accuracy": iou}, {"accuracy": ior}, min_overlap)
    print(f"{'class':>5}  {'IoU acc':>8}  {'IoR acc':>8}  {'n':>5}")
    for i in range(k):
        print(f"{i:>5}  {_fmt(iou[i]):>8}  {_fmt(ior[i]):>8}  {counts[i]:>5}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        print(f"{'mean':>5}  {_fmt(float(np.nanmean(iou))):>8}  "
              f"{_fmt(float(np.nanmean(ior))):>8}")
    return 0


# -- argument plumbing ---------------------------------------------------------


def _overrides(args, arm_axes: bool = True) -> Dict[str, str]:
    over: Dict[str, str] = {}
    if args.seed is not None:
        over["seed"] = str(args.seed)
    if args.folds is not None:
        over["folds"] = str(args.folds)
    if arm_axes:
        if args.loss is not None:
            over["loss.family"] = args.loss
        if args.unannotated_fraction is not None:
            over["train.unannotated_fraction"] = str(args.unannotated_fraction)
    return over


def _config_for(args) -> RunConfig:
    return load_config(args.config, _overrides(args))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="key=value config file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None, help="output (and run) directory")
    common.add_argument("--folds", type=int, default=None)
    common.add_argument("--loss", choices=("baseline", "sigmoid", "relu"), default=None)
    common.add_argument("--unannotated-fraction", type=float, default=None)
    parser = argparse.ArgumentParser(prog="patchloc",
                                     description="weakly supervised patch-grid localization")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func, desc in (
            ("synth", cmd_synth, "generate a synthetic dataset"),
            ("train", cmd_train, "train one model per fold"),
            ("eval", cmd_eval, "evaluate fold checkpoints on held-out samples"),
            ("compare", cmd_compare, "train and evaluate two arms side by side"),
            ("stability", cmd_stability, "emit the numerical stability table"),
            ("report", cmd_report, "re-emit charts and summary from metrics.csv")):
        p = sub.add_parser(name, parents=[common], help=desc)
        p.set_defaults(func=func)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (NonFiniteError, AlternationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, SynthDataError, EvalError, AnnotationError, CheckpointError,
            T.ShapeError, OSError, KeyError, ValueError) as exc:
        message = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {message}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
