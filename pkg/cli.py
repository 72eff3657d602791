"""Command-line front end: synth, train, detect, eval, sweep, resources, cv, approx."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import RunConfig
from metrics import EventMetrics, PredictionTrace, delay_table, evaluate, roc_points, threshold_sweep
from model import Recording, SeizureEvent
from net import (ArchDescriptor, WeightSet, baseline_archs, load_weights, predict, quantize,
                 reconcile_params, save_weights, seizurenet_arch)
from preprocess import MODES, NONLINEARITIES, WindowSet, compare_sigma_modes, window_stream
from resources import (compare_architectures, power_ratio, summarize_architectures, truenorth_power,
                       weight_storage_check)
from signal_io import load_recording, make_cv_folds, save_recording, synth_eeg
from train import train

logger = logging.getLogger(__name__)

RECORDING_FILE = {"csv": "recording.csv", "rawf32": "recording.f32"}
WEIGHTS_FILE = "weights.bin"
ARCH_FILE = "arch.json"
LOSS_FILE = "loss.csv"
TRACE_FILE = "trace.csv"
METRICS_FILE = "metrics.csv"
DELAYS_FILE = "delays.csv"
ROC_FILE = "roc.csv"
SWEEP_FILE = "sweep.csv"
RESOURCES_FILE = "resources.csv"
SUMMARY_FILE = "resources_summary.csv"
CHECKS_FILE = "reference_checks.csv"
CV_FILE = "cv.csv"
APPROX_FILE = "approx.csv"
RESOLVED_CONFIG_FILE = "resolved_config.json"

EXIT_ERROR = 1
EXIT_INFEASIBLE = 2


def write_csv(df: pd.DataFrame, path: Path, config_hash: str, meta: Optional[Dict[str, object]] = None,
              events: Iterable[SeizureEvent] = ()) -> Path:
    """Write ``df`` behind a ``# config=<hash>`` line; the file appears atomically."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as f:
        f.write(f"# config={config_hash}\n")
        for key, value in (meta or {}).items():
            f.write(f"# {key}={value}\n")
        for ev in events:
            f.write(f"# seizure,{ev.onset_s!r},{ev.offset_s!r}\n")
        df.to_csv(f, index=False, lineterminator="\n")
    os.replace(tmp, path)
    logger.info("wrote %s", path)
    return path


def read_csv(path: Path) -> Tuple[pd.DataFrame, Dict[str, str], List[SeizureEvent]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Missing input {path}")
    meta: Dict[str, str] = {}
    events: List[SeizureEvent] = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.startswith("#"):
                break
            body = line[1:].strip()
            if body.startswith("seizure,"):
                _, onset, offset = body.split(",")
                events.append(SeizureEvent(float(onset), float(offset)))
            elif "=" in body:
                key, value = body.split("=", 1)
                meta[key.strip()] = value.strip()
    return pd.read_csv(path, comment="#"), meta, events


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_data(cfg: RunConfig) -> Recording:
    if cfg.data.path:
        if not Path(cfg.data.path).exists():
            raise FileNotFoundError(f"Missing recording {cfg.data.path}")
        return load_recording(cfg.data.path, cfg.data.format)
    return synth_eeg(cfg.data.synth)


def build_arch(cfg: RunConfig, E: int, fs: float) -> ArchDescriptor:
    if cfg.arch.E is not None and cfg.arch.E != E:
        raise ValueError(f"Config asks for E={cfg.arch.E} but the recording has {E} channels")
    if cfg.arch.variant == "seizurenet":
        return seizurenet_arch(E, fs, cfg.arch.window_s, cfg.arch.dropout)
    return baseline_archs(E)[cfg.arch.variant]


def _trainable_arch(cfg: RunConfig, rec: Recording) -> ArchDescriptor:
    if cfg.arch.variant != "seizurenet":
        raise ValueError(f"Only seizurenet is trainable; {cfg.arch.variant} is a counting descriptor")
    return build_arch(cfg, rec.n_channels, rec.fs)


def _calibration(windows: WindowSet, n: int) -> np.ndarray:
    pool = windows.subset(~windows.warmup) if np.any(~windows.warmup) else windows
    index = np.unique(np.linspace(0, len(pool) - 1, min(n, len(pool))).astype(np.int64))
    return pool.x[index]


def _inference_weights(cfg: RunConfig, arch: ArchDescriptor, weights: WeightSet, windows: WindowSet) -> WeightSet:
    if cfg.eval.mode == "q15":
        return quantize(arch, weights, _calibration(windows, cfg.eval.calibration_windows))
    return weights


def _trace(cfg: RunConfig, windows: WindowSet, probs: np.ndarray, events: Sequence[SeizureEvent]) -> PredictionTrace:
    warmup = windows.warmup if cfg.preprocess.exclude_warmup else None
    return PredictionTrace(windows.t_end, probs, list(events), warmup, windows.stride_s)


def cmd_synth(cfg: RunConfig) -> Path:
    rec = synth_eeg(cfg.data.synth)
    path = _out(cfg) / RECORDING_FILE[cfg.data.format]
    save_recording(rec, str(path), cfg.data.format)
    return path


def cmd_train(cfg: RunConfig, holdout_fold: Optional[int] = None) -> Path:
    rec = load_data(cfg)
    arch = _trainable_arch(cfg, rec)
    windows = window_stream(rec, cfg.train.stride_s, cfg.preprocess)
    if holdout_fold is not None:
        split = make_cv_folds(rec, cfg.eval.folds, cfg.eval.context_s)
        windows = windows.subset(split.fold_of(windows.t_end) != holdout_fold)
    result = train(windows, arch, cfg.train, cfg.sampler)
    out = _out(cfg)
    arch.save_to_json(str(out / ARCH_FILE))
    save_weights(str(out / WEIGHTS_FILE), arch, result.weights)
    write_csv(pd.DataFrame(result.loss_curve, columns=["step", "loss"]), out / LOSS_FILE, cfg.hash())
    return out / WEIGHTS_FILE


def cmd_detect(cfg: RunConfig, weights_path: Optional[Path] = None) -> Path:
    out = _out(cfg)
    weights_path = Path(weights_path or out / WEIGHTS_FILE)
    if not weights_path.exists():
        raise FileNotFoundError(f"Missing weights {weights_path}")
    rec = load_data(cfg)
    arch = _trainable_arch(cfg, rec)
    windows = window_stream(rec, cfg.eval.stride_s, cfg.preprocess)
    weights = _inference_weights(cfg, arch, load_weights(str(weights_path), arch), windows)
    trace = _trace(cfg, windows, predict(arch, weights, windows.x, cfg.eval.mode), rec.annotations)
    meta = {"stride_s": trace.stride_s, "mode": cfg.eval.mode}
    return write_csv(trace.to_frame(), out / TRACE_FILE, cfg.hash(), meta, trace.events)


def load_trace(path: Path) -> PredictionTrace:
    df, meta, events = read_csv(path)
    stride = float(meta["stride_s"]) if "stride_s" in meta else None
    return PredictionTrace.from_frame(df, events, stride)


def cmd_eval(cfg: RunConfig, trace_path: Optional[Path] = None) -> Path:
    out = _out(cfg)
    trace = load_trace(Path(trace_path or out / TRACE_FILE))
    m = evaluate(trace, cfg.eval.threshold, cfg.eval.fp_mode)
    logger.info("sensitivity %s, median delay %s s, %.2f fp/h, auc %s",
                m.sensitivity, m.median_delay_s, m.fp_per_hour, m.auc)
    h = cfg.hash()
    if trace.events:
        write_csv(delay_table(trace, cfg.eval.threshold), out / DELAYS_FILE, h)
    if m.auc is not None:
        write_csv(roc_points(trace), out / ROC_FILE, h)
    return write_csv(pd.DataFrame([m.to_row()]), out / METRICS_FILE, h, {"fp_mode": cfg.eval.fp_mode})


def cmd_sweep(cfg: RunConfig, trace_path: Optional[Path] = None) -> Path:
    out = _out(cfg)
    trace = load_trace(Path(trace_path or out / TRACE_FILE))
    table = threshold_sweep(trace, cfg.eval.thresholds, cfg.eval.fp_mode)
    return write_csv(table, out / SWEEP_FILE, cfg.hash(), {"fp_mode": cfg.eval.fp_mode})


def cmd_resources(cfg: RunConfig) -> Tuple[Path, bool]:
    """Account the configured network and the comparison descriptors.

    Returns the summary path and whether the configured network fits the
    memory budget and the realtime budget.
    """
    res = cfg.resources
    E = cfg.arch.E or cfg.data.synth.n_channels
    if res.descriptor:
        primary = ArchDescriptor.load_from_json(res.descriptor)
    elif cfg.arch.variant == "seizurenet":
        primary = seizurenet_arch(E, cfg.data.synth.fs, cfg.arch.window_s, cfg.arch.dropout)
    else:
        primary = baseline_archs(E)[cfg.arch.variant]
    baselines = baseline_archs(E)
    archs = [primary] + [baselines[name] for name in res.compare
                         if name in baselines and baselines[name].name != primary.name]
    reconcile_params({a.name: a for a in archs})

    out = _out(cfg)
    h = cfg.hash()
    write_csv(compare_architectures(archs, res.memory, res.profile, res.period_s), out / RESOURCES_FILE, h)
    summary = summarize_architectures(archs, res.memory, res.profile, res.period_s)
    path = write_csv(summary, out / SUMMARY_FILE, h)

    storage = weight_storage_check(profile=res.profile)
    tn_lo, tn_hi = truenorth_power()
    checks = [{"check": "binary_weight_storage", "value": storage.required_bytes,
               "reference": storage.budget_bytes, "feasible": storage.feasible},
              {"check": "truenorth_power_low_w", "value": tn_lo, "reference": None, "feasible": None},
              {"check": "truenorth_power_high_w", "value": tn_hi, "reference": None, "feasible": None}]
    power = summary["power_w"].iloc[0]
    if power is not None and not pd.isna(power):
        checks.append({"check": "truenorth_over_estimate_low", "value": power_ratio(tn_lo, power),
                       "reference": power, "feasible": None})
        checks.append({"check": "truenorth_over_estimate_high", "value": power_ratio(tn_hi, power),
                       "reference": power, "feasible": None})
    write_csv(pd.DataFrame(checks), out / CHECKS_FILE, h)

    row = summary.iloc[0]
    feasible = bool(row["memory_ok"]) and bool(row["realtime_ok"])
    if not feasible:
        logger.warning("%s is infeasible on the configured profile", primary.name)
    return path, feasible


@dataclass
class FoldResult:
    metrics: EventMetrics
    trace: PredictionTrace
    weights: WeightSet
    held: WindowSet


def run_fold(cfg: RunConfig, rec: Recording, fold: int, train_windows: Optional[WindowSet] = None,
             eval_windows: Optional[WindowSet] = None) -> FoldResult:
    """Train on every fold but ``fold`` and evaluate on ``fold``."""
    split = make_cv_folds(rec, cfg.eval.folds, cfg.eval.context_s)
    arch = _trainable_arch(cfg, rec)
    if train_windows is None:
        train_windows = window_stream(rec, cfg.train.stride_s, cfg.preprocess)
    if eval_windows is None:
        eval_windows = window_stream(rec, cfg.eval.stride_s, cfg.preprocess)

    result = train(train_windows.subset(split.fold_of(train_windows.t_end) != fold), arch, cfg.train, cfg.sampler)
    held = eval_windows.subset(split.fold_of(eval_windows.t_end) == fold)
    weights = _inference_weights(cfg, arch, result.weights, held)
    trace = _trace(cfg, held, predict(arch, weights, held.x, cfg.eval.mode), split.fold_events(fold))
    return FoldResult(evaluate(trace, cfg.eval.threshold, cfg.eval.fp_mode), trace, result.weights, held)


def cmd_cv(cfg: RunConfig) -> Path:
    rec = load_data(cfg)
    out = _out(cfg)
    h = cfg.hash()
    train_windows = window_stream(rec, cfg.train.stride_s, cfg.preprocess)
    eval_windows = window_stream(rec, cfg.eval.stride_s, cfg.preprocess)
    rows = []
    for fold in range(cfg.eval.folds):
        fr = run_fold(cfg, rec, fold, train_windows, eval_windows)
        m, trace = fr.metrics, fr.trace
        write_csv(trace.to_frame(), out / f"fold_{fold}.csv", h, {"stride_s": trace.stride_s}, trace.events)
        logger.info("fold %d: sensitivity %s, %.2f fp/h, auc %s", fold, m.sensitivity, m.fp_per_hour, m.auc)
        rows.append({"fold": str(fold), **m.to_row()})
    table = pd.DataFrame(rows)
    medians = table.drop(columns=["fold"]).apply(pd.to_numeric, errors="coerce").median()
    table = pd.concat([table, pd.DataFrame([{"fold": "median", **medians.to_dict()}])], ignore_index=True)
    return write_csv(table, out / CV_FILE, h)


def cmd_approx(cfg: RunConfig) -> Path:
    rec = load_data(cfg)
    table = compare_sigma_modes(rec.data, rec.fs, cfg.preprocess.window_s, cfg.preprocess.gain)
    return write_csv(table, _out(cfg) / APPROX_FILE, cfg.hash())


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--strict", action="store_true", help="exit non-zero on infeasible resource checks")
    common.add_argument("--fp-mode", choices=("runs", "windows"))
    common.add_argument("--mode", choices=("float", "q15"))
    common.add_argument("--preproc", choices=MODES)
    common.add_argument("--nonlin", choices=NONLINEARITIES)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="seizurenet", description="Early seizure detection pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic recording")
    p = sub.add_parser("train", parents=[common], help="train and write weights")
    p.add_argument("--holdout-fold", type=int, help="leave this CV fold out of training")
    p = sub.add_parser("detect", parents=[common], help="write a prediction trace")
    p.add_argument("--weights")
    p = sub.add_parser("eval", parents=[common], help="event metrics of a trace")
    p.add_argument("--trace")
    p = sub.add_parser("sweep", parents=[common], help="metrics over thresholds")
    p.add_argument("--trace")
    sub.add_parser("resources", parents=[common], help="memory, runtime and power accounting")
    sub.add_parser("cv", parents=[common], help="k-fold cross-validation")
    sub.add_parser("approx", parents=[common], help="rolling-sigma approximation errors")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load_from_json(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.apply_seed(args.seed)
    if args.out:
        cfg.output_dir = args.out
    if args.fp_mode:
        cfg.eval.fp_mode = args.fp_mode
    if args.mode:
        cfg.eval.mode = args.mode
    if args.preproc:
        cfg.preprocess.mode = args.preproc
        cfg.resources.memory.preproc_mode = args.preproc
    if args.nonlin:
        cfg.preprocess.nonlinearity = args.nonlin
        cfg.resources.memory.nonlinearity = args.nonlin
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        cfg.save_to_json(str(_out(cfg) / RESOLVED_CONFIG_FILE))
        logger.info("config %s: %s", cfg.hash(), cfg.to_dict())
        if args.command == "synth":
            cmd_synth(cfg)
        elif args.command == "train":
            cmd_train(cfg, args.holdout_fold)
        elif args.command == "detect":
            cmd_detect(cfg, args.weights)
        elif args.command == "eval":
            cmd_eval(cfg, args.trace)
        elif args.command == "sweep":
            cmd_sweep(cfg, args.trace)
        elif args.command == "resources":
            _, feasible = cmd_resources(cfg)
            if not feasible and args.strict:
                return EXIT_INFEASIBLE
        elif args.command == "cv":
            cmd_cv(cfg)
        elif args.command == "approx":
            cmd_approx(cfg)
    except Exception as e:
        logger.error("%s failed: %s", args.command, e)
        logger.debug("traceback", exc_info=True)
        return EXIT_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
