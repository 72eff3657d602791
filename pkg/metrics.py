"""Event-based detection metrics over a per-window probability trace."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from model import SeizureEvent

logger = logging.getLogger(__name__)

FP_MODES = ("runs", "windows")


def _event_mask(t_end: np.ndarray, events: Sequence[SeizureEvent]) -> np.ndarray:
    inside = np.zeros(len(t_end), dtype=bool)
    for ev in events:
        inside |= (t_end > ev.onset_s) & (t_end <= ev.offset_s)
    return inside


def _stride(t_end: np.ndarray) -> float:
    return float(np.median(np.diff(t_end))) if len(t_end) > 1 else 1.0


@dataclass
class PredictionTrace:
    t_end: np.ndarray
    prob: np.ndarray
    events: List[SeizureEvent] = field(default_factory=list)
    warmup: Optional[np.ndarray] = None
    stride_s: Optional[float] = None

    def __post_init__(self):
        self.t_end = np.asarray(self.t_end, dtype=np.float64)
        self.prob = np.asarray(self.prob, dtype=np.float64)
        if self.t_end.shape != self.prob.shape or self.t_end.ndim != 1:
            raise ValueError("t_end and prob must be 1-D arrays of equal length")
        if np.any(np.diff(self.t_end) <= 0):
            raise ValueError("t_end must be strictly increasing")
        if np.any((self.prob < 0) | (self.prob > 1)) or np.any(np.isnan(self.prob)):
            raise ValueError("Probabilities must lie in [0, 1]")
        self.warmup = (np.zeros(len(self.t_end), dtype=bool) if self.warmup is None
                       else np.asarray(self.warmup, dtype=bool))
        if self.warmup.shape != self.t_end.shape:
            raise ValueError("warmup flags must match t_end")
        self.events = sorted(self.events, key=lambda e: e.onset_s)
        if self.stride_s is None:
            self.stride_s = _stride(self.t_end)

    def __len__(self) -> int:
        return int(len(self.t_end))

    @property
    def labels(self) -> np.ndarray:
        return _event_mask(self.t_end, self.events).astype(np.int8)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"t_end": self.t_end, "prob": self.prob,
                             "label": self.labels, "warmup": self.warmup.astype(np.int8)})

    @staticmethod
    def from_frame(df: pd.DataFrame, events: Sequence[SeizureEvent] = (),
                   stride_s: Optional[float] = None) -> "PredictionTrace":
        for col in ("t_end", "prob"):
            if col not in df.columns:
                raise ValueError(f"Trace table is missing column '{col}'")
        warmup = df["warmup"].to_numpy(dtype=bool) if "warmup" in df.columns else None
        return PredictionTrace(df["t_end"].to_numpy(), df["prob"].to_numpy(), list(events), warmup, stride_s)


@dataclass
class BinaryTrace:
    t_end: np.ndarray
    positive: np.ndarray
    events: List[SeizureEvent]
    warmup: np.ndarray
    stride_s: float
    threshold: float = 0.5


def detect(trace: PredictionTrace, threshold: float = 0.5) -> BinaryTrace:
    """Positive iff probability >= threshold; warm-up windows are never positive."""
    if not 0 < threshold < 1:
        raise ValueError(f"Threshold must lie in (0, 1), got {threshold}")
    positive = (trace.prob >= threshold) & ~trace.warmup
    return BinaryTrace(trace.t_end, positive, list(trace.events), trace.warmup, float(trace.stride_s), threshold)


def _first_detections(binary: BinaryTrace, events: Sequence[SeizureEvent]) -> List[Optional[float]]:
    firsts = []
    for ev in events:
        hits = binary.t_end[binary.positive & (binary.t_end > ev.onset_s) & (binary.t_end <= ev.offset_s)]
        firsts.append(float(hits[0]) if len(hits) else None)
    return firsts


def _events(binary: BinaryTrace, events: Optional[Sequence[SeizureEvent]]) -> List[SeizureEvent]:
    events = list(binary.events if events is None else events)
    if not events:
        raise ValueError("Sensitivity is undefined without seizures")
    return events


def sensitivity(binary: BinaryTrace, events: Optional[Sequence[SeizureEvent]] = None) -> float:
    events = _events(binary, events)
    detected = sum(first is not None for first in _first_detections(binary, events))
    return detected / len(events)


def lower_median(values: Sequence[float]) -> Optional[float]:
    if len(values) == 0:
        return None
    ordered = sorted(values)
    return float(ordered[(len(ordered) - 1) // 2])


@dataclass
class Delays:
    # event index -> seconds from onset to the first positive window inside the event
    per_seizure: Dict[int, float]
    median: Optional[float]
    mean: Optional[float]


def delays(binary: BinaryTrace, events: Optional[Sequence[SeizureEvent]] = None) -> Delays:
    events = list(binary.events if events is None else events)
    per = {i: first - ev.onset_s
           for i, (ev, first) in enumerate(zip(events, _first_detections(binary, events)))
           if first is not None}
    values = list(per.values())
    return Delays(per, lower_median(values), float(np.mean(values)) if values else None)


def _runs(mask: np.ndarray, t_end: np.ndarray, stride_s: float) -> int:
    """Maximal runs of consecutive true windows; a time gap longer than one stride breaks a run."""
    if not mask.any():
        return 0
    prev = np.r_[False, mask[:-1]]
    gap = np.r_[np.inf, np.diff(t_end)] > 1.5 * stride_s
    return int(np.count_nonzero(mask & (~prev | gap)))


def false_detections(binary: BinaryTrace, events: Optional[Sequence[SeizureEvent]] = None,
                     mode: str = "runs") -> int:
    if mode not in FP_MODES:
        raise ValueError(f"Unknown fp mode {mode!r}; expected one of {FP_MODES}")
    events = list(binary.events if events is None else events)
    outside_pos = binary.positive & ~_event_mask(binary.t_end, events)
    if mode == "runs":
        return _runs(outside_pos, binary.t_end, binary.stride_s)
    return int(np.count_nonzero(outside_pos))


def false_positive_rate(binary: BinaryTrace, events: Optional[Sequence[SeizureEvent]] = None,
                        duration_s: Optional[float] = None, mode: str = "runs") -> float:
    """False detections per hour of non-seizure time.

    ``mode="runs"`` counts each maximal run of consecutive positive windows
    outside all seizures once; ``"windows"`` counts every such window. Without
    ``duration_s`` the non-seizure time is the scored (non-warm-up) windows
    outside seizures times the stride.
    """
    events = list(binary.events if events is None else events)
    count = false_detections(binary, events, mode)
    if duration_s is not None:
        seizure_s = sum(ev.duration_s for ev in events)
        if duration_s <= seizure_s:
            raise ValueError(f"Duration {duration_s} s does not exceed seizure time {seizure_s} s")
        hours = (duration_s - seizure_s) / 3600.0
    else:
        scored = ~binary.warmup & ~_event_mask(binary.t_end, events)
        hours = np.count_nonzero(scored) * binary.stride_s / 3600.0
        if hours <= 0:
            raise ValueError("Trace has no scored non-seizure time")
    return count / hours


def auc(trace, labels=None) -> float:
    """P(random ictal window outscores a random interictal one), ties count 1/2.

    ``trace`` is a PredictionTrace (warm-up windows dropped, labels from its
    events unless given) or a plain score array with ``labels``.
    """
    if isinstance(trace, PredictionTrace):
        keep = ~trace.warmup
        scores = trace.prob[keep]
        labels = trace.labels[keep] if labels is None else np.asarray(labels)[keep]
    else:
        if labels is None:
            raise ValueError("Per-window labels are required for a score array")
        scores = np.asarray(trace, dtype=np.float64)
        labels = np.asarray(labels)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both ictal and interictal windows")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass
class EventMetrics:
    threshold: float
    n_events: int
    n_detected: int
    sensitivity: Optional[float]
    delays: Dict[int, float]
    median_delay_s: Optional[float]
    mean_delay_s: Optional[float]
    false_detections: int
    fp_per_hour: float
    n_positive: int
    auc: Optional[float]

    def to_row(self) -> Dict[str, Any]:
        return {
            "threshold": self.threshold,
            "n_events": self.n_events,
            "n_detected": self.n_detected,
            "sensitivity": self.sensitivity,
            "median_delay_s": self.median_delay_s,
            "mean_delay_s": self.mean_delay_s,
            "false_detections": self.false_detections,
            "fp_per_hour": self.fp_per_hour,
            "n_positive": self.n_positive,
            "auc": self.auc,
        }


def evaluate(trace: PredictionTrace, threshold: float = 0.5, fp_mode: str = "runs",
             duration_s: Optional[float] = None) -> EventMetrics:
    binary = detect(trace, threshold)
    events = trace.events
    d = delays(binary)
    try:
        score = auc(trace)
    except ValueError:
        score = None
    return EventMetrics(
        threshold=threshold,
        n_events=len(events),
        n_detected=len(d.per_seizure),
        sensitivity=sensitivity(binary) if events else None,
        delays=d.per_seizure,
        median_delay_s=d.median,
        mean_delay_s=d.mean,
        false_detections=false_detections(binary, mode=fp_mode),
        fp_per_hour=false_positive_rate(binary, duration_s=duration_s, mode=fp_mode),
        n_positive=int(np.count_nonzero(binary.positive)),
        auc=score,
    )


def threshold_sweep(trace: PredictionTrace, thresholds: Sequence[float], fp_mode: str = "runs",
                    duration_s: Optional[float] = None) -> pd.DataFrame:
    rows = [evaluate(trace, th, fp_mode, duration_s).to_row() for th in sorted(thresholds)]
    return pd.DataFrame(rows)


def delay_table(trace: PredictionTrace, threshold: float = 0.5) -> pd.DataFrame:
    binary = detect(trace, threshold)
    firsts = _first_detections(binary, trace.events)
    return pd.DataFrame([{
        "seizure": i,
        "onset_s": ev.onset_s,
        "offset_s": ev.offset_s,
        "detected": first is not None,
        "delay_s": None if first is None else first - ev.onset_s,
    } for i, (ev, first) in enumerate(zip(trace.events, firsts))])


def roc_points(trace: PredictionTrace) -> pd.DataFrame:
    """(threshold, fpr, tpr) for every distinct score, highest threshold first."""
    keep = ~trace.warmup
    scores, labels = trace.prob[keep], trace.labels[keep]
    n_pos, n_neg = int(labels.sum()), int(len(labels) - labels.sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both ictal and interictal windows")
    order = np.argsort(-scores, kind="mergesort")
    scores, labels = scores[order], labels[order]
    tp = np.cumsum(labels == 1)
    fp = np.cumsum(labels == 0)
    last = np.r_[np.flatnonzero(np.diff(scores) != 0), len(scores) - 1]
    return pd.DataFrame({"threshold": scores[last], "fpr": fp[last] / n_neg, "tpr": tp[last] / n_pos})
