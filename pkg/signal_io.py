"""Loading, synthesizing and partitioning EEG recordings.

Two on-disk formats are supported:

* ``csv``: first line ``fs=<float>,channels=<int>``, annotation lines
  ``# seizure,<onset_s>,<offset_s>``, then one comma-separated row per sample.
* ``rawf32``: little-endian float32, channel-interleaved, with a JSON sidecar
  ``<path>.json`` declaring fs, channels, id and annotations.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.signal.windows import tukey

from model import Recording, SeizureEvent

logger = logging.getLogger(__name__)

FORMATS = ("csv", "rawf32")
_CSV_HEADER = re.compile(r"^\s*fs=([^,]+),\s*channels=(\d+)\s*$")
# 100-minute segments around each seizure
DEFAULT_CONTEXT_S = 100 * 60.0
# the default rolling-sigma window; seizures inside it would land in the warm-up
AUTO_LEAD_IN_S = 600.0


@dataclass
class SynthConfig:
    duration_s: float = 3600.0
    n_channels: int = 4
    fs: float = 256.0
    seizure_count: int = 6
    seizure_len_range_s: Tuple[float, float] = (20.0, 60.0)
    background_amp: float = 1.0
    seizure_amp: float = 4.0
    seizure_freq_range_hz: Tuple[float, float] = (3.0, 8.0)
    line_noise_amp: float = 0.5
    drift_amp: float = 2.0
    rng_seed: int = 0
    # seizures are placed after this offset and at least min_gap_s apart;
    # None keeps them out of the first AUTO_LEAD_IN_S when the recording has room
    lead_in_s: Optional[float] = None
    min_gap_s: float = 30.0

    def __post_init__(self):
        self.seizure_len_range_s = tuple(float(v) for v in self.seizure_len_range_s)
        self.seizure_freq_range_hz = tuple(float(v) for v in self.seizure_freq_range_hz)
        if self.duration_s <= 0:
            raise ValueError(f"duration_s must be > 0, got {self.duration_s}")
        if self.n_channels < 1:
            raise ValueError("n_channels must be >= 1")
        if self.fs <= 0:
            raise ValueError("fs must be > 0")
        if self.seizure_count < 0:
            raise ValueError("seizure_count must be >= 0")
        for name in ("background_amp", "seizure_amp", "line_noise_amp", "drift_amp"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        lo, hi = self.seizure_len_range_s
        if not 0 < lo <= hi:
            raise ValueError(f"Invalid seizure_len_range_s {self.seizure_len_range_s}")
        flo, fhi = self.seizure_freq_range_hz
        if not 0 < flo <= fhi < self.fs / 2:
            raise ValueError(f"Invalid seizure_freq_range_hz {self.seizure_freq_range_hz}")
        if self.lead_in_s is not None and not 0 <= self.lead_in_s < self.duration_s:
            raise ValueError("lead_in_s must lie inside the recording")
        if self.min_gap_s < 0:
            raise ValueError("min_gap_s must be >= 0")

    def resolved_lead_in_s(self) -> float:
        """Explicit lead-in, else AUTO_LEAD_IN_S shortened to what the longest seizures leave free."""
        if self.lead_in_s is not None:
            return float(self.lead_in_s)
        if self.seizure_count == 0:
            return 0.0
        needed = self.seizure_count * self.seizure_len_range_s[1] + (self.seizure_count - 1) * self.min_gap_s
        return float(min(AUTO_LEAD_IN_S, max(0.0, self.duration_s - needed)))

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["seizure_len_range_s"] = list(self.seizure_len_range_s)
        d["seizure_freq_range_hz"] = list(self.seizure_freq_range_hz)
        return d

    @staticmethod
    def from_dict(d: Dict[str, Any]) -> "SynthConfig":
        unknown = set(d) - set(SynthConfig.__dataclass_fields__)
        if unknown:
            raise ValueError(f"Unknown synth keys: {sorted(unknown)}")
        return SynthConfig(**d)


def _pink_noise(rng: np.random.Generator, n: int, n_channels: int) -> np.ndarray:
    """Unit-RMS noise with a 1/f power spectrum and no DC component."""
    white = rng.standard_normal((n, n_channels))
    spectrum = np.fft.rfft(white, axis=0)
    freqs = np.fft.rfftfreq(n)
    shape = np.zeros_like(freqs)
    shape[1:] = 1.0 / np.sqrt(freqs[1:])
    pink = np.fft.irfft(spectrum * shape[:, None], n=n, axis=0)
    std = pink.std(axis=0)
    std[std == 0] = 1.0
    return pink / std


def _place_seizures(cfg: SynthConfig, rng: np.random.Generator) -> List[Tuple[int, int]]:
    """Draw non-overlapping seizure segments as (start, stop) sample indices."""
    if cfg.seizure_count == 0:
        return []
    fs = cfg.fs
    n_total = int(round(cfg.duration_s * fs))
    lead_in_s = cfg.resolved_lead_in_s()
    lead = int(round(lead_in_s * fs))
    gap = int(round(cfg.min_gap_s * fs))
    lo, hi = cfg.seizure_len_range_s
    lengths = np.round(rng.uniform(lo, hi, cfg.seizure_count) * fs).astype(np.int64)
    lengths = np.maximum(lengths, 1)
    free = (n_total - lead) - int(lengths.sum()) - gap * (cfg.seizure_count - 1)
    if free < 0:
        raise ValueError(
            f"{cfg.seizure_count} seizures of {lo}-{hi} s with {cfg.min_gap_s} s gaps "
            f"do not fit into {cfg.duration_s - lead_in_s} s"
        )
    slack = np.sort(rng.integers(0, free + 1, cfg.seizure_count))
    segments = []
    used = 0
    for i, (s, length) in enumerate(zip(slack, lengths)):
        start = lead + int(s) + used + i * gap
        segments.append((start, start + int(length)))
        used += int(length)
    return segments


def synth_eeg(cfg: SynthConfig) -> Recording:
    """Synthesize a recording: 1/f background, 50 Hz line noise, slow drift and
    rhythmic seizure bursts whose annotations match the injected segments."""
    rng = np.random.default_rng(cfg.rng_seed)
    n = int(round(cfg.duration_s * cfg.fs))
    E = cfg.n_channels
    t = np.arange(n) / cfg.fs

    data = cfg.background_amp * _pink_noise(rng, n, E)

    line_phase = rng.uniform(0, 2 * np.pi, E)
    data += cfg.line_noise_amp * np.sin(2 * np.pi * 50.0 * t[:, None] + line_phase)

    drift_freq = rng.uniform(0.005, 0.05, E)
    drift_phase = rng.uniform(0, 2 * np.pi, E)
    data += cfg.drift_amp * np.sin(2 * np.pi * drift_freq * t[:, None] + drift_phase)

    if cfg.seizure_count and cfg.seizure_amp < 3 * cfg.background_amp:
        logger.warning(
            "seizure_amp %.3g is below 3x background_amp %.3g; seizures may be hard to separate",
            cfg.seizure_amp, cfg.background_amp,
        )

    events = []
    for start, stop in _place_seizures(cfg, rng):
        length = stop - start
        # the rhythm slows from the upper half of the band at onset to the lower half at offset
        flo, fhi = cfg.seizure_freq_range_hz
        mid = 0.5 * (flo + fhi)
        f_on, f_off = rng.uniform(mid, fhi), rng.uniform(flo, mid)
        phase = rng.uniform(0, 2 * np.pi, E)
        gain = rng.uniform(0.6, 1.0, E)
        tt = np.arange(length) / cfg.fs
        span = length / cfg.fs
        arg = 2 * np.pi * (f_on * tt + 0.5 * (f_off - f_on) * tt ** 2 / span)[:, None] + phase
        # fundamental plus a harmonic gives a spiky, repetitive morphology
        burst = np.sin(arg) + 0.3 * np.sin(2 * arg)
        envelope = tukey(length, alpha=0.1)[:, None]
        data[start:stop] += cfg.seizure_amp * gain * envelope * burst
        events.append(SeizureEvent(onset_s=start / cfg.fs, offset_s=stop / cfg.fs))

    rec = Recording(data=data.astype(np.float32), fs=cfg.fs, annotations=events,
                    id=f"synth-{cfg.rng_seed}")
    logger.info("synthesized %s: %.0f s, %d channels, %d seizures",
                rec.id, rec.duration_s, E, len(events))
    return rec


def _read_csv(path: Path) -> Recording:
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline()
        m = _CSV_HEADER.match(first)
        if not m:
            raise ValueError(f"Malformed header in {path}: {first.strip()!r}")
        try:
            fs = float(m.group(1))
        except ValueError:
            raise ValueError(f"Malformed header in {path}: fs={m.group(1)!r}") from None
        channels = int(m.group(2))
        events = []
        for line in f:
            if not line.startswith("#"):
                continue
            parts = [p.strip() for p in line[1:].split(",")]
            if parts[0] != "seizure":
                continue
            if len(parts) != 3:
                raise ValueError(f"Malformed annotation in {path}: {line.strip()!r}")
            events.append(SeizureEvent(onset_s=float(parts[1]), offset_s=float(parts[2])))

    frame = pd.read_csv(path, skiprows=1, header=None, comment="#",
                        dtype=np.float64, float_precision="round_trip")
    if frame.shape[1] != channels or frame.isna().to_numpy().any():
        raise ValueError(
            f"Channel-count mismatch in {path}: header declares {channels}, rows have {frame.shape[1]}"
        )
    return Recording(data=frame.to_numpy().astype(np.float32), fs=fs,
                     annotations=events, id=path.stem)


def _read_rawf32(path: Path) -> Recording:
    header_path = Path(str(path) + ".json")
    if not header_path.exists():
        raise ValueError(f"Missing sidecar header {header_path}")
    header = Recording.load_header(str(header_path))
    channels = int(header["channels"])
    if channels < 1:
        raise ValueError(f"Malformed header {header_path}: channels={channels}")
    flat = np.fromfile(path, dtype="<f4")
    if flat.size % channels:
        raise ValueError(
            f"Channel-count mismatch in {path}: {flat.size} values do not divide into {channels} channels"
        )
    return Recording(data=flat.reshape(-1, channels), fs=header["fs"],
                     annotations=Recording.events_from_header(header),
                     id=header.get("id", path.stem))


def load_recording(path: str, format: str = "csv") -> Recording:
    p = Path(path)
    if format not in FORMATS:
        raise ValueError(f"Unknown recording format {format!r}; expected one of {FORMATS}")
    if not p.exists():
        raise ValueError(f"Recording file {p} does not exist")
    rec = _read_csv(p) if format == "csv" else _read_rawf32(p)
    logger.info("loaded %s (%s): %d samples x %d channels at %.6g Hz, %d seizures",
                rec.id, format, rec.n_samples, rec.n_channels, rec.fs, len(rec.annotations))
    return rec


def save_recording(rec: Recording, path: str, format: str = "csv") -> None:
    p = Path(path)
    if format == "csv":
        with open(p, "w", encoding="utf-8", newline="\n") as f:
            f.write(f"fs={rec.fs!r},channels={rec.n_channels}\n")
            for ev in rec.annotations:
                f.write(f"# seizure,{ev.onset_s!r},{ev.offset_s!r}\n")
            # 9 significant digits round-trip float32 exactly
            np.savetxt(f, rec.data, delimiter=",", fmt="%.9g")
    elif format == "rawf32":
        rec.data.astype("<f4").tofile(p)
        rec.save_header(str(p) + ".json", format="rawf32", byteorder="little")
    else:
        raise ValueError(f"Unknown recording format {format!r}; expected one of {FORMATS}")
    logger.info("wrote %s (%s)", p, format)


def _merge(intervals: Sequence[Tuple[float, float]]) -> List[Tuple[float, float]]:
    merged: List[Tuple[float, float]] = []
    for lo, hi in sorted(intervals):
        if merged and lo <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], hi))
        else:
            merged.append((lo, hi))
    return merged


@dataclass
class CvSplit:
    """Round-robin assignment of seizures to ``k`` folds.

    Each fold owns the context window (``context_s`` wide, centred on the
    seizure) around each of its seizures; overlapping windows of the same
    fold are merged. A time point inside the segments of several folds belongs
    to the fold with the nearest seizure, so folds partition time.
    """

    k: int
    events: List[SeizureEvent]
    assignments: List[int]
    context_s: float
    duration_s: float
    segments: List[List[Tuple[float, float]]] = field(default_factory=list)

    def __post_init__(self):
        if not self.segments:
            half = self.context_s / 2
            per_fold = [[] for _ in range(self.k)]
            for ev, fold in zip(self.events, self.assignments):
                per_fold[fold].append((max(0.0, ev.onset_s - half),
                                       min(self.duration_s, ev.offset_s + half)))
            self.segments = [_merge(iv) for iv in per_fold]

    def fold_events(self, fold: int) -> List[SeizureEvent]:
        return [ev for ev, f in zip(self.events, self.assignments) if f == fold]

    def fold_of(self, t: np.ndarray) -> np.ndarray:
        """Fold index for each time point, -1 when outside every segment."""
        t = np.asarray(t, dtype=np.float64)
        best = np.full(t.shape, -1, dtype=np.int64)
        best_dist = np.full(t.shape, np.inf)
        for ev, fold in zip(self.events, self.assignments):
            dist = np.maximum(0.0, np.maximum(ev.onset_s - t, t - ev.offset_s))
            inside = np.zeros(t.shape, dtype=bool)
            for lo, hi in self.segments[fold]:
                inside |= (t >= lo) & (t <= hi)
            closer = inside & (dist < best_dist)
            best[closer] = fold
            best_dist[closer] = dist[closer]
        return best

    def fold_sizes(self) -> List[int]:
        return [self.assignments.count(f) for f in range(self.k)]


def make_cv_folds(rec: Recording, k: int = 3, context_s: float = DEFAULT_CONTEXT_S) -> CvSplit:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(rec.annotations) < k:
        raise ValueError(f"Recording has {len(rec.annotations)} seizures, fewer than {k} folds")
    events = list(rec.annotations)  # already sorted by onset
    assignments = [i % k for i in range(len(events))]
    split = CvSplit(k=k, events=events, assignments=assignments,
                    context_s=float(context_s), duration_s=rec.duration_s)
    logger.info("cv split of %s: %d folds, sizes %s", rec.id, k, split.fold_sizes())
    return split
