from dataclasses import dataclass, field
from typing import List, Dict, Any
import json

import numpy as np


@dataclass(frozen=True)
class SeizureEvent:
    onset_s: float
    offset_s: float

    def __post_init__(self):
        # normalize numeric types to float
        object.__setattr__(self, "onset_s", float(self.onset_s))
        object.__setattr__(self, "offset_s", float(self.offset_s))

        if self.onset_s < 0:
            raise ValueError(f"Seizure onset must be >= 0, got {self.onset_s}")
        if self.offset_s <= self.onset_s:
            raise ValueError(
                f"Seizure offset must be > onset, got [{self.onset_s}, {self.offset_s}]"
            )

    @property
    def duration_s(self) -> float:
        return self.offset_s - self.onset_s

    def contains(self, t_end: float) -> bool:
        """True when a window ending at ``t_end`` is ictal: onset < t_end <= offset."""
        return self.onset_s < t_end <= self.offset_s

    def onset_weight(self, t_end):
        """Loss weight falling linearly from 1.0 at onset to 0.0 at offset."""
        return (self.offset_s - t_end) / self.duration_s

    def to_dict(self) -> Dict[str, Any]:
        return {"onset_s": self.onset_s, "offset_s": self.offset_s}

    @staticmethod
    def from_dict(d: Dict[str, Any]) -> "SeizureEvent":
        return SeizureEvent(onset_s=d["onset_s"], offset_s=d["offset_s"])


@dataclass
class Recording:
    """Multichannel EEG, ``data`` shaped (T_samples, E_channels), float32."""

    data: np.ndarray
    fs: float
    annotations: List[SeizureEvent] = field(default_factory=list)
    id: str = "recording"

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        self.fs = float(self.fs)
        self.annotations = sorted(self.annotations, key=lambda e: e.onset_s)
        self.validate()

    def validate(self) -> None:
        if self.fs <= 0:
            raise ValueError(f"Sampling rate must be > 0, got {self.fs}")
        if self.data.ndim != 2:
            raise ValueError(f"Recording data must be 2-D (samples x channels), got {self.data.ndim}-D")
        if self.data.shape[1] < 1:
            raise ValueError("Recording needs at least one channel")
        for ev in self.annotations:
            if not isinstance(ev, SeizureEvent):
                raise ValueError("All annotations must be SeizureEvent instances")
            if ev.offset_s > self.duration_s:
                raise ValueError(
                    f"Seizure [{ev.onset_s}, {ev.offset_s}] ends after the recording ({self.duration_s} s)"
                )
        for prev, nxt in zip(self.annotations, self.annotations[1:]):
            if nxt.onset_s < prev.offset_s:
                raise ValueError(
                    f"Overlapping annotations: [{prev.onset_s}, {prev.offset_s}] and [{nxt.onset_s}, {nxt.offset_s}]"
                )

    @property
    def n_samples(self) -> int:
        return int(self.data.shape[0])

    @property
    def n_channels(self) -> int:
        return int(self.data.shape[1])

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.fs

    @property
    def seizure_time_s(self) -> float:
        return sum(ev.duration_s for ev in self.annotations)

    def header_dict(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "fs": self.fs,
            "channels": self.n_channels,
            "annotations": [ev.to_dict() for ev in self.annotations],
        }

    @staticmethod
    def events_from_header(d: Dict[str, Any]) -> List[SeizureEvent]:
        return [SeizureEvent.from_dict(a) for a in d.get("annotations", [])]

    def save_header(self, path: str, **extra: Any) -> None:
        header = self.header_dict()
        header.update(extra)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(header, f, indent=2)

    @staticmethod
    def load_header(path: str) -> Dict[str, Any]:
        with open(path, "r", encoding="utf-8") as f:
            header = json.load(f)
        for key in ("fs", "channels"):
            if key not in header:
                raise ValueError(f"Malformed header {path}: missing '{key}'")
        return header
