"""Run configuration: one JSON file with a section per pipeline stage."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from typing import Any, Dict, List, Optional

from metrics import FP_MODES
from preprocess import PreprocessConfig
from resources import HardwareProfile, MemoryModel
from signal_io import DEFAULT_CONTEXT_S, FORMATS, SynthConfig
from train import SamplerConfig, TrainConfig

VARIANTS = ("seizurenet", "eegnet", "kiral", "acharya")
INFERENCE_MODES = ("float", "q15")


def _reject_unknown(cls, d: Dict[str, Any], section: str) -> None:
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ValueError(f"Unknown {section} keys: {sorted(unknown)}")


def _reject_seed_conflicts(d: Dict[str, Any]) -> None:
    """Section seeds are derived from the run seed; a file may repeat it but not contradict it."""
    seed = d.get("seed", 0)
    explicit = {
        "data.synth.rng_seed": d.get("data", {}).get("synth", {}).get("rng_seed"),
        "train.seed": d.get("train", {}).get("seed"),
        "sampler.rng_seed": d.get("sampler", {}).get("rng_seed"),
    }
    conflicts = {k: v for k, v in explicit.items() if v is not None and v != seed}
    if conflicts:
        raise ValueError(f"Seeds {conflicts} contradict the run seed {seed}; set the top-level seed instead")


@dataclass
class DataConfig:
    # a recording file; when unset the synthetic generator is used
    path: Optional[str] = None
    format: str = "csv"
    synth: SynthConfig = field(default_factory=SynthConfig)

    def __post_init__(self):
        if self.format not in FORMATS:
            raise ValueError(f"Unknown recording format {self.format!r}; expected one of {FORMATS}")

    def to_dict(self) -> Dict[str, Any]:
        return {"path": self.path, "format": self.format, "synth": self.synth.to_dict()}

    @staticmethod
    def from_dict(d: Dict[str, Any]) -> "DataConfig":
        _reject_unknown(DataConfig, d, "data")
        d = dict(d)
        if "synth" in d:
            d["synth"] = SynthConfig.from_dict(d["synth"])
        return DataConfig(**d)


@dataclass
class ArchConfig:
    variant: str = "seizurenet"
    # electrode count; taken from the recording when unset
    E: Optional[int] = None
    window_s: float = 1.0
    dropout: float = 0.2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"Unknown architecture {self.variant!r}; expected one of {VARIANTS}")
        if self.E is not None and self.E < 1:
            raise ValueError("E must be >= 1")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @staticmethod
    def from_dict(d: Dict[str, Any]) -> "ArchConfig":
        _reject_unknown(ArchConfig, d, "arch")
        return ArchConfig(**d)


@dataclass
class EvalConfig:
    threshold: float = 0.5
    thresholds: List[float] = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(1, 10)])
    stride_s: float = 1.0
    fp_mode: str = "runs"
    mode: str = "float"
    folds: int = 3
    context_s: float = DEFAULT_CONTEXT_S
    calibration_windows: int = 256

    def __post_init__(self):
        self.thresholds = [float(t) for t in self.thresholds]
        for th in [self.threshold] + self.thresholds:
            if not 0 < th < 1:
                raise ValueError(f"Thresholds must lie in (0, 1), got {th}")
        if self.fp_mode not in FP_MODES:
            raise ValueError(f"Unknown fp mode {self.fp_mode!r}; expected one of {FP_MODES}")
        if self.mode not in INFERENCE_MODES:
            raise ValueError(f"Unknown inference mode {self.mode!r}; expected one of {INFERENCE_MODES}")
        if self.stride_s <= 0 or self.context_s <= 0:
            raise ValueError("stride_s and context_s must be > 0")
        if self.folds < 1 or self.calibration_windows < 1:
            raise ValueError("folds and calibration_windows must be >= 1")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @staticmethod
    def from_dict(d: Dict[str, Any]) -> "EvalConfig":
        _reject_unknown(EvalConfig, d, "eval")
        return EvalConfig(**d)


@dataclass
class ResourcesConfig:
    profile: HardwareProfile = field(default_factory=HardwareProfile)
    memory: MemoryModel = field(default_factory=MemoryModel)
    compare: List[str] = field(default_factory=lambda: list(VARIANTS))
    # optional descriptor JSON accounted instead of the configured variant
    descriptor: Optional[str] = None
    period_s: float = 1.0

    def __post_init__(self):
        for name in self.compare:
            if name not in VARIANTS:
                raise ValueError(f"Unknown architecture {name!r} in compare list")
        if self.period_s <= 0:
            raise ValueError("period_s must be > 0")

    def to_dict(self) -> Dict[str, Any]:
        return {"profile": self.profile.to_dict(), "memory": self.memory.to_dict(),
                "compare": list(self.compare), "descriptor": self.descriptor, "period_s": self.period_s}

    @staticmethod
    def from_dict(d: Dict[str, Any]) -> "ResourcesConfig":
        _reject_unknown(ResourcesConfig, d, "resources")
        d = dict(d)
        if "profile" in d:
            d["profile"] = HardwareProfile.from_dict(d["profile"])
        if "memory" in d:
            d["memory"] = MemoryModel.from_dict(d["memory"])
        return ResourcesConfig(**d)


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    resources: ResourcesConfig = field(default_factory=ResourcesConfig)
    seed: int = 0
    output_dir: str = "out"

    def __post_init__(self):
        self.apply_seed(self.seed)

    def apply_seed(self, seed: int) -> None:
        """The run seed drives the synthetic data, the initialization and the sampler."""
        self.seed = int(seed)
        self.data.synth.rng_seed = self.seed
        self.train.seed = self.seed
        self.sampler.rng_seed = self.seed

    def to_dict(self) -> Dict[str, Any]:
        return {
            "data": self.data.to_dict(),
            "preprocess": self.preprocess.to_dict(),
            "arch": self.arch.to_dict(),
            "train": self.train.to_dict(),
            "sampler": self.sampler.to_dict(),
            "eval": self.eval.to_dict(),
            "resources": self.resources.to_dict(),
            "seed": self.seed,
            "output_dir": self.output_dir,
        }

    @staticmethod
    def from_dict(d: Dict[str, Any]) -> "RunConfig":
        _reject_unknown(RunConfig, d, "top-level config")
        _reject_seed_conflicts(d)
        sections = {
            "data": DataConfig.from_dict,
            "preprocess": PreprocessConfig.from_dict,
            "arch": ArchConfig.from_dict,
            "train": TrainConfig.from_dict,
            "sampler": SamplerConfig.from_dict,
            "eval": EvalConfig.from_dict,
            "resources": ResourcesConfig.from_dict,
        }
        kwargs = {name: parse(d[name]) for name, parse in sections.items() if name in d}
        for key in ("seed", "output_dir"):
            if key in d:
                kwargs[key] = d[key]
        return RunConfig(**kwargs)

    def save_to_json(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @staticmethod
    def load_from_json(path: str) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as f:
            try:
                raw = json.load(f)
            except json.JSONDecodeError as e:
                raise ValueError(f"Config {path} is not valid JSON: {e}") from e
        if not isinstance(raw, dict):
            raise ValueError(f"Config {path} must hold a JSON object")
        return RunConfig.from_dict(raw)

    def hash(self) -> str:
        """Short digest of everything that shapes the results; the output directory is left out."""
        d = self.to_dict()
        d.pop("output_dir")
        canonical = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]
