"""Static memory, op-count, runtime and power accounting for a descriptor."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, asdict
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd

from net import (BASELINE_NAMES, ArchDescriptor, BatchNorm, Conv2D, Dense, Dropout, GlobalMaxPool,
                 MaxPool2D, ReLU, Sigmoid, Shape, Transpose, arena_elements, infer_shapes, input_shapes, layer_params)
from preprocess import MODES, NONLINEARITIES

logger = logging.getLogger(__name__)

WEIGHT_BYTES = {"float32": 4.0, "q15": 2.0, "binary": 1 / 8}
ACTIVATION_BYTES = {"float32": 4, "q15": 2, "binary": 1}

# streaming chain per sample and channel: 5-tap notch biquad, 3-tap first-order highpass
FILTER_MACS_PER_SAMPLE = 8
STATS_OPS_PER_SAMPLE = {"exact": 4, "grand_mean": 2, "zero_mean": 1}
# scale by 1/sigma and the gain
NORMALIZE_OPS_PER_SAMPLE = 2

# TrueNorth figures for the binary 18-layer reference network
TRUENORTH_NEURONS = 107_400
TRUENORTH_NW_PER_NEURON = (40.0, 70.0)
BINARY_NETWORK_WEIGHTS = 4_200_000


def _strict_from_dict(cls, d: Dict[str, Any], section: str):
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ValueError(f"Unknown {section} keys: {sorted(unknown)}")
    return cls(**d)


@dataclass
class HardwareProfile:
    memory_budget_bytes: int = 262_144
    max_clock_hz: float = 8e6
    active_current_uA_per_MHz: float = 118.0
    standby_current_uA: float = 0.5
    supply_V: float = 3.0
    cycles_per_mac: float = 1.0
    cycles_per_compare: float = 1.0
    cycles_per_elem_misc: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value <= 0:
                raise ValueError(f"HardwareProfile.{name} must be > 0, got {value}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @staticmethod
    def from_dict(d: Dict[str, Any]) -> "HardwareProfile":
        return _strict_from_dict(HardwareProfile, d, "hardware profile")


@dataclass
class MemoryModel:
    precision: str = "q15"
    preproc_mode: str = "grand_mean"
    nonlinearity: str = "lintanh"
    window_s: int = 600
    fs: int = 256
    preproc_value_bytes: int = 4
    tanh_lut_entries: int = 256
    lut_entry_bytes: int = 2
    # folded batchnorm stores nothing and costs nothing at inference
    fold_bn: bool = True
    # precision the comparison baselines are costed at; None costs them at ``precision``
    baseline_precision: Optional[str] = "float32"

    def __post_init__(self):
        if self.precision not in WEIGHT_BYTES:
            raise ValueError(f"Unknown precision {self.precision!r}; expected one of {tuple(WEIGHT_BYTES)}")
        if self.baseline_precision is not None and self.baseline_precision not in WEIGHT_BYTES:
            raise ValueError(f"Unknown baseline precision {self.baseline_precision!r}")
        if self.preproc_mode not in MODES:
            raise ValueError(f"Unknown preprocess mode {self.preproc_mode!r}")
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"Unknown nonlinearity {self.nonlinearity!r}")
        for name in ("window_s", "fs", "preproc_value_bytes", "lut_entry_bytes"):
            if getattr(self, name) <= 0:
                raise ValueError(f"MemoryModel.{name} must be > 0")
        if self.tanh_lut_entries < 0:
            raise ValueError("tanh_lut_entries must be >= 0")

    def for_arch(self, arch: ArchDescriptor) -> "MemoryModel":
        if arch.name in BASELINE_NAMES and self.baseline_precision is not None:
            return dataclasses.replace(self, precision=self.baseline_precision)
        return self

    @property
    def bytes_per_weight(self) -> float:
        return WEIGHT_BYTES[self.precision]

    @property
    def bytes_per_activation(self) -> int:
        return ACTIVATION_BYTES[self.precision]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @staticmethod
    def from_dict(d: Dict[str, Any]) -> "MemoryModel":
        return _strict_from_dict(MemoryModel, d, "memory model")


@dataclass
class LayerCost:
    index: int
    kind: str
    output_shape: Shape
    params: int
    param_bytes: float
    macs: int
    bias_adds: int
    compares: int
    misc_ops: int
    output_elements: int
    cycles: float = 0.0


def _with_input(arch: ArchDescriptor, input_shape: Optional[Shape]) -> ArchDescriptor:
    if input_shape is None or tuple(input_shape) == arch.input_shape:
        return arch
    return dataclasses.replace(arch, input_shape=tuple(input_shape))


def count_ops(arch: ArchDescriptor, input_shape: Optional[Shape] = None,
              model: Optional[MemoryModel] = None, profile: Optional[HardwareProfile] = None) -> List[LayerCost]:
    """Per-layer MACs, compares and element-wise ops of one forward pass."""
    model = model or MemoryModel()
    profile = profile or HardwareProfile()
    arch = _with_input(arch, input_shape)
    costs = []
    for i, (layer, (h, w, c), out_shape, n_params) in enumerate(
            zip(arch.layers, input_shapes(arch), infer_shapes(arch), layer_params(arch))):
        oh, ow, oc = out_shape
        out = oh * ow * oc
        macs = bias_adds = compares = misc = 0
        stored = n_params
        if isinstance(layer, Conv2D):
            macs = out * layer.kernel_h * layer.kernel_w * c
            bias_adds = out
        elif isinstance(layer, Dense):
            macs = h * w * c * layer.units
            bias_adds = layer.units
        elif isinstance(layer, MaxPool2D):
            compares = out * (layer.pool_h * layer.pool_w - 1)
        elif isinstance(layer, GlobalMaxPool):
            compares = h * w * c - c
        elif isinstance(layer, ReLU):
            compares = out
        elif isinstance(layer, BatchNorm):
            if model.fold_bn:
                stored = 0
            else:
                misc = 2 * out
        elif isinstance(layer, (Transpose, Sigmoid)):
            misc = out
        cycles = (macs * profile.cycles_per_mac + compares * profile.cycles_per_compare
                  + (bias_adds + misc) * profile.cycles_per_elem_misc)
        costs.append(LayerCost(index=i, kind=layer.kind, output_shape=out_shape, params=n_params,
                               param_bytes=stored * model.bytes_per_weight, macs=macs, bias_adds=bias_adds,
                               compares=compares, misc_ops=misc, output_elements=out, cycles=cycles))
    return costs


def preproc_ring_bytes(n_channels: int, model: MemoryModel, preproc_mode: Optional[str] = None) -> int:
    mode = preproc_mode or model.preproc_mode
    per_channel = {
        "exact": model.window_s * model.fs,
        "grand_mean": 2 * model.window_s,
        "zero_mean": model.window_s,
    }[mode]
    return per_channel * n_channels * model.preproc_value_bytes


def _n_electrodes(arch: ArchDescriptor) -> int:
    h, _, c = arch.input_shape
    # spectrogram inputs carry electrodes as channels, raw inputs as rows
    return c if arch.frontend == "stft" else h


def stft_ops(arch: ArchDescriptor) -> float:
    """FFT cost of building a (freq, frames, channels) input: 5 N log2 N per frame."""
    if arch.frontend != "stft":
        return 0.0
    h, w, c = arch.input_shape
    n = 2 * h
    return 5.0 * n * math.log2(n) * w * c


def preproc_cycles(arch: ArchDescriptor, model: Optional[MemoryModel] = None,
                   profile: Optional[HardwareProfile] = None, period_s: float = 1.0,
                   preproc_mode: Optional[str] = None) -> float:
    """Cycles spent conditioning ``fs * period_s`` samples per electrode."""
    model = model or MemoryModel()
    profile = profile or HardwareProfile()
    mode = preproc_mode or model.preproc_mode
    samples = model.fs * period_s * _n_electrodes(arch)
    nonlin_compares = 2 if model.nonlinearity == "lintanh" else 0
    nonlin_misc = 0 if model.nonlinearity == "lintanh" else 1
    per_sample = (FILTER_MACS_PER_SAMPLE * profile.cycles_per_mac
                  + nonlin_compares * profile.cycles_per_compare
                  + (STATS_OPS_PER_SAMPLE[mode] + NORMALIZE_OPS_PER_SAMPLE + nonlin_misc) * profile.cycles_per_elem_misc)
    return samples * per_sample + stft_ops(arch) * profile.cycles_per_elem_misc


@dataclass
class MemoryBreakdown:
    param_bytes: float
    arena_elements: int
    arena_bytes: int
    preproc_ring_bytes: int
    lut_bytes: int
    budget_bytes: int

    @property
    def total_bytes(self) -> float:
        return self.param_bytes + self.arena_bytes + self.preproc_ring_bytes + self.lut_bytes

    @property
    def feasible(self) -> bool:
        return self.total_bytes <= self.budget_bytes


def memory_footprint(arch: ArchDescriptor, model: Optional[MemoryModel] = None,
                     preproc_mode: Optional[str] = None,
                     profile: Optional[HardwareProfile] = None) -> MemoryBreakdown:
    """Parameters + two arena buffers + preprocessing ring + lookup tables."""
    model = model or MemoryModel()
    profile = profile or HardwareProfile()
    elements = arena_elements(arch)
    param_bytes = sum(c.param_bytes for c in count_ops(arch, model=model, profile=profile))
    lut = model.tanh_lut_entries * model.lut_entry_bytes if model.nonlinearity == "tanh" else 0
    return MemoryBreakdown(
        param_bytes=param_bytes,
        arena_elements=elements,
        arena_bytes=2 * elements * model.bytes_per_activation,
        preproc_ring_bytes=preproc_ring_bytes(_n_electrodes(arch), model, preproc_mode),
        lut_bytes=lut,
        budget_bytes=profile.memory_budget_bytes,
    )


@dataclass
class RealtimeResult:
    cycles: float
    budget_cycles: float
    utilization: float
    passes: bool


def realtime_check(report: Union["FeasibilityReport", float], profile: Optional[HardwareProfile] = None,
                   period_s: float = 1.0) -> RealtimeResult:
    profile = profile or HardwareProfile()
    cycles = report.total_cycles if isinstance(report, FeasibilityReport) else float(report)
    budget = profile.max_clock_hz * period_s
    utilization = cycles / budget
    return RealtimeResult(cycles, budget, utilization, utilization <= 1.0)


def estimate_power(report: Union["FeasibilityReport", float], profile: Optional[HardwareProfile] = None,
                   duty: float = 1.0) -> float:
    """Average watts at ``duty`` inferences per second, active at full clock, standby otherwise."""
    profile = profile or HardwareProfile()
    cycles = report.total_cycles if isinstance(report, FeasibilityReport) else float(report)
    active = cycles * duty / profile.max_clock_hz
    if active > 1:
        raise ValueError(f"Utilization {active:.3f} exceeds 1; the device cannot keep up")
    active_uA = profile.active_current_uA_per_MHz * profile.max_clock_hz / 1e6
    current_uA = active * active_uA + (1 - active) * profile.standby_current_uA
    return profile.supply_V * current_uA * 1e-6


def truenorth_power(neurons: int = TRUENORTH_NEURONS,
                    nw_per_neuron: Tuple[float, float] = TRUENORTH_NW_PER_NEURON) -> Tuple[float, float]:
    """(low, high) watts for a neuromorphic deployment."""
    lo, hi = nw_per_neuron
    return neurons * lo * 1e-9, neurons * hi * 1e-9


def power_ratio(reference_w: float, estimate_w: float) -> float:
    if estimate_w <= 0:
        raise ValueError("Power estimate must be > 0")
    return reference_w / estimate_w


@dataclass
class StorageCheck:
    n_weights: int
    bytes_per_weight: float
    required_bytes: float
    budget_bytes: int

    @property
    def feasible(self) -> bool:
        return self.required_bytes <= self.budget_bytes


def weight_storage_check(n_weights: int = BINARY_NETWORK_WEIGHTS, bytes_per_weight: float = WEIGHT_BYTES["binary"],
                         profile: Optional[HardwareProfile] = None) -> StorageCheck:
    profile = profile or HardwareProfile()
    return StorageCheck(n_weights, bytes_per_weight, n_weights * bytes_per_weight, profile.memory_budget_bytes)


@dataclass
class FeasibilityReport:
    arch_name: str
    layers: List[LayerCost]
    memory: MemoryBreakdown
    preproc_cycles: float
    period_s: float
    realtime: RealtimeResult
    power_w: Optional[float]

    @property
    def forward_cycles(self) -> float:
        return sum(c.cycles for c in self.layers)

    @property
    def total_cycles(self) -> float:
        return self.preproc_cycles + self.forward_cycles

    @property
    def total_macs(self) -> int:
        return sum(c.macs for c in self.layers)

    @property
    def dense_param_share(self) -> float:
        dense = sum(c.param_bytes for c in self.layers if c.kind == Dense.kind)
        return dense / self.memory.total_bytes if self.memory.total_bytes else 0.0

    @property
    def feasible(self) -> bool:
        return self.memory.feasible and self.realtime.passes

    def summary(self) -> Dict[str, Any]:
        return {
            "arch": self.arch_name,
            "params": sum(c.params for c in self.layers),
            "param_bytes": self.memory.param_bytes,
            "arena_bytes": self.memory.arena_bytes,
            "preproc_ring_bytes": self.memory.preproc_ring_bytes,
            "lut_bytes": self.memory.lut_bytes,
            "total_memory_bytes": self.memory.total_bytes,
            "memory_budget_bytes": self.memory.budget_bytes,
            "memory_ok": self.memory.feasible,
            "macs": self.total_macs,
            "preproc_cycles": self.preproc_cycles,
            "forward_cycles": self.forward_cycles,
            "total_cycles": self.total_cycles,
            "utilization": self.realtime.utilization,
            "realtime_ok": self.realtime.passes,
            "power_w": self.power_w,
            "dense_param_share": self.dense_param_share,
        }


def feasibility_report(arch: ArchDescriptor, model: Optional[MemoryModel] = None,
                       profile: Optional[HardwareProfile] = None, period_s: float = 1.0) -> FeasibilityReport:
    model = (model or MemoryModel()).for_arch(arch)
    profile = profile or HardwareProfile()
    layers = count_ops(arch, model=model, profile=profile)
    pre = preproc_cycles(arch, model, profile, period_s)
    cycles = pre + sum(c.cycles for c in layers)
    realtime = realtime_check(cycles, profile, period_s)
    power = estimate_power(cycles, profile, 1.0 / period_s) if realtime.passes else None
    report = FeasibilityReport(arch.name, layers, memory_footprint(arch, model, profile=profile),
                               pre, period_s, realtime, power)
    if not report.memory.feasible:
        logger.warning("%s needs %.0f bytes, budget is %d", arch.name, report.memory.total_bytes,
                       report.memory.budget_bytes)
    if not realtime.passes:
        logger.warning("%s needs %.3g cycles per %.3g s, utilization %.2f", arch.name, cycles, period_s,
                       realtime.utilization)
    return report


def compare_architectures(archs: Sequence[ArchDescriptor], model: Optional[MemoryModel] = None,
                          profile: Optional[HardwareProfile] = None, period_s: float = 1.0) -> pd.DataFrame:
    """Stacked memory and cycle blocks per descriptor, layers in execution order."""
    rows = []
    for arch in archs:
        report = feasibility_report(arch, model, profile, period_s)
        rows.append({"arch": arch.name, "block": "preprocessing", "kind": arch.frontend,
                     "memory_bytes": report.memory.preproc_ring_bytes, "cycles": report.preproc_cycles})
        for c in report.layers:
            rows.append({"arch": arch.name, "block": f"{c.index}:{c.kind}", "kind": c.kind,
                         "memory_bytes": c.param_bytes, "cycles": c.cycles})
        rows.append({"arch": arch.name, "block": "arena", "kind": "buffers",
                     "memory_bytes": report.memory.arena_bytes, "cycles": 0.0})
        if report.memory.lut_bytes:
            rows.append({"arch": arch.name, "block": "lut", "kind": "tanh",
                         "memory_bytes": report.memory.lut_bytes, "cycles": 0.0})
    return pd.DataFrame(rows, columns=["arch", "block", "kind", "memory_bytes", "cycles"])


def summarize_architectures(archs: Sequence[ArchDescriptor], model: Optional[MemoryModel] = None,
                            profile: Optional[HardwareProfile] = None, period_s: float = 1.0) -> pd.DataFrame:
    """One row per descriptor; ``runtime_ratio`` is relative to the first one."""
    df = pd.DataFrame([feasibility_report(a, model, profile, period_s).summary() for a in archs])
    if len(df):
        df["runtime_ratio"] = df["total_cycles"] / df["total_cycles"].iloc[0]
    return df
