"""Network descriptors and the static two-buffer inference engine.

Activations are stored channel-last, row-major over (H, W), in two flat
buffers. Each computing layer reads the buffer holding its input and writes
its output into the other one; dropout, and batch normalization once folded,
are identities at inference and are skipped.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field, asdict
from typing import Any, ClassVar, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

logger = logging.getLogger(__name__)

Shape = Tuple[int, int, int]  # (H, W, C)

PADDINGS = ("valid", "same")
FRONTENDS = ("raw", "stft")


@dataclass(frozen=True)
class Conv2D:
    out_channels: int
    kernel_h: int
    kernel_w: int
    # "same" exists for descriptor bookkeeping; the engine only runs "valid"
    padding: str = "valid"
    kind: ClassVar[str] = "conv2d"

    def __post_init__(self):
        if min(self.out_channels, self.kernel_h, self.kernel_w) < 1:
            raise ValueError(f"Conv2D dims must be >= 1: {self}")
        if self.padding not in PADDINGS:
            raise ValueError(f"Unknown padding {self.padding!r}")


@dataclass(frozen=True)
class MaxPool2D:
    pool_h: int
    pool_w: int
    kind: ClassVar[str] = "maxpool2d"

    def __post_init__(self):
        if min(self.pool_h, self.pool_w) < 1:
            raise ValueError(f"MaxPool2D dims must be >= 1: {self}")


@dataclass(frozen=True)
class BatchNorm:
    eps: float = 1e-5
    kind: ClassVar[str] = "batchnorm"


@dataclass(frozen=True)
class ReLU:
    kind: ClassVar[str] = "relu"


@dataclass(frozen=True)
class Dropout:
    rate: float
    kind: ClassVar[str] = "dropout"

    def __post_init__(self):
        if not 0 <= self.rate < 1:
            raise ValueError(f"Dropout rate must lie in [0, 1), got {self.rate}")


@dataclass(frozen=True)
class Sigmoid:
    kind: ClassVar[str] = "sigmoid"


@dataclass(frozen=True)
class Dense:
    units: int
    kind: ClassVar[str] = "dense"

    def __post_init__(self):
        if self.units < 1:
            raise ValueError("Dense units must be >= 1")


@dataclass(frozen=True)
class Transpose:
    """Swap the height and channel axes: (H, W, C) -> (C, W, H)."""

    kind: ClassVar[str] = "transpose"


@dataclass(frozen=True)
class GlobalMaxPool:
    kind: ClassVar[str] = "globalmaxpool"


LayerSpec = Union[Conv2D, MaxPool2D, BatchNorm, ReLU, Dropout, Sigmoid, Dense, Transpose, GlobalMaxPool]
LAYER_TYPES = {cls.kind: cls for cls in
               (Conv2D, MaxPool2D, BatchNorm, ReLU, Dropout, Sigmoid, Dense, Transpose, GlobalMaxPool)}


def layer_to_dict(layer: LayerSpec) -> Dict[str, Any]:
    return {"type": layer.kind, **asdict(layer)}


def layer_from_dict(d: Dict[str, Any]) -> LayerSpec:
    d = dict(d)
    kind = d.pop("type", None)
    if kind not in LAYER_TYPES:
        raise ValueError(f"Unknown layer type {kind!r}")
    return LAYER_TYPES[kind](**d)


@dataclass(frozen=True)
class ArchDescriptor:
    name: str
    input_shape: Shape
    layers: Tuple[LayerSpec, ...] = ()
    frontend: str = "raw"
    window_s: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be (H, W, C) with positive dims, got {self.input_shape}")
        if self.frontend not in FRONTENDS:
            raise ValueError(f"Unknown frontend {self.frontend!r}")

    def validate(self) -> None:
        """Shape inference must succeed and end in a single sigmoid probability."""
        if not self.layers:
            raise ValueError(f"{self.name}: descriptor has no layers")
        shapes = infer_shapes(self)
        if shapes[-1] != (1, 1, 1) or not isinstance(self.layers[-1], Sigmoid):
            raise ValueError(f"{self.name}: network must end in a 1x1x1 sigmoid, ends in {shapes[-1]}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "frontend": self.frontend,
            "window_s": self.window_s,
            "layers": [layer_to_dict(l) for l in self.layers],
        }

    @staticmethod
    def from_dict(d: Dict[str, Any]) -> "ArchDescriptor":
        return ArchDescriptor(
            name=d["name"],
            input_shape=tuple(d["input_shape"]),
            layers=tuple(layer_from_dict(l) for l in d.get("layers", [])),
            frontend=d.get("frontend", "raw"),
            window_s=float(d.get("window_s", 1.0)),
        )

    def save_to_json(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)

    @staticmethod
    def load_from_json(path: str) -> "ArchDescriptor":
        with open(path, "r", encoding="utf-8") as f:
            return ArchDescriptor.from_dict(json.load(f))

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _output_shape(layer: LayerSpec, shape: Shape, index: int) -> Shape:
    h, w, c = shape
    if isinstance(layer, Conv2D):
        if layer.padding == "same":
            return (h, w, layer.out_channels)
        if layer.kernel_h > h:
            raise ValueError(f"layer {index}: kernel height {layer.kernel_h} exceeds input height {h}")
        if layer.kernel_w > w:
            raise ValueError(f"layer {index}: kernel width {layer.kernel_w} exceeds input width {w}")
        return (h - layer.kernel_h + 1, w - layer.kernel_w + 1, layer.out_channels)
    if isinstance(layer, MaxPool2D):
        oh, ow = h // layer.pool_h, w // layer.pool_w
        if oh < 1 or ow < 1:
            raise ValueError(f"layer {index}: pool {layer.pool_h}x{layer.pool_w} larger than input {h}x{w}")
        return (oh, ow, c)
    if isinstance(layer, Dense):
        return (1, 1, layer.units)
    if isinstance(layer, Transpose):
        return (c, w, h)
    if isinstance(layer, GlobalMaxPool):
        return (1, 1, c)
    return shape


def infer_shapes(arch: ArchDescriptor) -> List[Shape]:
    """Output shape of every layer, in order."""
    shapes = []
    shape = arch.input_shape
    for i, layer in enumerate(arch.layers):
        shape = _output_shape(layer, shape, i)
        shapes.append(shape)
    return shapes


def input_shapes(arch: ArchDescriptor) -> List[Shape]:
    return [arch.input_shape] + infer_shapes(arch)[:-1]


def param_shapes(arch: ArchDescriptor, folded: bool = False) -> Dict[str, Tuple[int, ...]]:
    shapes: Dict[str, Tuple[int, ...]] = {}
    for i, (layer, (h, w, c)) in enumerate(zip(arch.layers, input_shapes(arch))):
        if isinstance(layer, Conv2D):
            shapes[f"{i}.kernel"] = (layer.kernel_h, layer.kernel_w, c, layer.out_channels)
            shapes[f"{i}.bias"] = (layer.out_channels,)
        elif isinstance(layer, Dense):
            shapes[f"{i}.kernel"] = (h * w * c, layer.units)
            shapes[f"{i}.bias"] = (layer.units,)
        elif isinstance(layer, BatchNorm) and not folded:
            for key in BN_KEYS:
                shapes[f"{i}.{key}"] = (c,)
    return shapes


BN_KEYS = ("gamma", "beta", "mean", "var")


def layer_params(arch: ArchDescriptor) -> List[int]:
    """Learnable parameter count per layer; batchnorm counts gamma, beta and both running stats."""
    counts = []
    for layer, (h, w, c) in zip(arch.layers, input_shapes(arch)):
        if isinstance(layer, Conv2D):
            counts.append(layer.kernel_h * layer.kernel_w * c * layer.out_channels + layer.out_channels)
        elif isinstance(layer, Dense):
            counts.append(h * w * c * layer.units + layer.units)
        elif isinstance(layer, BatchNorm):
            counts.append(4 * c)
        else:
            counts.append(0)
    return counts


def count_params(arch: ArchDescriptor) -> int:
    return sum(layer_params(arch))


def seizurenet_arch(E: int, fs: float = 256.0, window_s: float = 1.0, dropout: float = 0.2) -> ArchDescriptor:
    """SeizureNet for ``E`` electrodes; the last temporal kernel spans the remaining width."""
    if E < 1:
        raise ValueError(f"SeizureNet needs at least one electrode, got E={E}")
    W = int(round(fs * window_s))
    front = (
        Conv2D(20, E, 17), BatchNorm(), ReLU(), MaxPool2D(1, 4), Dropout(dropout),
        Conv2D(10, 1, 5), BatchNorm(), ReLU(), MaxPool2D(1, 4), Dropout(dropout),
        Conv2D(10, 1, 5), BatchNorm(), ReLU(), MaxPool2D(1, 2), Dropout(dropout),
    )
    try:
        remaining = infer_shapes(ArchDescriptor("prefix", (E, W, 1), front))[-1][1]
    except ValueError as e:
        raise ValueError(f"{window_s} s at {fs} Hz is too short for SeizureNet") from e
    tail = (Conv2D(10, 1, remaining), BatchNorm(), ReLU(), Dropout(dropout), Conv2D(1, 1, 1), Sigmoid())
    arch = ArchDescriptor(f"seizurenet-E{E}", (E, W, 1), front + tail, window_s=window_s)
    arch.validate()
    return arch


# totals printed for the baselines; wiring ambiguities make these targets, not assertions
PARAM_TARGETS = {"seizurenet": 3621, "eegnet": 957, "kiral": 15665, "acharya": 96220}
BASELINE_NAMES = ("eegnet", "kiral", "acharya")


def baseline_archs(E: int) -> Dict[str, ArchDescriptor]:
    if E < 1:
        raise ValueError(f"Baselines need at least one electrode, got E={E}")
    eegnet = ArchDescriptor("eegnet", (E, 256, 1), (
        Conv2D(16, E, 1), BatchNorm(), ReLU(),
        Transpose(), Dropout(0.25),
        Conv2D(4, 2, 32, padding="same"), BatchNorm(), ReLU(), MaxPool2D(2, 4), Dropout(0.25),
        Conv2D(4, 8, 4, padding="same"), BatchNorm(), ReLU(), MaxPool2D(2, 4), Dropout(0.25),
        Conv2D(1, 1, 1), GlobalMaxPool(), Sigmoid(),
    ))
    kiral = ArchDescriptor("kiral", (32, 32, E), (
        Conv2D(16, 3, 3), ReLU(), MaxPool2D(2, 2), Dropout(0.7),
        Conv2D(32, 3, 3), ReLU(), MaxPool2D(2, 2), Dropout(0.7),
        Conv2D(32, 3, 3), ReLU(), MaxPool2D(2, 2), Dropout(0.7),
        Dense(32), ReLU(), Dropout(0.5),
        Dense(1), Sigmoid(),
    ), frontend="stft")
    acharya = ArchDescriptor("acharya", (E, 4097, 1), (
        Conv2D(4, E, 6), ReLU(), MaxPool2D(1, 2),
        Conv2D(4, 1, 5), ReLU(), MaxPool2D(1, 2),
        Conv2D(10, 1, 4), ReLU(), MaxPool2D(1, 2),
        Conv2D(10, 1, 4), ReLU(), MaxPool2D(1, 2),
        Conv2D(15, 1, 4), ReLU(), MaxPool2D(1, 2),
        Dense(50), ReLU(), Dense(20), ReLU(),
        Dense(1), Sigmoid(),
    ), window_s=4097 / 256)
    archs = {"eegnet": eegnet, "kiral": kiral, "acharya": acharya}
    for arch in archs.values():
        arch.validate()
    return archs


def reconcile_params(archs: Dict[str, ArchDescriptor]) -> Dict[str, Tuple[int, Optional[int]]]:
    """(counted, printed target) per descriptor; mismatches are logged, never raised."""
    out = {}
    for key, arch in archs.items():
        base = key.split("-")[0]
        counted = count_params(arch)
        target = PARAM_TARGETS.get(base)
        if target is not None and counted != target:
            logger.warning("%s: counted %d parameters, printed total is %d", arch.name, counted, target)
        out[key] = (counted, target)
    return out


@dataclass
class Q15Layer:
    """Fixed-point form of one conv/dense layer.

    Real values are ``q * scale / 32768``. ``bias`` is in accumulator units
    (``in_scale * w_scale / 32768`` per LSB); the output requantization is
    ``(acc * multiplier) >> shift``.
    """

    kernel: np.ndarray
    bias: np.ndarray
    w_scale: float
    in_scale: float
    out_scale: float
    multiplier: int
    shift: int


@dataclass
class Q15Mirror:
    layers: Dict[int, Q15Layer] = field(default_factory=dict)


@dataclass
class WeightSet:
    tensors: Dict[str, np.ndarray]
    arch_digest: str = ""
    folded: bool = False
    q15: Optional[Q15Mirror] = None

    def copy(self) -> "WeightSet":
        return WeightSet({k: v.copy() for k, v in self.tensors.items()},
                         self.arch_digest, self.folded, self.q15)

    def check(self, arch: ArchDescriptor) -> None:
        expected = param_shapes(arch, folded=self.folded)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ValueError(f"Weights do not match {arch.name}: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if tuple(self.tensors[name].shape) != shape:
                raise ValueError(f"Shape mismatch for {name}: {self.tensors[name].shape} != {shape}")

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))


def init_weights(arch: ArchDescriptor, seed: Union[int, np.random.Generator] = 0) -> WeightSet:
    """Glorot-uniform kernels, zero biases, identity batchnorm."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(arch).items():
        key = name.split(".")[1]
        if key == "kernel":
            if len(shape) == 4:
                kh, kw, cin, cout = shape
                fan_in, fan_out = kh * kw * cin, kh * kw * cout
            else:
                fan_in, fan_out = shape
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            tensors[name] = rng.uniform(-limit, limit, shape)
        elif key in ("gamma", "var"):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    return WeightSet(tensors, arch.digest())


def zero_weights(arch: ArchDescriptor) -> WeightSet:
    tensors = {name: (np.ones(shape) if name.endswith((".gamma", ".var")) else np.zeros(shape))
               for name, shape in param_shapes(arch).items()}
    return WeightSet(tensors, arch.digest())


def fold_batchnorm(arch: ArchDescriptor, weights: WeightSet) -> WeightSet:
    """Absorb every batchnorm into the conv/dense layer right before it."""
    if weights.folded:
        return weights.copy()
    t = {k: v.copy() for k, v in weights.tensors.items()}
    for i, layer in enumerate(arch.layers):
        if not isinstance(layer, BatchNorm):
            continue
        if i == 0 or not isinstance(arch.layers[i - 1], (Conv2D, Dense)):
            raise ValueError(f"batchnorm at layer {i} does not follow a convolution")
        missing = [k for k in BN_KEYS if f"{i}.{k}" not in t]
        if missing:
            raise ValueError(f"batchnorm at layer {i} is missing {missing}")
        gamma, beta, mean, var = (t.pop(f"{i}.{k}") for k in BN_KEYS)
        scale = gamma / np.sqrt(var + layer.eps)
        t[f"{i - 1}.kernel"] = t[f"{i - 1}.kernel"] * scale
        t[f"{i - 1}.bias"] = (t[f"{i - 1}.bias"] - mean) * scale + beta
    return WeightSet(t, weights.arch_digest, folded=True)


def arena_elements(arch: ArchDescriptor) -> int:
    """Elements per arena buffer: the largest input or output of any layer."""
    if not arch.layers:
        return 0
    return max(h * w * c for h, w, c in [arch.input_shape] + infer_shapes(arch))


class ActivationArena:
    """Two flat activation buffers plus counters filled in by ``forward``."""

    def __init__(self, n_elements: int, dtype=np.float64):
        self.a = np.zeros(n_elements, dtype=dtype)
        self.b = np.zeros(n_elements, dtype=dtype)
        self.macs = 0
        self.trace: List[Tuple[int, str, str]] = []

    @classmethod
    def for_arch(cls, arch: ArchDescriptor, mode: str = "float") -> "ActivationArena":
        return cls(arena_elements(arch), np.int16 if mode == "q15" else np.float64)

    @property
    def size(self) -> int:
        return int(self.a.size)

    @property
    def nbytes(self) -> int:
        return int(self.a.nbytes + self.b.nbytes)

    def reset_counters(self) -> None:
        self.macs = 0
        self.trace = []


Q15_ONE = 1 << 15
INT16_MIN, INT16_MAX = -(1 << 15), (1 << 15) - 1
INT32_MIN, INT32_MAX = -(1 << 31), (1 << 31) - 1


def to_q15(x, scale: float = 1.0) -> np.ndarray:
    q = np.round(np.asarray(x, dtype=np.float64) / scale * Q15_ONE)
    return np.clip(q, INT16_MIN, INT16_MAX).astype(np.int16)


def _pow2_scale(max_abs: float) -> float:
    if max_abs <= 0:
        return 1.0
    # one bit of headroom over the calibrated range
    return 2.0 ** (math.ceil(math.log2(max_abs)) + 1)


def _fixed_multiplier(ratio: float) -> Tuple[int, int]:
    if ratio <= 0:
        return 0, 0
    frac, exp = math.frexp(ratio)
    m = int(round(frac * Q15_ONE))
    if m == Q15_ONE:
        m //= 2
        exp += 1
    shift = 15 - exp
    if shift < 0:
        raise ValueError(f"Requantization ratio {ratio} out of Q15 range")
    return m, shift


def _requantize(acc: np.ndarray, multiplier: int, shift: int) -> np.ndarray:
    prod = acc.astype(np.int64) * multiplier
    if shift > 0:
        prod = (prod + (1 << (shift - 1))) >> shift
    return np.clip(prod, INT16_MIN, INT16_MAX).astype(np.int16)


def _prepare_input(arch: ArchDescriptor, window) -> np.ndarray:
    window = np.asarray(window)
    h, w, c = arch.input_shape
    if window.shape not in ((h, w, c),) + (((h, w),) if c == 1 else ()):
        raise ValueError(f"Window shape {window.shape} does not match {arch.name} input {(h, w, c)}")
    return window.reshape(-1)


def forward(arch: ArchDescriptor, weights: WeightSet, window, mode: str = "float",
            arena: Optional[ActivationArena] = None) -> float:
    """Seizure probability for one normalized window shaped (E, W)."""
    if mode not in ("float", "q15"):
        raise ValueError(f"Unknown inference mode {mode!r}")
    arch.validate()
    flat = _prepare_input(arch, window)
    if arena is None:
        arena = ActivationArena.for_arch(arch, mode)
    if arena.size < arena_elements(arch):
        raise ValueError(f"Arena of {arena.size} elements is too small for {arch.name}")
    arena.reset_counters()
    if mode == "q15":
        if weights.q15 is None:
            raise ValueError("Weights carry no Q15 mirror; quantize them first")
        if arena.a.dtype != np.int16:
            raise ValueError("Q15 inference needs an int16 arena")
        return _forward_q15(arch, weights, flat, arena)
    if arena.a.dtype != np.float64:
        raise ValueError("Float inference needs a float64 arena")
    return _forward_float(arch, weights, flat, arena)


def _forward_float(arch: ArchDescriptor, weights: WeightSet, flat: np.ndarray,
                   arena: ActivationArena, observe: Optional[Dict[int, float]] = None) -> float:
    t = weights.tensors
    src, dst, src_name, dst_name = arena.a, arena.b, "A", "B"
    shape = arch.input_shape
    src[:flat.size] = flat
    for i, (layer, out_shape) in enumerate(zip(arch.layers, infer_shapes(arch))):
        if isinstance(layer, Dropout) or (isinstance(layer, BatchNorm) and weights.folded):
            continue
        x = src[:int(np.prod(shape))].reshape(shape)
        out = dst[:int(np.prod(out_shape))].reshape(out_shape)
        if isinstance(layer, Conv2D):
            if layer.padding != "valid":
                raise ValueError(f"layer {i}: the engine runs valid convolutions only")
            patches = sliding_window_view(x, (layer.kernel_h, layer.kernel_w), axis=(0, 1))
            np.add(np.tensordot(patches, t[f"{i}.kernel"], axes=([2, 3, 4], [2, 0, 1])),
                   t[f"{i}.bias"], out=out)
            arena.macs += out.size * layer.kernel_h * layer.kernel_w * shape[2]
        elif isinstance(layer, Dense):
            np.add(x.reshape(-1) @ t[f"{i}.kernel"], t[f"{i}.bias"], out=out.reshape(-1))
            arena.macs += t[f"{i}.kernel"].size
        elif isinstance(layer, MaxPool2D):
            oh, ow, ch = out_shape
            np.max(x[:oh * layer.pool_h, :ow * layer.pool_w].reshape(oh, layer.pool_h, ow, layer.pool_w, ch),
                   axis=(1, 3), out=out)
        elif isinstance(layer, BatchNorm):
            scale = t[f"{i}.gamma"] / np.sqrt(t[f"{i}.var"] + layer.eps)
            np.multiply(x - t[f"{i}.mean"], scale, out=out)
            out += t[f"{i}.beta"]
        elif isinstance(layer, ReLU):
            np.maximum(x, 0.0, out=out)
        elif isinstance(layer, GlobalMaxPool):
            np.max(x, axis=(0, 1), keepdims=True, out=out)
        elif isinstance(layer, Transpose):
            out[...] = x.transpose(2, 1, 0)
        elif isinstance(layer, Sigmoid):
            out[...] = expit(x)
        if observe is not None and isinstance(layer, (Conv2D, Dense)):
            observe[i] = max(observe.get(i, 0.0), float(np.max(np.abs(out))))
        arena.trace.append((i, src_name, dst_name))
        src, dst, src_name, dst_name = dst, src, dst_name, src_name
        shape = out_shape
    return float(src[0])


def _forward_q15(arch: ArchDescriptor, weights: WeightSet, flat: np.ndarray, arena: ActivationArena) -> float:
    mirror = weights.q15
    src, dst, src_name, dst_name = arena.a, arena.b, "A", "B"
    shape = arch.input_shape
    scale = 1.0
    src[:flat.size] = to_q15(flat, scale)
    logit: Optional[np.ndarray] = None
    prob = 0.0
    for i, (layer, out_shape) in enumerate(zip(arch.layers, infer_shapes(arch))):
        if isinstance(layer, Dropout):
            continue
        if isinstance(layer, BatchNorm):
            if weights.folded:
                continue
            raise ValueError("Q15 inference needs folded batchnorm")
        x = src[:int(np.prod(shape))].reshape(shape)
        out = dst[:int(np.prod(out_shape))].reshape(out_shape)
        if isinstance(layer, (Conv2D, Dense)):
            ql = mirror.layers[i]
            kernel = ql.kernel.astype(np.int64)
            if isinstance(layer, Conv2D):
                if layer.padding != "valid":
                    raise ValueError(f"layer {i}: the engine runs valid convolutions only")
                patches = sliding_window_view(x, (layer.kernel_h, layer.kernel_w), axis=(0, 1)).astype(np.int64)
                prods = patches[..., None] * kernel.transpose(2, 0, 1, 3)
                wide = prods.sum(axis=(2, 3, 4))
                arena.macs += prods.size
            else:
                prods = x.reshape(-1).astype(np.int64)[:, None] * kernel
                wide = prods.sum(axis=0)
                arena.macs += prods.size
            # Q30 sum of the raw 16x16 products, rounded once into the Q15-unit accumulator
            acc = (wide + (1 << 14)) >> 15
            acc = np.clip(acc + ql.bias, INT32_MIN, INT32_MAX)
            logit = acc * (ql.in_scale * ql.w_scale / Q15_ONE)
            out[...] = _requantize(acc, ql.multiplier, ql.shift).reshape(out_shape)
            scale = ql.out_scale
        else:
            if isinstance(layer, MaxPool2D):
                oh, ow, ch = out_shape
                np.max(x[:oh * layer.pool_h, :ow * layer.pool_w].reshape(oh, layer.pool_h, ow, layer.pool_w, ch),
                       axis=(1, 3), out=out)
            elif isinstance(layer, ReLU):
                np.maximum(x, 0, out=out)
            elif isinstance(layer, GlobalMaxPool):
                np.max(x, axis=(0, 1), keepdims=True, out=out)
            elif isinstance(layer, Transpose):
                out[...] = x.transpose(2, 1, 0)
            elif isinstance(layer, Sigmoid):
                # the accumulator of the layer feeding the sigmoid skips requantization
                z = logit if logit is not None else x.astype(np.float64) * scale / Q15_ONE
                prob = float(expit(np.asarray(z).reshape(-1)[0]))
                out[...] = to_q15(prob)
            if not isinstance(layer, Sigmoid):
                logit = None
        arena.trace.append((i, src_name, dst_name))
        src, dst, src_name, dst_name = dst, src, dst_name, src_name
        shape = out_shape
    return prob


def quantize(arch: ArchDescriptor, weights: WeightSet, calibration: Sequence[np.ndarray]) -> WeightSet:
    """Fold batchnorm and attach a Q15 mirror.

    Weight scales are per-tensor max-abs; activation scales are powers of two
    covering the largest float activation seen on ``calibration`` windows.
    """
    folded = fold_batchnorm(arch, weights)
    arena = ActivationArena.for_arch(arch)
    max_abs: Dict[int, float] = {}
    n_cal = 0
    for window in calibration:
        _forward_float(arch, folded, _prepare_input(arch, window), arena, observe=max_abs)
        n_cal += 1
    if n_cal == 0:
        raise ValueError("Quantization needs at least one calibration window")

    mirror = Q15Mirror()
    in_scale = 1.0
    for i, layer in enumerate(arch.layers):
        if not isinstance(layer, (Conv2D, Dense)):
            continue
        w = folded.tensors[f"{i}.kernel"]
        w_scale = float(np.max(np.abs(w))) or 1.0
        out_scale = _pow2_scale(max_abs.get(i, 0.0))
        acc_lsb = in_scale * w_scale / Q15_ONE
        bias = np.clip(np.round(folded.tensors[f"{i}.bias"] / acc_lsb), INT32_MIN, INT32_MAX).astype(np.int64)
        multiplier, shift = _fixed_multiplier(in_scale * w_scale / out_scale)
        mirror.layers[i] = Q15Layer(kernel=to_q15(w, w_scale), bias=bias, w_scale=w_scale,
                                    in_scale=in_scale, out_scale=out_scale,
                                    multiplier=multiplier, shift=shift)
        in_scale = out_scale
    folded.q15 = mirror
    logger.debug("quantized %s on %d calibration windows", arch.name, n_cal)
    return folded


def predict(arch: ArchDescriptor, weights: WeightSet, windows, mode: str = "float") -> np.ndarray:
    """Probabilities for a stack of windows (n, E, W), one arena reused throughout."""
    arena = ActivationArena.for_arch(arch, mode)
    return np.array([forward(arch, weights, w, mode, arena) for w in windows], dtype=np.float64)


class WeightFileError(ValueError):
    pass


MAGIC = b"SZNW"
FILE_VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i2"), 3: np.dtype("<i4"), 4: np.dtype("<i8")}
_DTYPE_CODES = {dt: code for code, dt in _DTYPES.items()}


def _tensor_entries(weights: WeightSet) -> List[Tuple[str, np.ndarray, float]]:
    entries = [(name, np.asarray(v, dtype="<f8"), 1.0) for name, v in sorted(weights.tensors.items())]
    if weights.q15 is not None:
        for i, ql in sorted(weights.q15.layers.items()):
            entries.append((f"q15.{i}.kernel", ql.kernel.astype("<i2"), ql.w_scale))
            entries.append((f"q15.{i}.bias", ql.bias.astype("<i8"), ql.in_scale * ql.w_scale / Q15_ONE))
            meta = np.array([ql.in_scale, ql.out_scale, ql.multiplier, ql.shift], dtype="<f8")
            entries.append((f"q15.{i}.meta", meta, 1.0))
    return entries


def save_weights(path: str, arch: ArchDescriptor, weights: WeightSet) -> None:
    """Versioned little-endian weight file bound to the descriptor hash."""
    entries = _tensor_entries(weights)
    flags = (1 if weights.folded else 0) | (2 if weights.q15 is not None else 0)
    with open(path, "wb") as f:
        f.write(struct.pack("<4sH32sBI", MAGIC, FILE_VERSION, bytes.fromhex(arch.digest()), flags, len(entries)))
        for name, data, scale in entries:
            raw_name = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw_name)))
            f.write(raw_name)
            f.write(struct.pack("<BB", _DTYPE_CODES[data.dtype], data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(struct.pack("<dQ", scale, data.nbytes))
            f.write(data.tobytes())
    logger.info("wrote weights for %s to %s (%d tensors)", arch.name, path, len(entries))


def load_weights(path: str, arch: ArchDescriptor) -> WeightSet:
    with open(path, "rb") as f:
        blob = f.read()
    head = struct.calcsize("<4sH32sBI")
    if len(blob) < head:
        raise WeightFileError(f"{path} is too short to be a weight file")
    magic, version, digest, flags, n = struct.unpack_from("<4sH32sBI", blob, 0)
    if magic != MAGIC:
        raise WeightFileError(f"{path} is not a weight file (magic {magic!r})")
    if version != FILE_VERSION:
        raise WeightFileError(f"{path}: unsupported weight file version {version}")
    if digest.hex() != arch.digest():
        raise WeightFileError(f"{path} was written for a different descriptor than {arch.name}")
    pos = head

    def take(n_bytes: int) -> bytes:
        nonlocal pos
        if pos + n_bytes > len(blob):
            raise WeightFileError(f"{path} is truncated at byte {pos} ({len(blob)} bytes)")
        chunk = blob[pos:pos + n_bytes]
        pos += n_bytes
        return chunk

    def unpack(fmt: str) -> Tuple:
        return struct.unpack(fmt, take(struct.calcsize(fmt)))

    tensors: Dict[str, np.ndarray] = {}
    scales: Dict[str, float] = {}
    for _ in range(n):
        (name_len,) = unpack("<H")
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise WeightFileError(f"{path}: corrupt tensor name at byte {pos - name_len}") from None
        code, ndim = unpack("<BB")
        if code not in _DTYPES:
            raise WeightFileError(f"{path}: unknown dtype code {code} for {name}")
        shape = unpack(f"<{ndim}I")
        scale, nbytes = unpack("<dQ")
        if nbytes != int(np.prod(shape, dtype=np.int64)) * _DTYPES[code].itemsize:
            raise WeightFileError(f"{path}: {name} declares {nbytes} bytes for shape {shape}")
        tensors[name] = np.frombuffer(take(nbytes), dtype=_DTYPES[code]).reshape(shape).copy()
        scales[name] = scale
    if pos != len(blob):
        raise WeightFileError(f"{path} has {len(blob) - pos} trailing bytes")

    mirror = None
    if flags & 2:
        mirror = Q15Mirror()
        for name in [k for k in tensors if k.startswith("q15.") and k.endswith(".meta")]:
            i = int(name.split(".")[1])
            if f"q15.{i}.kernel" not in tensors or f"q15.{i}.bias" not in tensors or tensors[name].size != 4:
                raise WeightFileError(f"{path}: incomplete Q15 entry for layer {i}")
            in_scale, out_scale, multiplier, shift = tensors.pop(name)
            mirror.layers[i] = Q15Layer(kernel=tensors.pop(f"q15.{i}.kernel").astype(np.int16),
                                        bias=tensors.pop(f"q15.{i}.bias").astype(np.int64),
                                        w_scale=scales[f"q15.{i}.kernel"], in_scale=float(in_scale),
                                        out_scale=float(out_scale), multiplier=int(multiplier), shift=int(shift))
    weights = WeightSet(tensors, arch.digest(), folded=bool(flags & 1), q15=mirror)
    try:
        weights.check(arch)
    except ValueError as e:
        raise WeightFileError(f"{path}: {e}") from e
    return weights
