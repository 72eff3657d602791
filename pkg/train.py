"""Oversampled mini-batch training of a descriptor network with Adam.

The batch path runs in float64 on (N, H, W, C) tensors and supports the
layers SeizureNet is built from: valid Conv2D, MaxPool2D, BatchNorm, ReLU,
Dropout and a final Sigmoid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from model import SeizureEvent
from net import (ArchDescriptor, BatchNorm, Conv2D, Dropout, MaxPool2D, ReLU, Sigmoid,
                 WeightSet, init_weights)
from preprocess import WindowSet

logger = logging.getLogger(__name__)

P_CLAMP = 1e-7
TRAINABLE = ("kernel", "bias", "gamma", "beta")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_loss: Optional[float]):
        super().__init__(f"Loss became non-finite at step {step} (last finite loss: {last_loss})")
        self.step = step
        self.last_loss = last_loss


def _strict_from_dict(cls, d: Dict[str, Any], section: str):
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ValueError(f"Unknown {section} keys: {sorted(unknown)}")
    return cls(**d)


@dataclass
class SamplerConfig:
    p_ictal: float = 0.1
    batch_size: int = 256
    rng_seed: int = 0

    def __post_init__(self):
        # p_ictal = 1 is allowed: an all-ictal batch is a valid degenerate case
        if not 0 < self.p_ictal <= 1:
            raise ValueError(f"p_ictal must lie in (0, 1], got {self.p_ictal}")
        if self.batch_size < 1:
            raise ValueError("Batch size must be >= 1")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @staticmethod
    def from_dict(d: Dict[str, Any]) -> "SamplerConfig":
        return _strict_from_dict(SamplerConfig, d, "sampler")


@dataclass
class TrainConfig:
    steps: int = 2000
    stride_s: float = 0.5
    # overrides every Dropout rate in the descriptor; None keeps the descriptor's
    dropout: Optional[float] = 0.2
    bn_momentum: float = 0.99
    log_every: int = 100
    seed: int = 0
    exclude_warmup: bool = True

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.stride_s <= 0:
            raise ValueError("stride_s must be > 0")
        if self.dropout is not None and not 0 <= self.dropout < 1:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not 0 <= self.bn_momentum < 1:
            raise ValueError("bn_momentum must lie in [0, 1)")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @staticmethod
    def from_dict(d: Dict[str, Any]) -> "TrainConfig":
        return _strict_from_dict(TrainConfig, d, "train")


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def update(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        """One bias-corrected Adam step, in place on ``params``."""
        self.step += 1
        bc1 = 1 - self.beta1 ** self.step
        bc2 = 1 - self.beta2 ** self.step
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            params[name] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def onset_weight(t_end: float, event: SeizureEvent) -> float:
    """1.0 at onset falling linearly to 0.0 at offset."""
    if not event.onset_s <= t_end <= event.offset_s:
        raise ValueError(f"t_end={t_end} lies outside seizure [{event.onset_s}, {event.offset_s}]")
    return float(event.onset_weight(t_end))


@dataclass
class Batch:
    x: np.ndarray  # (N, E, W)
    y: np.ndarray
    w: np.ndarray
    index: np.ndarray

    def __len__(self) -> int:
        return int(len(self.y))


def sample_batch(pool: WindowSet, cfg: SamplerConfig, rng: Optional[np.random.Generator] = None) -> Batch:
    """Each slot is ictal with probability ``p_ictal``, then uniform within its class."""
    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    ictal = np.flatnonzero(pool.label == 1)
    interictal = np.flatnonzero(pool.label == 0)
    if len(ictal) == 0:
        raise ValueError("Window pool has no ictal windows")
    if len(interictal) == 0 and cfg.p_ictal < 1:
        raise ValueError("Window pool has no interictal windows")

    pick = rng.random(cfg.batch_size) < cfg.p_ictal
    n_ictal = int(pick.sum())
    index = np.empty(cfg.batch_size, dtype=np.int64)
    index[pick] = ictal[rng.integers(0, len(ictal), n_ictal)]
    if n_ictal < cfg.batch_size:
        index[~pick] = interictal[rng.integers(0, len(interictal), cfg.batch_size - n_ictal)]
    y = pool.label[index].astype(np.float64)
    return Batch(x=pool.x[index], y=y, w=np.where(y == 1, pool.onset_weight[index], 1.0), index=index)


def weighted_bce(p, y, w):
    p = np.clip(p, P_CLAMP, 1 - P_CLAMP)
    return -(w * y * np.log(p) + (1 - y) * np.log(1 - p))


@dataclass
class Gradients:
    loss: float
    grads: Dict[str, np.ndarray]
    # per batchnorm layer: (batch mean, unbiased batch variance)
    bn_stats: Dict[int, Tuple[np.ndarray, np.ndarray]]
    probs: np.ndarray


def _check_trainable(arch: ArchDescriptor) -> None:
    arch.validate()
    for i, layer in enumerate(arch.layers[:-1]):
        if isinstance(layer, Conv2D) and layer.padding != "valid":
            raise ValueError(f"layer {i}: training supports valid convolutions only")
        if not isinstance(layer, (Conv2D, MaxPool2D, BatchNorm, ReLU, Dropout)):
            raise ValueError(f"layer {i}: training does not support {type(layer).__name__}")


def _as_input(arch: ArchDescriptor, x: np.ndarray) -> np.ndarray:
    h, w, c = arch.input_shape
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] not in ((h, w), (h, w, c)):
        raise ValueError(f"Batch shape {x.shape} does not match {arch.name} input {(h, w, c)}")
    return x.reshape(len(x), h, w, c)


def _forward_batch(arch: ArchDescriptor, params: Dict[str, np.ndarray], x: np.ndarray,
                   rng: Optional[np.random.Generator], dropout: Optional[float], training: bool):
    caches: List[Any] = []
    bn_stats: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}
    for i, layer in enumerate(arch.layers[:-1]):
        if isinstance(layer, Conv2D):
            patches = sliding_window_view(x, (layer.kernel_h, layer.kernel_w), axis=(1, 2))
            caches.append(x)
            x = np.tensordot(patches, params[f"{i}.kernel"], axes=([3, 4, 5], [2, 0, 1])) + params[f"{i}.bias"]
        elif isinstance(layer, BatchNorm):
            gamma, beta = params[f"{i}.gamma"], params[f"{i}.beta"]
            if training:
                mean = x.mean(axis=(0, 1, 2))
                var = x.var(axis=(0, 1, 2))
                m = x.size // x.shape[-1]
                bn_stats[i] = (mean, var * m / max(m - 1, 1))
            else:
                mean, var = params[f"{i}.mean"], params[f"{i}.var"]
            inv = 1.0 / np.sqrt(var + layer.eps)
            xhat = (x - mean) * inv
            caches.append((xhat, inv, training))
            x = gamma * xhat + beta
        elif isinstance(layer, ReLU):
            caches.append(x > 0)
            x = np.where(x > 0, x, 0.0)
        elif isinstance(layer, MaxPool2D):
            n, h, w, c = x.shape
            oh, ow = h // layer.pool_h, w // layer.pool_w
            blocks = (x[:, :oh * layer.pool_h, :ow * layer.pool_w]
                      .reshape(n, oh, layer.pool_h, ow, layer.pool_w, c)
                      .transpose(0, 1, 3, 5, 2, 4)
                      .reshape(n, oh, ow, c, layer.pool_h * layer.pool_w))
            arg = blocks.argmax(axis=-1)
            caches.append((x.shape, arg))
            x = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        elif isinstance(layer, Dropout):
            rate = layer.rate if dropout is None else dropout
            if training and rate > 0:
                mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
                caches.append(mask)
                x = x * mask
            else:
                caches.append(None)
    logits = x.reshape(len(x))
    return logits, caches, bn_stats


def _backward_batch(arch: ArchDescriptor, params: Dict[str, np.ndarray], caches: List[Any],
                    dz: np.ndarray) -> Dict[str, np.ndarray]:
    grads: Dict[str, np.ndarray] = {}
    g = dz.reshape(len(dz), 1, 1, 1)
    for i in reversed(range(len(arch.layers) - 1)):
        layer, cache = arch.layers[i], caches[i]
        if isinstance(layer, Conv2D):
            kh, kw = layer.kernel_h, layer.kernel_w
            kernel = params[f"{i}.kernel"]
            patches = sliding_window_view(cache, (kh, kw), axis=(1, 2))
            grads[f"{i}.kernel"] = np.tensordot(patches, g, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
            grads[f"{i}.bias"] = g.sum(axis=(0, 1, 2))
            if i == 0:
                break
            oh, ow = g.shape[1], g.shape[2]
            dx = np.zeros_like(cache)
            for a in range(kh):
                for b in range(kw):
                    dx[:, a:a + oh, b:b + ow, :] += g @ kernel[a, b].T
            g = dx
        elif isinstance(layer, BatchNorm):
            xhat, inv, training = cache
            gamma = params[f"{i}.gamma"]
            grads[f"{i}.gamma"] = (g * xhat).sum(axis=(0, 1, 2))
            grads[f"{i}.beta"] = g.sum(axis=(0, 1, 2))
            dxhat = g * gamma
            if training:
                m = g.size // g.shape[-1]
                g = inv / m * (m * dxhat - dxhat.sum(axis=(0, 1, 2))
                               - xhat * (dxhat * xhat).sum(axis=(0, 1, 2)))
            else:
                g = dxhat * inv
        elif isinstance(layer, ReLU):
            g = g * cache
        elif isinstance(layer, MaxPool2D):
            shape, arg = cache
            n, h, w, c = shape
            oh, ow = arg.shape[1], arg.shape[2]
            ph, pw = layer.pool_h, layer.pool_w
            blocks = np.zeros((n, oh, ow, c, ph * pw))
            np.put_along_axis(blocks, arg[..., None], g[..., None], axis=-1)
            dx = np.zeros(shape)
            dx[:, :oh * ph, :ow * pw] = (blocks.reshape(n, oh, ow, c, ph, pw)
                                         .transpose(0, 1, 4, 2, 5, 3)
                                         .reshape(n, oh * ph, ow * pw, c))
            g = dx
        elif isinstance(layer, Dropout):
            if cache is not None:
                g = g * cache
    return grads


def _run_batch(arch: ArchDescriptor, params: Dict[str, np.ndarray], batch: Batch,
               rng: Optional[np.random.Generator], dropout: Optional[float],
               training: bool, with_grads: bool) -> Gradients:
    if rng is None:
        rng = np.random.default_rng(0)
    x = _as_input(arch, batch.x)
    logits, caches, bn_stats = _forward_batch(arch, params, x, rng, dropout, training)
    p = expit(logits)
    n = len(batch)
    loss = float(np.mean(weighted_bce(p, batch.y, batch.w)))
    grads: Dict[str, np.ndarray] = {}
    if with_grads:
        dz = (-batch.w * batch.y * (1 - p) + (1 - batch.y) * p) / n
        grads = _backward_batch(arch, params, caches, dz)
    return Gradients(loss=loss, grads=grads, bn_stats=bn_stats, probs=p)


def batch_loss(arch: ArchDescriptor, weights: WeightSet, batch: Batch,
               rng: Optional[np.random.Generator] = None, dropout: Optional[float] = None,
               training: bool = True) -> float:
    """Mean weighted BCE of ``batch``; same forward path as ``backward``."""
    _check_trainable(arch)
    return _run_batch(arch, weights.tensors, batch, rng, dropout, training, with_grads=False).loss


def backward(arch: ArchDescriptor, weights: WeightSet, batch: Batch,
             rng: Optional[np.random.Generator] = None, dropout: Optional[float] = None,
             training: bool = True) -> Gradients:
    """Gradient of the mean weighted BCE with respect to every trainable tensor."""
    _check_trainable(arch)
    if weights.folded:
        raise ValueError("Cannot train folded weights")
    weights.check(arch)
    return _run_batch(arch, weights.tensors, batch, rng, dropout, training, with_grads=True)


@dataclass
class TrainResult:
    weights: WeightSet
    loss_curve: List[Tuple[int, float]]


def train(windows: WindowSet, arch: ArchDescriptor, cfg: Optional[TrainConfig] = None,
          sampler: Optional[SamplerConfig] = None, adam: Optional[AdamState] = None,
          init: Optional[WeightSet] = None) -> TrainResult:
    cfg = cfg or TrainConfig()
    sampler = sampler or SamplerConfig()
    adam = adam or AdamState()
    _check_trainable(arch)

    pool = windows.subset(~windows.warmup) if cfg.exclude_warmup else windows
    if pool.n_ictal == 0:
        raise ValueError("Training windows contain no seizure")

    weights = init.copy() if init is not None else init_weights(arch, cfg.seed)
    weights.check(arch)
    params = {k: np.array(v, dtype=np.float64) for k, v in weights.tensors.items()}
    batch_rng = np.random.default_rng(sampler.rng_seed)
    dropout_rng = np.random.default_rng(cfg.seed + 1)
    momentum = cfg.bn_momentum

    logger.info("training %s: %d steps on %d windows (%d ictal), batch %d, p_ictal %.2f",
                arch.name, cfg.steps, len(pool), pool.n_ictal, sampler.batch_size, sampler.p_ictal)
    curve: List[Tuple[int, float]] = []
    interval: List[float] = []
    last_finite: Optional[float] = None
    for step in range(1, cfg.steps + 1):
        batch = sample_batch(pool, sampler, batch_rng)
        result = _run_batch(arch, params, batch, dropout_rng, cfg.dropout, training=True, with_grads=True)
        if not np.isfinite(result.loss):
            raise TrainingDiverged(step, last_finite)
        last_finite = result.loss
        adam.update(params, result.grads)
        for i, (mean, var) in result.bn_stats.items():
            params[f"{i}.mean"] = momentum * params[f"{i}.mean"] + (1 - momentum) * mean
            params[f"{i}.var"] = momentum * params[f"{i}.var"] + (1 - momentum) * var
        interval.append(result.loss)
        if step % cfg.log_every == 0 or step == cfg.steps:
            mean_loss = float(np.mean(interval))
            curve.append((step, mean_loss))
            interval = []
            logger.info("step %d/%d loss %.4f", step, cfg.steps, mean_loss)

    return TrainResult(weights=WeightSet(params, arch.digest()), loss_curve=curve)
