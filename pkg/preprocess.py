"""Streaming signal conditioning.

The chain is notch (50 Hz) -> highpass (0.1 Hz) -> rolling standard deviation
-> ``tanh``/``lintanh`` of ``0.2 * x / sigma``. Every stage keeps its own state
and is causal, so feeding a recording in one block or sample by sample gives
the same output.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, asdict
from typing import Any, Dict, Iterator, Optional, Tuple, Union

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import butter, iirnotch, lfilter

from model import Recording

logger = logging.getLogger(__name__)

MODES = ("exact", "grand_mean", "zero_mean")
NONLINEARITIES = ("tanh", "lintanh")
LINE_HZ = 50.0


class Biquad:
    """Second-order IIR section with per-channel delay registers (direct form II transposed)."""

    def __init__(self, b, a, n_channels: int = 1):
        b3 = np.zeros(3)
        a3 = np.zeros(3)
        b3[: len(b)] = b
        a3[: len(a)] = a
        if a3[0] == 0:
            raise ValueError("Biquad a0 must be non-zero")
        self.b = b3 / a3[0]
        self.a = a3 / a3[0]
        poles = np.roots(self.a)
        if np.any(np.abs(poles) >= 1.0):
            raise ValueError(f"Unstable biquad: pole magnitudes {np.abs(poles)}")
        self.n_channels = int(n_channels)
        self.zi = np.zeros((2, self.n_channels))

    @classmethod
    def notch(cls, fs: float, f0: float = LINE_HZ, q: float = 30.0, n_channels: int = 1) -> "Biquad":
        if fs <= 2 * f0:
            raise ValueError(f"Notch at {f0} Hz undefined for fs={fs} Hz (needs fs > {2 * f0} Hz)")
        b, a = iirnotch(f0, q, fs=fs)
        return cls(b, a, n_channels)

    @classmethod
    def highpass(cls, fs: float, cutoff: float = 0.1, n_channels: int = 1) -> "Biquad":
        if not 0 < cutoff < fs / 2:
            raise ValueError(f"Highpass cutoff must lie in (0, {fs / 2}) Hz, got {cutoff}")
        b, a = butter(1, cutoff, btype="highpass", fs=fs)
        return cls(b, a, n_channels)

    @property
    def coefficients(self) -> Tuple[float, float, float, float, float]:
        """(b0, b1, b2, a1, a2)."""
        return (float(self.b[0]), float(self.b[1]), float(self.b[2]),
                float(self.a[1]), float(self.a[2]))

    def reset(self) -> None:
        self.zi[:] = 0.0

    def process(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[:, None]
        if x.shape[1] != self.n_channels:
            raise ValueError(f"Expected {self.n_channels} channels, got {x.shape[1]}")
        y, self.zi = lfilter(self.b, self.a, x, axis=0, zi=self.zi)
        return y[:, 0] if single else y


def notch50(x, fs: float, q: float = 30.0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    channels = 1 if x.ndim == 1 else x.shape[1]
    return Biquad.notch(fs, LINE_HZ, q, channels).process(x)


def highpass(x, fs: float, cutoff: float = 0.1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    channels = 1 if x.ndim == 1 else x.shape[1]
    return Biquad.highpass(fs, cutoff, channels).process(x)


class RollingStats:
    """Rolling standard deviation over the trailing ``window_s`` seconds.

    ``exact`` keeps every sample of the window in a ring buffer with running
    sums. ``grand_mean`` keeps K per-second (sum, sum of squares) pairs and
    centres on the mean of the K block means. ``zero_mean`` keeps only the
    per-second sums of squares. The block modes only see completed seconds;
    the samples of the running second enter when the second is complete.
    Until the first second completes they use the samples seen so far.
    """

    def __init__(self, n_channels: int, fs: float, window_s: float = 600.0,
                 mode: str = "exact", sigma_floor: float = 1e-6):
        if mode not in MODES:
            raise ValueError(f"Unknown rolling-stat mode {mode!r}; expected one of {MODES}")
        if sigma_floor <= 0:
            raise ValueError("sigma_floor must be > 0")
        self.mode = mode
        self.n_channels = int(n_channels)
        self.fs = float(fs)
        self.window_s = float(window_s)
        self.sigma_floor = float(sigma_floor)
        self.n_window = int(round(window_s * fs))
        if self.n_window < 1:
            raise ValueError(f"Rolling window of {window_s} s at {fs} Hz holds no samples")
        self._ref: Optional[np.ndarray] = None
        E = self.n_channels

        if mode == "exact":
            self._ring = np.zeros((self.n_window, E))
            self._pos = 0
            self._filled = 0
            self._since_resync = 0
            self._sum = np.zeros(E)
            self._sumsq = np.zeros(E)
        else:
            if not self.fs.is_integer() or not self.window_s.is_integer():
                raise ValueError(f"{mode} needs whole-second blocks: fs={fs}, window_s={window_s}")
            self.block = int(self.fs)
            self.n_blocks = int(self.window_s)
            self._block_sumsq = np.zeros((self.n_blocks, E))
            self._block_sum = np.zeros((self.n_blocks, E)) if mode == "grand_mean" else None
            self._bpos = 0
            self._bfilled = 0
            self._acc_sum = np.zeros(E)
            self._acc_sumsq = np.zeros(E)
            self._acc_n = 0
            self._cached = np.zeros(E)

    @property
    def warm(self) -> bool:
        """True once the rolling window is full."""
        if self.mode == "exact":
            return self._filled >= self.n_window
        return self._bfilled >= self.n_blocks

    def update(self, x) -> np.ndarray:
        """Feed samples shaped (n, E), or one sample shaped (E,); return sigma per sample."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[1] != self.n_channels:
            raise ValueError(f"Expected {self.n_channels} channels, got {x.shape[1]}")
        if len(x) == 0:
            return np.empty((0, self.n_channels))
        if self._ref is None:
            # variance is shift-invariant; zero_mean is not, so it stays unshifted
            self._ref = np.zeros(self.n_channels) if self.mode == "zero_mean" else x[0].copy()
        shifted = x - self._ref
        if self.mode == "exact":
            sigma = self._update_exact(shifted)
        else:
            sigma = self._update_blocks(shifted)
        np.maximum(sigma, self.sigma_floor, out=sigma)
        return sigma[0] if single else sigma

    def _update_exact(self, x: np.ndarray) -> np.ndarray:
        out = np.empty_like(x)
        nw = self.n_window
        for start in range(0, len(x), nw):
            chunk = x[start:start + nw]
            n = len(chunk)
            steps = np.arange(n)
            slots = (self._pos + steps) % nw
            leaving = self._ring[slots]
            leaving[self._filled + steps < nw] = 0.0
            s1 = self._sum + np.cumsum(chunk - leaving, axis=0)
            s2 = self._sumsq + np.cumsum(chunk * chunk - leaving * leaving, axis=0)
            count = np.minimum(self._filled + steps + 1, nw)[:, None]
            mean = s1 / count
            out[start:start + n] = np.sqrt(np.maximum(s2 / count - mean * mean, 0.0))

            self._ring[slots] = chunk
            self._pos = (self._pos + n) % nw
            self._filled = min(self._filled + n, nw)
            self._sum, self._sumsq = s1[-1].copy(), s2[-1].copy()
            self._since_resync += n
            if self._since_resync >= nw:
                # running sums drift; rebuild them once per window length
                self._sum = self._ring.sum(axis=0)
                self._sumsq = (self._ring * self._ring).sum(axis=0)
                self._since_resync = 0
        return out

    def _update_blocks(self, x: np.ndarray) -> np.ndarray:
        out = np.empty_like(x)
        i = 0
        while i < len(x):
            take = min(len(x) - i, self.block - self._acc_n)
            seg = x[i:i + take]
            sq = seg * seg
            if self._bfilled == 0:
                cnt = (self._acc_n + np.arange(1, take + 1))[:, None]
                css = self._acc_sumsq + np.cumsum(sq, axis=0)
                if self._block_sum is not None:
                    cs = self._acc_sum + np.cumsum(seg, axis=0)
                    var = css / cnt - (cs / cnt) ** 2
                else:
                    var = css / cnt
                out[i:i + take] = np.sqrt(np.maximum(var, 0.0))
            else:
                out[i:i + take] = self._cached
            self._acc_sum += seg.sum(axis=0)
            self._acc_sumsq += sq.sum(axis=0)
            self._acc_n += take
            if self._acc_n == self.block:
                self._push_block()
            i += take
        return out

    def _push_block(self) -> None:
        self._block_sumsq[self._bpos] = self._acc_sumsq
        if self._block_sum is not None:
            self._block_sum[self._bpos] = self._acc_sum
        self._bpos = (self._bpos + 1) % self.n_blocks
        self._bfilled = min(self._bfilled + 1, self.n_blocks)
        self._acc_sum = np.zeros(self.n_channels)
        self._acc_sumsq = np.zeros(self.n_channels)
        self._acc_n = 0
        self._cached = self._blocks_sigma()

    def _blocks_sigma(self) -> np.ndarray:
        k = self._bfilled
        n = k * self.block
        # slots not yet written are zero and drop out of the sums
        sumsq = self._block_sumsq.sum(axis=0)
        if self._block_sum is None:
            var = sumsq / n
        else:
            grand = (self._block_sum / self.block).sum(axis=0) / k
            xbar = self._block_sum.sum(axis=0) / n
            var = sumsq / n - 2.0 * grand * xbar + grand * grand
        return np.sqrt(np.maximum(var, 0.0))


def rolling_sigma(stats: RollingStats, x_t) -> np.ndarray:
    return stats.update(x_t)


def lintanh(x):
    """Piecewise-linear tanh surrogate: x/1.2 on [-1.2, 1.2], +-1 outside."""
    return np.clip(np.asarray(x, dtype=np.float64) / 1.2, -1.0, 1.0)


def normalize(x, sigma, nonlinearity: str = "tanh", gain: float = 0.2):
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive; apply the sigma floor first")
    z = gain * np.asarray(x, dtype=np.float64) / sigma
    if nonlinearity == "tanh":
        return np.tanh(z)
    if nonlinearity == "lintanh":
        return lintanh(z)
    raise ValueError(f"Unknown nonlinearity {nonlinearity!r}; expected one of {NONLINEARITIES}")


@dataclass
class PreprocessConfig:
    mode: str = "exact"
    nonlinearity: str = "tanh"
    window_s: float = 600.0
    sample_s: float = 1.0
    stride_s: float = 1.0
    sigma_floor: float = 1e-6
    gain: float = 0.2
    notch_hz: float = LINE_HZ
    notch_q: float = 30.0
    highpass_hz: float = 0.1
    # warm-up windows are flagged; metrics skip them when this is set
    exclude_warmup: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"Unknown preprocess mode {self.mode!r}; expected one of {MODES}")
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"Unknown nonlinearity {self.nonlinearity!r}; expected one of {NONLINEARITIES}")
        for name in ("window_s", "sample_s", "stride_s", "sigma_floor", "gain"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @staticmethod
    def from_dict(d: Dict[str, Any]) -> "PreprocessConfig":
        unknown = set(d) - set(PreprocessConfig.__dataclass_fields__)
        if unknown:
            raise ValueError(f"Unknown preprocess keys: {sorted(unknown)}")
        return PreprocessConfig(**d)


class Preprocessor:
    """The full streaming chain for one recording's channels."""

    def __init__(self, fs: float, n_channels: int, cfg: Optional[PreprocessConfig] = None):
        self.cfg = cfg or PreprocessConfig()
        self.fs = float(fs)
        self.notch = Biquad.notch(fs, self.cfg.notch_hz, self.cfg.notch_q, n_channels)
        self.highpass = Biquad.highpass(fs, self.cfg.highpass_hz, n_channels)
        self.stats = RollingStats(n_channels, fs, self.cfg.window_s, self.cfg.mode, self.cfg.sigma_floor)

    def filter(self, block) -> np.ndarray:
        return self.highpass.process(self.notch.process(block))

    def process(self, block) -> Tuple[np.ndarray, np.ndarray]:
        filtered = self.filter(block)
        sigma = self.stats.update(filtered)
        return normalize(filtered, sigma, self.cfg.nonlinearity, self.cfg.gain), sigma

    def run(self, data: np.ndarray, chunk_s: float = 60.0) -> np.ndarray:
        chunk = max(1, int(chunk_s * self.fs))
        out = np.empty(data.shape, dtype=np.float64)
        for start in range(0, len(data), chunk):
            out[start:start + chunk], _ = self.process(data[start:start + chunk])
        return out


def _to_samples(seconds: float, fs: float, name: str) -> int:
    n = seconds * fs
    if n < 1 or not np.isclose(n, round(n)):
        raise ValueError(f"{name}={seconds} s is not a whole number of samples at {fs} Hz")
    return int(round(n))


@dataclass
class WindowSample:
    x: np.ndarray  # (E, fs * sample_s), values in [-1, 1]
    t_end: float
    label: int
    onset_weight: float
    warmup: bool = False


@dataclass
class WindowSet:
    """Columnar sequence of WindowSample; ``x`` is (n, E, W) float32."""

    x: np.ndarray
    t_end: np.ndarray
    label: np.ndarray
    onset_weight: np.ndarray
    warmup: np.ndarray
    fs: float
    stride_s: float

    def __len__(self) -> int:
        return int(len(self.t_end))

    def __getitem__(self, i: int) -> WindowSample:
        return WindowSample(x=self.x[i], t_end=float(self.t_end[i]), label=int(self.label[i]),
                            onset_weight=float(self.onset_weight[i]), warmup=bool(self.warmup[i]))

    def __iter__(self) -> Iterator[WindowSample]:
        for i in range(len(self)):
            yield self[i]

    def subset(self, index: Union[np.ndarray, slice]) -> "WindowSet":
        return WindowSet(x=self.x[index], t_end=self.t_end[index], label=self.label[index],
                         onset_weight=self.onset_weight[index], warmup=self.warmup[index],
                         fs=self.fs, stride_s=self.stride_s)

    @property
    def n_ictal(self) -> int:
        return int(np.count_nonzero(self.label))


def window_stream(rec: Recording, stride_s: Optional[float] = None,
                  cfg: Optional[PreprocessConfig] = None) -> WindowSet:
    """Preprocess ``rec`` causally and cut it into windows ending every ``stride_s``.

    A window is ictal iff its end lies in (onset, offset] of some seizure; ictal
    windows carry the onset weight (1 at onset falling to 0 at offset).
    """
    cfg = cfg or PreprocessConfig()
    stride_s = cfg.stride_s if stride_s is None else stride_s
    fs = rec.fs
    W = _to_samples(cfg.sample_s, fs, "sample_s")
    S = _to_samples(stride_s, fs, "stride_s")
    if rec.n_samples < W:
        raise ValueError(f"Recording {rec.id} ({rec.duration_s} s) is shorter than one {cfg.sample_s} s window")

    normalized = Preprocessor(fs, rec.n_channels, cfg).run(rec.data)
    ends = np.arange(W, rec.n_samples + 1, S)
    x = sliding_window_view(normalized, W, axis=0)[ends - W].astype(np.float32)

    t_end = ends / fs
    label = np.zeros(len(ends), dtype=np.int8)
    weight = np.zeros(len(ends))
    for ev in rec.annotations:
        inside = (t_end > ev.onset_s) & (t_end <= ev.offset_s)
        label[inside] = 1
        weight[inside] = ev.onset_weight(t_end[inside])
    warmup = ends < int(round(cfg.window_s * fs))

    logger.debug("%s: %d windows (stride %.3g s), %d ictal, %d warm-up",
                 rec.id, len(ends), stride_s, int(label.sum()), int(warmup.sum()))
    return WindowSet(x=x, t_end=t_end, label=label, onset_weight=weight,
                     warmup=warmup, fs=fs, stride_s=float(stride_s))


def compare_sigma_modes(data: np.ndarray, fs: float, window_s: float = 600.0,
                        gain: float = 0.2) -> pd.DataFrame:
    """Relative deviation of each rolling-sigma mode from the exact sigma.

    ``data`` is raw (samples, channels); it is notch- and highpass-filtered
    first, as in the streaming chain. Only samples after the window is full
    are compared. ``nonlin_max_abs_diff`` is the largest |lintanh - tanh| on
    the normalized inputs of that mode.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 1:
        data = data[:, None]
    n_channels = data.shape[1]
    pre = Preprocessor(fs, n_channels, PreprocessConfig(window_s=window_s))
    filtered = pre.filter(data)
    start = int(round(window_s * fs)) - 1
    if start >= len(filtered):
        raise ValueError("Signal is shorter than the rolling window")

    sigmas = {mode: RollingStats(n_channels, fs, window_s, mode).update(filtered) for mode in MODES}
    exact = sigmas["exact"][start:]
    rows = []
    for mode in MODES:
        rel = np.abs(sigmas[mode][start:] - exact) / exact
        z = gain * filtered[start:] / sigmas[mode][start:]
        rows.append({
            "mode": mode,
            "median_rel_error": float(np.median(rel)),
            "max_rel_error": float(rel.max()),
            "nonlin_max_abs_diff": float(np.max(np.abs(lintanh(z) - np.tanh(z)))),
        })
    return pd.DataFrame(rows)
