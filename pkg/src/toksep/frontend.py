"""Multi-layer continuous features standing in for a pretrained SSL encoder.

Per frame: Hann window, DFT magnitude, triangular mel bank, log. The log-mel
frame then passes through a fixed stack of seeded random tanh layers whose
outputs are the returned feature layers (layer 0, the log-mel itself, is not
returned).

The one non-local ingredient is `context_weight`: before the layer stack,
each log-mel frame is blended with a similarity-weighted average of every
frame in the same signal, x_i <- (1-w)*x_i + w * pool_i, where pool_i
weights frame j by exp(-|x_i - x_j|^2 / (beta * scale)). This is what makes
reference concatenation matter downstream: inside [reference, mixture,
reference] a mixture frame dominated by the target finds its nearest
neighbors among the clean reference frames and is pulled toward clean
target coordinates, frame by frame. Without the surrounding reference the
only available neighbors are other mixture frames, so no cleanup happens.
With context_weight = 0 the extractor is purely frame-local.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, Waveform

FRAME_HOP = 320   # 20 ms
FRAME_WIN = 400   # 25 ms
N_FFT = 512
LOG_FLOOR = 1e-6
INPUT_SCALE = 0.25  # keeps the first tanh layer out of saturation
CONTEXT_BANDWIDTH = 0.5  # pooling kernel width, relative to the mean squared frame deviation
LAYER_POOL = False  # also pool after each tanh layer (compounding context)

FEAT_MAGIC = b"FEAT1"
FEAT_VERSION = 1


class FeatureFormatError(ValueError):
    """FEAT1 file violates the declared layout."""


@dataclass(frozen=True)
class FrontendConfig:
    n_mels: int = 40
    layer_count: int = 6
    e_feat: int = 32
    seed: int = 0
    speaker_signature_mode: bool = False
    context_weight: float = 0.6
    identity_layers: bool = False

    def __post_init__(self):
        if self.layer_count < 1:
            raise ValueError(f"layer_count must be >= 1, got {self.layer_count}")
        if self.e_feat < 8:
            raise ValueError(f"e_feat must be >= 8, got {self.e_feat}")
        if self.n_mels < 2:
            raise ValueError(f"n_mels must be >= 2, got {self.n_mels}")
        if not 0.0 <= self.context_weight <= 1.0:
            raise ValueError(f"context_weight must lie in [0, 1], got {self.context_weight}")
        if self.identity_layers and self.e_feat != self.n_mels:
            raise ValueError("identity_layers requires e_feat == n_mels")


@dataclass
class FeatureStack:
    """n_layers x T x E_feat real features at a fixed frame grid."""

    data: np.ndarray
    frame_hop: int = FRAME_HOP
    frame_win: int = FRAME_WIN

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError(f"feature stack must be 3-D (layers, frames, dim), got {self.data.shape}")
        if self.data.shape[0] < 1:
            raise ValueError("feature stack needs at least one layer")
        if not np.isfinite(self.data).all():
            raise ValueError("feature stack contains non-finite values")

    @property
    def layers(self) -> int:
        return self.data.shape[0]

    @property
    def frames(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def slice_frames(self, start: int, stop: int) -> "FeatureStack":
        return FeatureStack(self.data[:, start:stop].copy(), self.frame_hop, self.frame_win)


def frame_count(num_samples: int, hop: int = FRAME_HOP, win: int = FRAME_WIN) -> int:
    if num_samples < win:
        raise ValueError(f"input too short: {num_samples} samples < one window of {win}")
    return (num_samples - win) // hop + 1


def mel_filterbank(n_mels: int, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE,
                   f_min: float = 0.0, f_max: float = 8000.0) -> np.ndarray:
    """HTK-style triangular mel bank, (n_mels, n_fft//2 + 1)."""

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)

    n_bins = n_fft // 2 + 1
    mel_pts = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    bin_freqs = np.arange(n_bins) * sample_rate / n_fft
    bank = np.zeros((n_mels, n_bins))
    for i in range(n_mels):
        lo, mid, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        up = (bin_freqs - lo) / (mid - lo)
        down = (hi - bin_freqs) / (hi - mid)
        bank[i] = np.clip(np.minimum(up, down), 0.0, None)
    return bank


_layer_bank_cache: dict[tuple, tuple] = {}


def _layer_bank(cfg: FrontendConfig):
    """Fixed random tanh-layer weights; built once per (seed, dims) and shared."""
    key = (cfg.seed, cfg.n_mels, cfg.e_feat, cfg.layer_count)
    cached = _layer_bank_cache.get(key)
    if cached is not None:
        return cached
    rng = np.random.default_rng(np.random.SeedSequence([0x5EED, cfg.seed]))
    weights = []
    d_in = cfg.n_mels
    for _ in range(cfg.layer_count):
        w = rng.standard_normal((d_in, cfg.e_feat)) / np.sqrt(d_in)
        b = 0.1 * rng.standard_normal(cfg.e_feat)
        weights.append((w, b))
        d_in = cfg.e_feat
    bank = tuple(weights)
    _layer_bank_cache[key] = bank
    return bank


def log_mel(w: Waveform, cfg: FrontendConfig) -> np.ndarray:
    """(T, n_mels) log-mel frames, before context normalization."""
    t = frame_count(len(w))
    frames = np.lib.stride_tricks.sliding_window_view(w.samples, FRAME_WIN)[::FRAME_HOP][:t]
    window = np.hanning(FRAME_WIN)
    mag = np.abs(np.fft.rfft(frames * window, n=N_FFT, axis=1))
    bank = mel_filterbank(cfg.n_mels)
    return np.log(mag @ bank.T + LOG_FLOOR)


def _context_pool(x: np.ndarray, weight: float) -> np.ndarray:
    """Blend each frame with a similarity-weighted average over all frames.

    The kernel width tracks the spread of the signal, which makes the
    operation invariant to a uniform rescaling of the features.
    """
    mu = x.mean(axis=0, keepdims=True)
    scale = float(((x - mu) ** 2).sum(axis=1).mean())
    if scale <= 0.0:
        return x
    sq = (x * x).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    kern = np.exp(-d2 / (CONTEXT_BANDWIDTH * scale))
    pooled = (kern @ x) / kern.sum(axis=1, keepdims=True)
    return (1.0 - weight) * x + weight * pooled


def extract(w: Waveform, cfg: FrontendConfig) -> FeatureStack:
    """Deterministic feature stack for one waveform: (layer_count, T, e_feat)."""
    x = log_mel(w, cfg)
    if cfg.context_weight > 0.0:
        x = _context_pool(x, cfg.context_weight)
    x = x * INPUT_SCALE
    if cfg.identity_layers:
        return FeatureStack(np.repeat(x[None, :, :], cfg.layer_count, axis=0))
    layers = []
    for w_i, b_i in _layer_bank(cfg):
        x = np.tanh(x @ w_i + b_i)
        if LAYER_POOL and cfg.context_weight > 0.0:
            x = _context_pool(x, cfg.context_weight)
        layers.append(x)
    return FeatureStack(np.stack(layers, axis=0))


def export_features(path, fs: FeatureStack, width: int = 8) -> None:
    if width not in (4, 8):
        raise FeatureFormatError(f"float width must be 4 or 8, got {width}")
    n, t, e = fs.data.shape
    dtype = "<f4" if width == 4 else "<f8"
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC)
        fh.write(struct.pack("<BBIII", FEAT_VERSION, width, n, t, e))
        fh.write(np.ascontiguousarray(fs.data, dtype=dtype).tobytes())


def import_features(path) -> FeatureStack:
    blob = Path(path).read_bytes()
    if len(blob) < 5 + 14:
        raise FeatureFormatError(f"{path}: truncated header")
    if blob[:5] != FEAT_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {blob[:5]!r}")
    version, width, n, t, e = struct.unpack_from("<BBIII", blob, 5)
    if version != FEAT_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    if width not in (4, 8):
        raise FeatureFormatError(f"{path}: bad float width {width}")
    if n < 1 or t < 1 or e < 1:
        raise FeatureFormatError(f"{path}: degenerate shape ({n}, {t}, {e})")
    expected = n * t * e * width
    body = blob[19:]
    if len(body) != expected:
        raise FeatureFormatError(f"{path}: payload is {len(body)} bytes, header implies {expected}")
    dtype = "<f4" if width == 4 else "<f8"
    data = np.frombuffer(body, dtype=dtype).reshape(n, t, e).astype(np.float64)
    return FeatureStack(data)
