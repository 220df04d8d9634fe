"""STFT analysis / weighted overlap-add synthesis and signal mixing."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal as sps

from .autodiff import ShapeError, Tensor

DEFAULT_SR = 16000
_WSUM_FLOOR = 1e-10


class SignalError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SR

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise SignalError(f"waveform must be mono 1-D, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise SignalError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise SignalError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def power(self) -> float:
        return float(np.mean(self.samples ** 2))


@dataclass(frozen=True)
class StftConfig:
    win_length: int = 512
    hop: int = 128
    window: str = "hann"
    log_floor: float = 1e-8
    center: bool = True

    def __post_init__(self):
        if not 0 < self.hop <= self.win_length:
            raise SignalError(f"need 0 < hop <= win_length, got hop={self.hop}, win={self.win_length}")
        # synthesis divides by the overlap-added squared window, so it must never vanish
        if not sps.check_NOLA(self.window_array(), self.win_length, self.win_length - self.hop):
            raise SignalError(f"{self.window} window with hop {self.hop} violates the overlap-add condition")

    @property
    def n_bins(self) -> int:
        return self.win_length // 2 + 1

    @property
    def pad(self) -> int:
        return self.win_length // 2 if self.center else 0

    def window_array(self) -> np.ndarray:
        return _window(self.window, self.win_length)

    def n_frames(self, n_samples: int) -> int:
        return 1 + (n_samples + 2 * self.pad - self.win_length) // self.hop


@lru_cache(maxsize=16)
def _window(kind: str, n: int) -> np.ndarray:
    w = sps.get_window(kind if kind != "rect" else "boxcar", n, fftbins=True)
    w.setflags(write=False)
    return w


@dataclass
class Spectrogram:
    """Complex one-sided STFT, frames x bins, plus the geometry needed to invert it."""

    values: np.ndarray
    hop: int
    win_length: int
    sample_rate: int
    length: int
    window: str = "hann"
    center: bool = True

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.shape[-1] != self.win_length // 2 + 1:
            raise SignalError(f"spectrogram has {self.values.shape[-1]} bins, expected {self.win_length // 2 + 1}")

    @property
    def n_frames(self) -> int:
        return self.values.shape[-2]

    @property
    def n_bins(self) -> int:
        return self.values.shape[-1]

    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)

    def like(self, values: np.ndarray) -> Spectrogram:
        return Spectrogram(values, self.hop, self.win_length, self.sample_rate, self.length,
                           self.window, self.center)

    def check_geometry(self, cfg: StftConfig) -> None:
        if (self.hop, self.win_length, self.window, self.center) != (cfg.hop, cfg.win_length, cfg.window, cfg.center):
            raise SignalError(
                f"spectrogram geometry (hop={self.hop}, win={self.win_length}, {self.window}) "
                f"does not match config (hop={cfg.hop}, win={cfg.win_length}, {cfg.window})"
            )
        if self.n_frames != cfg.n_frames(self.length):
            raise SignalError(f"{self.n_frames} frames cannot come from {self.length} samples")


def stft(wave: Waveform | np.ndarray, cfg: StftConfig = StftConfig()) -> Spectrogram:
    if isinstance(wave, Waveform):
        x, sr = wave.samples, wave.sample_rate
    else:
        x, sr = np.asarray(wave, dtype=np.float64), DEFAULT_SR
    n = len(x)
    if n < cfg.win_length:
        raise SignalError(f"waveform of {n} samples is shorter than the {cfg.win_length}-sample window")
    if cfg.pad:
        x = np.pad(x, cfg.pad, mode="reflect")
    frames = sliding_window_view(x, cfg.win_length)[:: cfg.hop]
    values = np.fft.rfft(frames * cfg.window_array(), axis=-1)
    return Spectrogram(values, cfg.hop, cfg.win_length, sr, n, cfg.window, cfg.center)


def _overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    """Overlap-add the last two axes (frames, win) into one signal axis."""
    *lead, n_frames, win = frames.shape
    total = (n_frames - 1) * hop + win
    if win % hop == 0:
        ratio = win // hop
        out = np.zeros((*lead, n_frames - 1 + ratio, hop))
        chunks = frames.reshape(*lead, n_frames, ratio, hop)
        for j in range(ratio):
            out[..., j:j + n_frames, :] += chunks[..., :, j, :]
        return out.reshape(*lead, total)
    out = np.zeros((*lead, total))
    for t in range(n_frames):
        out[..., t * hop:t * hop + win] += frames[..., t, :]
    return out


@lru_cache(maxsize=16)
def _wsum_inverse(kind: str, win: int, hop: int, n_frames: int) -> np.ndarray:
    w = _window(kind, win)
    wsum = _overlap_add(np.broadcast_to(w * w, (n_frames, win)), hop)
    inv = np.zeros_like(wsum)
    ok = wsum > _WSUM_FLOOR
    inv[ok] = 1.0 / wsum[ok]
    inv.setflags(write=False)
    return inv


def _synthesize(values: np.ndarray, win: int, hop: int, kind: str, pad: int, length: int) -> np.ndarray:
    frames = np.fft.irfft(values, n=win, axis=-1) * _window(kind, win)
    buf = _overlap_add(frames, hop) * _wsum_inverse(kind, win, hop, values.shape[-2])
    out = buf[..., pad:pad + length]
    if out.shape[-1] < length:
        out = np.concatenate([out, np.zeros((*out.shape[:-1], length - out.shape[-1]))], axis=-1)
    return out


def istft(spec: Spectrogram, cfg: StftConfig | None = None) -> Waveform:
    """Weighted overlap-add inverse; exact wherever the squared window overlaps."""
    if cfg is not None:
        spec.check_geometry(cfg)
    pad = spec.win_length // 2 if spec.center else 0
    out = _synthesize(spec.values, spec.win_length, spec.hop, spec.window, pad, spec.length)
    return Waveform(out, spec.sample_rate)


def masked_istft(mask: Tensor, spec: Spectrogram) -> Tensor:
    """Differentiable ``istft(mask * spec)`` with respect to a real-valued mask.

    ``mask`` and ``spec.values`` share shape ``(..., T, K)``; the result has
    shape ``(..., spec.length)``.  Synthesis is linear in the mask, so the
    backward pass is the adjoint: frame the output gradient, window it, take
    the forward FFT and project onto the fixed complex spectrum.
    """
    if mask.shape != spec.values.shape:
        raise ShapeError("masked_istft", mask.shape, spec.values.shape)
    win, hop, kind = spec.win_length, spec.hop, spec.window
    pad = win // 2 if spec.center else 0
    n_frames = spec.n_frames
    out = _synthesize(mask.data * spec.values, win, hop, kind, pad, spec.length)
    w = _window(kind, win)
    # irfft adjoint: bins other than DC and Nyquist appear twice in the real signal
    weight = np.full(spec.n_bins, 2.0 / win)
    weight[0] = 1.0 / win
    if win % 2 == 0:
        weight[-1] = 1.0 / win

    def bw(g):
        buf_len = (n_frames - 1) * hop + win
        buf = np.zeros((*g.shape[:-1], buf_len))
        span = min(spec.length, buf_len - pad)
        buf[..., pad:pad + span] = g[..., :span]
        buf *= _wsum_inverse(kind, win, hop, n_frames)
        frames = sliding_window_view(buf, win, axis=-1)[..., ::hop, :] * w
        adj = np.fft.rfft(frames, axis=-1) * weight
        return ((adj.real * spec.values.real + adj.imag * spec.values.imag),)

    return Tensor.from_op(out, (mask,), bw, "masked_istft")


def log_magnitude(spec: Spectrogram, floor: float = 1e-8) -> np.ndarray:
    return np.log(np.maximum(np.abs(spec.values), floor))


def apply_mask(spec: Spectrogram, mask: np.ndarray) -> Spectrogram:
    """Scale magnitudes by ``mask`` while keeping the phase of ``spec``."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != spec.values.shape:
        raise SignalError(f"mask shape {mask.shape} does not match spectrogram {spec.values.shape}")
    if mask.size and (mask.min() < 0.0 or mask.max() > 1.0):
        raise SignalError(f"mask values must lie in [0, 1], got [{mask.min():.4g}, {mask.max():.4g}]")
    return spec.like(spec.values * mask)


def fit_length(noise: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Randomly crop, or cyclically extend from a random offset, to ``n`` samples."""
    m = len(noise)
    if m == 0:
        raise SignalError("empty noise signal")
    if m >= n:
        start = int(rng.integers(0, m - n + 1))
        return noise[start:start + n]
    start = int(rng.integers(0, m))
    reps = -(-(n + start) // m)
    return np.tile(noise, reps)[start:start + n]


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float, seed: int = 0) -> Waveform:
    """Return ``clean + a * noise`` with ``a`` set so that the mixture has the requested SNR."""
    if clean.sample_rate != noise.sample_rate:
        raise SignalError(f"sample rates differ: {clean.sample_rate} vs {noise.sample_rate}")
    rng = np.random.default_rng(seed)
    n = fit_length(noise.samples, len(clean), rng)
    p_clean = np.mean(clean.samples ** 2)
    p_noise = np.mean(n ** 2)
    if p_clean == 0.0 or p_noise == 0.0:
        raise SignalError("cannot mix at an SNR with a zero-power signal")
    scale = np.sqrt(p_clean / p_noise) * 10.0 ** (-snr_db / 20.0)
    return Waveform(clean.samples + scale * n, clean.sample_rate)


def measured_snr(clean: np.ndarray, noise: np.ndarray) -> float:
    return float(10.0 * np.log10(np.sum(clean ** 2) / np.sum(noise ** 2)))


def resample_linear(x: np.ndarray, src_rate: int, dst_rate: int) -> np.ndarray:
    """Resample by linear interpolation (lossy: no anti-alias filtering)."""
    if src_rate == dst_rate:
        return np.asarray(x, dtype=np.float64)
    n_out = int(round(len(x) * dst_rate / src_rate))
    t_out = np.arange(n_out) / dst_rate
    t_in = np.arange(len(x)) / src_rate
    return np.interp(t_out, t_in, x)
