"""Mono WAV read/write (16-bit PCM or 32-bit float)."""

from __future__ import annotations

import os

import numpy as np
from scipy.io import wavfile

from .dsp import Waveform, resample_linear


class WavFormatError(ValueError):
    pass


def read_wav(path: str | os.PathLike, target_rate: int | None = None) -> Waveform:
    """Load a WAV as float64 in [-1, 1].

    Multi-channel audio is averaged down to mono; if ``target_rate`` differs
    from the file rate the signal is linearly interpolated (lossy).
    """
    try:
        rate, data = wavfile.read(os.fspath(path))
    except (ValueError, OSError) as exc:
        raise WavFormatError(f"{path}: {exc}") from exc
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise WavFormatError(f"{path}: unsupported sample type {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    if target_rate is not None and target_rate != rate:
        x = resample_linear(x, rate, target_rate)
        rate = target_rate
    return Waveform(x, int(rate))


def write_wav(path: str | os.PathLike, wave: Waveform, subtype: str = "float32") -> None:
    if subtype == "float32":
        data = wave.samples.astype(np.float32)
    elif subtype == "pcm16":
        data = np.clip(np.round(wave.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise WavFormatError(f"unknown subtype {subtype!r}; use 'float32' or 'pcm16'")
    wavfile.write(os.fspath(path), wave.sample_rate, data)
