"""Self-supervised sample construction: masked-spectrogram (MSP) and noisy-target (NyTT)."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import SHIFTED_FAMILIES, derive_seed, gen_noise
from .dsp import DEFAULT_SR, Spectrogram, StftConfig, Waveform, fit_length, log_magnitude, mix_at_snr, stft
from .losses import oracle_mask
from .wavio import read_wav


class TaskError(ValueError):
    pass


# -- MSP -------------------------------------------------------------------

@dataclass(frozen=True)
class MspCorruption:
    patch_bins: int = 16
    patch_frames: int = 8
    ratio: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise TaskError(f"mask ratio must be in [0, 1], got {self.ratio}")
        if self.patch_bins < 1 or self.patch_frames < 1:
            raise TaskError("patch dimensions must be positive")

    def patch_mask(self, n_frames: int, n_bins: int) -> np.ndarray:
        """Boolean (T, K) map, True where a patch zeroes the input.

        The plane is tiled by patch-sized cells on a randomly offset grid and
        ``round(ratio * n_cells)`` cells are chosen without replacement.
        """
        if n_frames < self.patch_frames or n_bins < self.patch_bins:
            raise TaskError(
                f"{self.patch_frames}x{self.patch_bins} patch does not fit a {n_frames}x{n_bins} spectrogram")
        rng = np.random.default_rng(self.seed)
        off_t = int(rng.integers(self.patch_frames))
        off_k = int(rng.integers(self.patch_bins))
        t_edges = np.arange(-off_t, n_frames, self.patch_frames)
        k_edges = np.arange(-off_k, n_bins, self.patch_bins)
        cells = [(t, k) for t in t_edges for k in k_edges]
        chosen = rng.choice(len(cells), size=int(round(self.ratio * len(cells))), replace=False)
        mask = np.zeros((n_frames, n_bins), dtype=bool)
        for c in chosen:
            t, k = cells[c]
            mask[max(t, 0):t + self.patch_frames, max(k, 0):k + self.patch_bins] = True
        return mask


@dataclass
class MspSample:
    inputs: np.ndarray
    target: np.ndarray
    patches: np.ndarray
    kind: str = "msp"


def make_msp_sample(noisy_logmag: np.ndarray, corruption: MspCorruption, floor: float = 1e-8) -> MspSample:
    """Zero random patches (log floor) of the noisy log-magnitude; the target is the original."""
    noisy_logmag = np.asarray(noisy_logmag, dtype=np.float64)
    patches = corruption.patch_mask(*noisy_logmag.shape)
    inputs = np.where(patches, np.log(floor), noisy_logmag)
    return MspSample(inputs, noisy_logmag.copy(), patches)


# -- NyTT ------------------------------------------------------------------

class NoiseBank:
    """Ordered list of noise recordings to draw NyTT augmentations from."""

    def __init__(self, items: list[tuple[str, Waveform]]):
        self.items = list(items)

    def __len__(self) -> int:
        return len(self.items)

    @classmethod
    def from_directory(cls, directory: str | os.PathLike, sample_rate: int = DEFAULT_SR) -> NoiseBank:
        files = sorted(Path(directory).glob("*.wav"))
        return cls([(p.stem, read_wav(p, target_rate=sample_rate)) for p in files])

    @classmethod
    def synthetic(cls, sample_rate: int = DEFAULT_SR, seconds: float = 4.0, seed: int = 1234,
                  families: tuple[str, ...] = ("pink",) + SHIFTED_FAMILIES + ("babble",),
                  per_family: int = 3) -> NoiseBank:
        """Stand-in for recorded environmental noise, built from the synthetic families."""
        items = []
        for fi, fam in enumerate(families):
            for j in range(per_family):
                items.append((f"{fam}{j}", gen_noise(fam, seconds, sample_rate, derive_seed(seed, fi, j))))
        return cls(items)


@dataclass(frozen=True)
class NyttAugmentation:
    source: str = "gaussian"
    snr_range: tuple[float, float] = (0.0, 15.0)
    seed: int = 0

    def __post_init__(self):
        if self.source not in ("gaussian", "bank"):
            raise TaskError(f"noise source must be 'gaussian' or 'bank', got {self.source!r}")
        lo, hi = self.snr_range
        if lo > hi:
            raise TaskError(f"bad SNR range {self.snr_range}")

    def draw_snr(self) -> float:
        return float(np.random.default_rng(derive_seed(self.seed, 0)).uniform(*self.snr_range))


@dataclass
class NyttSample:
    noisier: Waveform
    target_wave: np.ndarray
    snr_db: float
    noisier_spec: Spectrogram
    inputs: np.ndarray
    oracle: np.ndarray
    kind: str = "nytt"


def make_nytt_sample(noisy: Waveform, aug: NyttAugmentation, bank: NoiseBank | None = None,
                     cfg: StftConfig = StftConfig(), snr_db: float | None = None) -> NyttSample:
    """Add fresh noise to an already noisy signal; the original noisy signal is the target."""
    if noisy.power() == 0.0:
        raise TaskError("cannot augment a zero-power signal")
    rng = np.random.default_rng(derive_seed(aug.seed, 1))
    snr = aug.draw_snr() if snr_db is None else float(snr_db)
    n = len(noisy)
    if aug.source == "gaussian":
        noise = rng.standard_normal(n)
    else:
        if not bank:
            raise TaskError("noise bank is empty")
        # sparse recordings (bursts) can yield a silent crop; redraw a few times
        for _ in range(16):
            _, rec = bank.items[int(rng.integers(len(bank)))]
            noise = fit_length(rec.samples, n, rng)
            if np.any(noise):
                break
        else:
            raise TaskError("noise bank produced only silent crops")
    noisier = mix_at_snr(noisy, Waveform(noise, noisy.sample_rate), snr, seed=derive_seed(aug.seed, 2))
    noisy_spec = stft(noisy, cfg)
    noisier_spec = stft(noisier, cfg)
    return NyttSample(
        noisier=noisier,
        target_wave=noisy.samples,
        snr_db=snr,
        noisier_spec=noisier_spec,
        inputs=log_magnitude(noisier_spec, cfg.log_floor),
        oracle=oracle_mask(noisy_spec, noisier_spec),
    )


# -- auxiliary task wiring -------------------------------------------------

VARIANTS = {"msp": ("msp", None), "nytt-gaussian": ("nytt", "gaussian"), "nytt-real": ("nytt", "bank")}


def stack_spectrograms(specs: list[Spectrogram]) -> Spectrogram:
    first = specs[0]
    return first.like(np.stack([s.values for s in specs]))


@dataclass
class AuxTask:
    """One of the three self-supervised variants, ready to build batched samples."""

    variant: str = "nytt-real"
    patch_bins: int = 16
    patch_frames: int = 8
    mask_ratio: float = 0.3
    snr_range: tuple[float, float] = (0.0, 15.0)
    bank: NoiseBank | None = None
    stft_cfg: StftConfig = StftConfig()

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise TaskError(f"unknown auxiliary task {self.variant!r}; expected one of {sorted(VARIANTS)}")
        if self.variant == "nytt-real" and self.bank is None:
            self.bank = NoiseBank.synthetic()

    @property
    def task(self) -> str:
        return VARIANTS[self.variant][0]

    def build(self, noisy: list[Waveform], seeds: list[int], logmags: list[np.ndarray] | None = None):
        """Batch of self-supervised samples, one per waveform, each drawn from its own seed."""
        if self.task == "msp":
            if logmags is None:
                logmags = [log_magnitude(stft(w, self.stft_cfg), self.stft_cfg.log_floor) for w in noisy]
            parts = [
                make_msp_sample(lm, MspCorruption(self.patch_bins, self.patch_frames, self.mask_ratio, s),
                                self.stft_cfg.log_floor)
                for lm, s in zip(logmags, seeds)
            ]
            return MspSample(np.stack([p.inputs for p in parts]), np.stack([p.target for p in parts]),
                             np.stack([p.patches for p in parts]))
        source = VARIANTS[self.variant][1]
        parts = [make_nytt_sample(w, NyttAugmentation(source, self.snr_range, s), self.bank, self.stft_cfg)
                 for w, s in zip(noisy, seeds)]
        return NyttSample(
            noisier=parts[0].noisier,
            target_wave=np.stack([p.target_wave for p in parts]),
            snr_db=float(np.mean([p.snr_db for p in parts])),
            noisier_spec=stack_spectrograms([p.noisier_spec for p in parts]),
            inputs=np.stack([p.inputs for p in parts]),
            oracle=np.stack([p.oracle for p in parts]),
        )
