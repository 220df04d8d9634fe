"""Synthetic voiced speech, coloured / structured noise, and on-disk corpora.

A corpus directory holds ``clean/<id>.wav``, ``noisy/<id>.wav`` (32-bit
float) and ``manifest.jsonl`` with one JSON record per utterance.  Every
record carries the seeds that generated it, so a corpus can be rebuilt
byte for byte.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.signal import lfilter

from .dsp import DEFAULT_SR, Waveform, fit_length, mix_at_snr
from .wavio import read_wav, write_wav

logger = logging.getLogger(__name__)

NOISE_FAMILIES = ("white", "pink", "brown", "babble", "burst")
SOURCE_FAMILIES = ("white", "pink", "babble")
SHIFTED_FAMILIES = ("brown", "burst")
MANIFEST = "manifest.jsonl"


class DataError(ValueError):
    pass


def derive_seed(*keys: int) -> int:
    """Stable 32-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


# -- clean voice -----------------------------------------------------------

@dataclass
class SyntheticVoice:
    f0: float = 140.0
    f0_depth: float = 0.08          # relative vibrato / intonation excursion
    f0_rate: float = 3.0            # Hz
    f0_glide: float = 0.0           # relative change over the utterance
    n_harmonics: int = 30
    formants: tuple[tuple[float, float], ...] = ((500.0, 120.0), (1500.0, 200.0), (2500.0, 300.0))
    tilt_db_per_octave: float = -6.0
    am_depth: float = 1.0           # 0 disables syllabic gating
    syllable_rate: float = 4.0      # syllables per second
    seed: int = 0

    @classmethod
    def random(cls, seed: int) -> SyntheticVoice:
        rng = np.random.default_rng(seed)
        return cls(
            f0=float(rng.uniform(95.0, 260.0)),
            f0_depth=float(rng.uniform(0.03, 0.15)),
            f0_rate=float(rng.uniform(1.0, 5.0)),
            f0_glide=float(rng.uniform(-0.2, 0.2)),
            n_harmonics=int(rng.integers(15, 40)),
            formants=(
                (float(rng.uniform(300, 900)), float(rng.uniform(80, 160))),
                (float(rng.uniform(900, 2300)), float(rng.uniform(100, 250))),
                (float(rng.uniform(2300, 3500)), float(rng.uniform(150, 350))),
            ),
            tilt_db_per_octave=float(rng.uniform(-9.0, -4.0)),
            am_depth=1.0,
            syllable_rate=float(rng.uniform(3.0, 6.0)),
            seed=seed,
        )

    def envelope(self, freq: np.ndarray) -> np.ndarray:
        freq = np.maximum(freq, 1.0)
        env = (freq / 100.0) ** (self.tilt_db_per_octave / (20.0 * np.log10(2.0)))
        res = sum(np.exp(-0.5 * ((freq - fc) / bw) ** 2) for fc, bw in self.formants)
        return env * (0.15 + res)


def _syllable_gate(n: int, fs: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    gate = np.zeros(n)
    pos = int(rng.uniform(0.0, 0.15) * fs)
    while pos < n:
        dur = int(fs * rng.uniform(0.6, 1.4) / rate)
        if rng.random() < 0.75:
            seg = min(dur, n - pos)
            ramp = np.hanning(dur)[:seg] ** 0.5
            gate[pos:pos + seg] = np.maximum(gate[pos:pos + seg], rng.uniform(0.5, 1.0) * ramp)
        pos += dur + int(fs * rng.uniform(0.0, 0.12))
    if not gate.any():
        # every syllable drew silence; voice the whole span so the utterance is usable
        gate[:] = np.hanning(n + 2)[1:-1] ** 0.5
    return gate


def gen_voice(spec: SyntheticVoice, duration: float, fs: int = DEFAULT_SR) -> Waveform:
    """Harmonic series on a wandering f0, shaped by a formant envelope and syllabic AM."""
    if duration <= 0:
        raise DataError(f"duration must be positive, got {duration}")
    n = int(round(duration * fs))
    rng = np.random.default_rng(spec.seed)
    t = np.arange(n) / fs
    f0 = spec.f0 * (1.0 + spec.f0_glide * t / max(duration, 1e-9))
    if spec.f0_depth:
        f0 = f0 * (1.0 + spec.f0_depth * np.sin(2 * np.pi * spec.f0_rate * t + rng.uniform(0, 2 * np.pi)))
    f0 = np.clip(f0, 80.0, 400.0)
    phase = 2 * np.pi * (np.cumsum(f0) - f0[0]) / fs
    x = np.zeros(n)
    for k in range(1, spec.n_harmonics + 1):
        fk = k * f0
        amp = np.where(fk < 0.45 * fs, spec.envelope(fk), 0.0)
        x += amp * np.sin(k * phase + (rng.uniform(0, 2 * np.pi) if k > 1 else 0.0))
    if spec.am_depth:
        gate = _syllable_gate(n, fs, spec.syllable_rate, rng)
        x *= (1.0 - spec.am_depth) + spec.am_depth * gate
    rms = np.sqrt(np.mean(x ** 2))
    if rms > 0:
        x *= 0.1 / rms
    return Waveform(x, fs)


# -- noise -----------------------------------------------------------------

def _shaped(n: int, fs: int, rng: np.random.Generator, exponent: float, corner: float) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / fs)
    gain = np.maximum(f, corner) ** (-exponent)
    gain[0] = 0.0
    return np.fft.irfft(spec * gain, n=n)


def _babble(n: int, fs: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / fs
    x = np.zeros(n)
    for _ in range(int(rng.integers(5, 9))):
        f0 = rng.uniform(90.0, 300.0) * (1.0 + 0.05 * np.sin(2 * np.pi * rng.uniform(0.5, 3.0) * t))
        phase = 2 * np.pi * np.cumsum(f0) / fs
        talker = sum(
            (1.0 / k) * np.sin(k * phase * (1.0 + rng.uniform(-0.01, 0.01)) + rng.uniform(0, 2 * np.pi))
            for k in range(1, int(rng.integers(6, 15)))
        )
        am = 0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(2.0, 6.0) * t + rng.uniform(0, 2 * np.pi))
        x += talker * am
    return x


def _bursts(n: int, fs: int, rng: np.random.Generator) -> np.ndarray:
    x = np.zeros(n)
    n_events = max(1, rng.poisson(8.0 * n / fs))
    for start in np.sort(rng.integers(0, n, n_events)):
        tau = rng.uniform(0.005, 0.04) * fs
        length = min(int(6 * tau), n - start)
        decay = np.exp(-np.arange(length) / tau)
        # one-pole low-pass with a random corner colours each burst differently
        burst = lfilter([1.0], [1.0, -rng.uniform(0.0, 0.9)], rng.standard_normal(length))
        x[start:start + length] += rng.uniform(0.3, 1.0) * burst * decay
    return x


def gen_noise(family: str, duration: float, fs: int = DEFAULT_SR, seed: int = 0) -> Waveform:
    """Unit-variance noise of the given family (``white`` is plain iid N(0, 1))."""
    n = int(round(duration * fs))
    if n <= 0:
        raise DataError(f"duration must be positive, got {duration}")
    rng = np.random.default_rng(seed)
    if family == "white":
        return Waveform(rng.standard_normal(n), fs)
    if family == "pink":
        x = _shaped(n, fs, rng, 0.5, 20.0)
    elif family == "brown":
        x = _shaped(n, fs, rng, 1.0, 80.0)
    elif family == "babble":
        x = _babble(n, fs, rng)
    elif family == "burst":
        x = _bursts(n, fs, rng)
    elif family.startswith("wav:"):
        return _user_noise(family[4:], n, fs, rng)
    else:
        raise DataError(f"unknown noise family {family!r}")
    return Waveform(x / np.std(x), fs)


def _user_noise(directory: str, n: int, fs: int, rng: np.random.Generator) -> Waveform:
    files = sorted(Path(directory).glob("*.wav"))
    if not files:
        raise DataError(f"no .wav files in noise directory {directory}")
    w = read_wav(files[int(rng.integers(len(files)))], target_rate=fs)
    return Waveform(fit_length(w.samples, n, rng), fs)


# -- corpora ---------------------------------------------------------------

@dataclass
class DomainSpec:
    name: str = "source"
    families: list[str] = field(default_factory=lambda: list(SOURCE_FAMILIES))
    snr_range: tuple[float, float] = (0.0, 15.0)
    n_utterances: int = 200
    duration: float = 2.0
    sample_rate: int = DEFAULT_SR
    seed: int = 0

    def __post_init__(self):
        self.families = list(self.families)
        self.snr_range = tuple(self.snr_range)
        for fam in self.families:
            if fam not in NOISE_FAMILIES and not fam.startswith("wav:"):
                raise DataError(f"unknown noise family {fam!r}")
        if not self.families:
            raise DataError("domain needs at least one noise family")

    def disjoint_from(self, other: DomainSpec) -> bool:
        return not set(self.families) & set(other.families)

    @classmethod
    def from_dict(cls, d: dict) -> DomainSpec:
        return cls(**d)


def default_benchmark(seed: int = 0, n_train: int = 200, n_test: int = 40, duration: float = 2.0) -> dict[str, DomainSpec]:
    """Training set and two test sets; test noise families either match or avoid training."""
    return {
        "train": DomainSpec("train", list(SOURCE_FAMILIES), n_utterances=n_train, duration=duration,
                            seed=derive_seed(seed, 1)),
        "source": DomainSpec("source", list(SOURCE_FAMILIES), n_utterances=n_test, duration=duration,
                             seed=derive_seed(seed, 2)),
        "shifted": DomainSpec("shifted", list(SHIFTED_FAMILIES), n_utterances=n_test, duration=duration,
                              seed=derive_seed(seed, 3)),
    }


@dataclass
class Utterance:
    uid: str
    noisy: Waveform
    clean: Waveform | None = None
    snr_db: float | None = None
    family: str | None = None
    domain: str | None = None


def synthesize_utterance(spec: DomainSpec, index: int) -> tuple[Waveform, Waveform, dict]:
    voice_seed = derive_seed(spec.seed, index, 0)
    noise_seed = derive_seed(spec.seed, index, 1)
    mix_seed = derive_seed(spec.seed, index, 2)
    rng = np.random.default_rng(derive_seed(spec.seed, index, 3))
    family = spec.families[int(rng.integers(len(spec.families)))]
    snr = float(rng.uniform(*spec.snr_range))
    clean = gen_voice(SyntheticVoice.random(voice_seed), spec.duration, spec.sample_rate)
    noise = gen_noise(family, spec.duration, spec.sample_rate, noise_seed)
    noisy = mix_at_snr(clean, noise, snr, mix_seed)
    meta = {"snr_db": snr, "family": family, "voice_seed": voice_seed, "noise_seed": noise_seed,
            "mix_seed": mix_seed}
    return clean, noisy, meta


def build_dataset(spec: DomainSpec, out_dir: str | os.PathLike) -> DatasetHandle:
    out = Path(out_dir)
    (out / "clean").mkdir(parents=True, exist_ok=True)
    (out / "noisy").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(spec.n_utterances):
        uid = f"{spec.name}_{i:05d}"
        clean, noisy, meta = synthesize_utterance(spec, i)
        write_wav(out / "clean" / f"{uid}.wav", clean)
        write_wav(out / "noisy" / f"{uid}.wav", noisy)
        records.append({"id": uid, "clean": f"clean/{uid}.wav", "noisy": f"noisy/{uid}.wav",
                        "domain": spec.name, **meta})
    with open(out / MANIFEST, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(out / "domain.json", "w") as fh:
        json.dump(asdict(spec), fh, indent=2, sort_keys=True)
    logger.info("wrote %d utterances to %s", len(records), out)
    return DatasetHandle(out)


class DatasetHandle:
    """Manifest-ordered view over a corpus directory.

    A directory without a manifest is treated as noisy-only input: every
    ``*.wav`` directly inside it (sorted by name) becomes one utterance.
    A single ``.wav`` path gives a one-utterance handle.
    """

    def __init__(self, root: str | os.PathLike, sample_rate: int = DEFAULT_SR):
        self.root = Path(root)
        self.sample_rate = sample_rate
        manifest = self.root / MANIFEST
        if self.root.is_file() and self.root.suffix.lower() == ".wav":
            self.records = [{"id": self.root.stem, "noisy": self.root.name}]
            self.root = self.root.parent
        elif manifest.exists():
            with open(manifest) as fh:
                self.records = [json.loads(line) for line in fh if line.strip()]
        elif self.root.is_dir():
            self.records = [{"id": p.stem, "noisy": p.name} for p in sorted(self.root.glob("*.wav"))]
        else:
            raise DataError(f"{self.root} is neither a corpus nor a directory of WAV files")
        if not self.records:
            raise DataError(f"{self.root} contains no utterances")

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> Utterance:
        rec = self.records[i]
        clean = read_wav(self.root / rec["clean"], self.sample_rate) if rec.get("clean") else None
        return Utterance(rec["id"], read_wav(self.root / rec["noisy"], self.sample_rate), clean,
                         rec.get("snr_db"), rec.get("family"), rec.get("domain"))

    def __iter__(self) -> Iterator[Utterance]:
        for i in range(len(self)):
            yield self[i]

    def load(self) -> list[Utterance]:
        return list(self)

    @property
    def families(self) -> set[str]:
        return {r["family"] for r in self.records if "family" in r}
