"""Test-time training: adapt encoder + self-supervised branch per input, then enhance.

Strategies
    ``none``               no adaptation (plain inference)
    ``standalone``         adapt on the current input, predict, discard the update
    ``online``             as standalone but the update carries over to the next input
    ``online-batch``       online, adapting on the current input and the previous ``window - 1``
    ``online-batch-bias``  online-batch restricted to bias leaves

The main branch is never part of the optimised set.
"""

from __future__ import annotations

import logging
import math
import time
import zlib
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .autodiff import AdamW, backward, no_grad
from .data import Utterance, derive_seed
from .dsp import Spectrogram, StftConfig, Waveform, log_magnitude, masked_istft, stft
from .losses import LossWeights, loss_ss
from .metrics import EvalRecord, metric_lsd, metric_si_sdr, metric_ssnr
from .model import YModel
from .tasks import AuxTask

logger = logging.getLogger(__name__)

STRATEGIES = ("none", "standalone", "online", "online-batch", "online-batch-bias")

# Learning rates the method was tuned with; see README for the synthetic benchmark's choice.
DEFAULT_LR = {"msp": 1e-4, "nytt-real": 1e-4, "nytt-gaussian": 1e-6}


class TttError(ValueError):
    pass


@dataclass
class TttConfig:
    strategy: str = "online-batch"
    lr: float = 1e-4
    steps: int = 1
    window: int = 5
    bias_only: bool = False
    weight_decay: float = 0.01
    seed: int = 0
    track_loss_after: bool = True

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise TttError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.window < 1:
            raise TttError("window must be >= 1")
        if self.steps < 0 or self.lr < 0:
            raise TttError("steps and lr must be non-negative")
        if self.strategy == "online-batch-bias":
            self.bias_only = True

    @property
    def kinds(self) -> set[str]:
        return {"bias"} if self.bias_only else {"weight", "bias"}

    @property
    def effective_window(self) -> int:
        return self.window if self.strategy.startswith("online-batch") else 1

    @property
    def label(self) -> str:
        if self.strategy == "none":
            return "joint"
        if self.strategy == "online-batch" and self.bias_only:
            return "online-batch-bias"
        return self.strategy


def _uid_key(uid: str) -> int:
    return zlib.crc32(uid.encode())


@dataclass
class _Item:
    uid: str
    noisy: Waveform
    spec: Spectrogram
    logmag: np.ndarray


class TttState:
    """Working model plus everything a strategy carries between inputs."""

    def __init__(self, model: YModel, aux: AuxTask, cfg: TttConfig, weights: LossWeights = LossWeights(),
                 stft_cfg: StftConfig = StftConfig()):
        if aux.task != model.task:
            raise TttError(f"auxiliary task {aux.variant!r} does not fit a {model.task!r} model")
        self.model = model
        self.aux = aux
        self.cfg = cfg
        self.weights = weights
        self.stft_cfg = stft_cfg
        self.pristine = model.snapshot()
        self.view = model.select({"encoder", "ss"}, cfg.kinds)
        self.window: deque[_Item] = deque(maxlen=cfg.effective_window)
        self.optimizer: AdamW | None = None
        self.n_seen = 0

    def _new_optimizer(self) -> AdamW:
        return AdamW(self.view.tensors, lr=self.cfg.lr, weight_decay=self.cfg.weight_decay)

    def delta_norm(self) -> float:
        return float(math.sqrt(sum(
            np.sum((self.model.registry[n].tensor.data - self.pristine.params[n]) ** 2) for n in self.view.names)))

    def _save(self) -> tuple[dict, dict | None]:
        params = {n: self.model.registry[n].tensor.data.copy() for n in self.view.names}
        return params, (self.optimizer.state_dict() if self.optimizer else None)

    def _load(self, saved) -> None:
        params, opt = saved
        for n, v in params.items():
            np.copyto(self.model.registry[n].tensor.data, v)
        if self.optimizer is not None and opt is not None:
            self.optimizer.load_state_dict(opt)

    def reset(self) -> None:
        """Back to the trained parameters with an empty window and no optimizer moments."""
        self.model.restore(self.pristine)
        self.window.clear()
        self.optimizer = None
        self.n_seen = 0

    def predict(self, item: _Item) -> tuple[np.ndarray, np.ndarray]:
        with no_grad():
            mask = self.model.forward_main(item.logmag)
            return masked_istft(mask, item.spec).data, mask.data

    def _ss_loss(self, sample):
        out = self.model.forward_ss(sample.inputs)
        loss, _ = loss_ss(self.aux.task, out, sample, self.weights)
        return loss

    def _adapt(self, current: _Item, diag: dict) -> None:
        cfg = self.cfg
        if cfg.strategy == "standalone" or self.optimizer is None:
            self.optimizer = self._new_optimizer()
        members = list(self.window)
        saved = self._save()
        first_sample = None
        try:
            for step in range(cfg.steps):
                seeds = [derive_seed(cfg.seed, _uid_key(m.uid), _uid_key(current.uid), step) for m in members]
                sample = self.aux.build([m.noisy for m in members], seeds, [m.logmag for m in members])
                self.model.zero_grad()
                loss = self._ss_loss(sample)
                if not math.isfinite(loss.item()):
                    raise FloatingPointError(f"self-supervised loss is {loss.item()}")
                if step == 0:
                    first_sample = sample
                    diag["ss_loss_before"] = loss.item()
                backward(loss)
                self.optimizer.step()
                if not all(np.all(np.isfinite(t.data)) for t in self.view.tensors):
                    raise FloatingPointError("non-finite parameters after update")
        except (FloatingPointError, ValueError) as exc:
            logger.warning("adaptation on %s rolled back: %s", current.uid, exc)
            self._load(saved)
            diag["rolled_back"] = True
            first_sample = None
        finally:
            self.model.zero_grad()
        if cfg.track_loss_after and first_sample is not None:
            with no_grad():
                diag["ss_loss_after"] = self._ss_loss(first_sample).item()

    def step(self, uid: str, noisy: Waveform) -> tuple[Waveform, dict]:
        item = _Item(uid, noisy, *self._features(noisy))
        t0 = time.perf_counter()
        diag = {"uid": uid, "index": self.n_seen, "strategy": self.cfg.label, "rolled_back": False,
                "ss_loss_before": None, "ss_loss_after": None}
        self.window.append(item)
        if self.cfg.strategy != "none" and self.cfg.steps > 0:
            self._adapt(item, diag)
        enhanced, mask = self.predict(item)
        diag["delta_norm"] = self.delta_norm()
        if self.cfg.strategy == "standalone":
            self.model.restore(self.pristine)
        diag["wall_ms"] = 1000.0 * (time.perf_counter() - t0)
        diag["window"] = [m.uid for m in self.window]
        self.n_seen += 1
        return Waveform(enhanced, noisy.sample_rate), diag

    def _features(self, noisy: Waveform) -> tuple[Spectrogram, np.ndarray]:
        spec = stft(noisy, self.stft_cfg)
        return spec, log_magnitude(spec, self.stft_cfg.log_floor)


def adapt_and_predict(state: TttState, uid: str, noisy: Waveform) -> tuple[Waveform, dict]:
    return state.step(uid, noisy)


def _metrics(enhanced: Waveform, utt: Utterance, stft_cfg: StftConfig) -> dict:
    if utt.clean is None:
        return {}
    return {
        "si_sdr": metric_si_sdr(enhanced.samples, utt.clean.samples),
        "ssnr": metric_ssnr(enhanced.samples, utt.clean.samples, utt.clean.sample_rate),
        "lsd": metric_lsd(stft(enhanced, stft_cfg), stft(utt.clean, stft_cfg)),
    }


def run_ttt_eval(model: YModel, dataset: Iterable[Utterance], cfg: TttConfig, aux: AuxTask,
                 method: str | None = None, domain: str = "shifted",
                 on_sample: Callable[[dict, Waveform], None] | None = None,
                 weights: LossWeights = LossWeights()) -> tuple[list[EvalRecord], TttState]:
    """Run one strategy over ``dataset`` in order, on a private copy of ``model``."""
    state = TttState(model.clone(), aux, cfg, weights)
    records = []
    for utt in dataset:
        enhanced, diag = state.step(utt.uid, utt.noisy)
        m = _metrics(enhanced, utt, state.stft_cfg)
        diag.update(m)
        records.append(EvalRecord(utt.uid, method or aux.variant, cfg.label, domain, m.get("si_sdr"),
                                  m.get("ssnr"), m.get("lsd"), diag["wall_ms"], diag["ss_loss_before"],
                                  diag["ss_loss_after"], diag["delta_norm"], diag["rolled_back"]))
        if on_sample is not None:
            on_sample(diag, enhanced)
    return records, state


def reevaluate_source(state: TttState, dataset: Iterable[Utterance], domain: str = "source") -> list[EvalRecord]:
    """Score the adapted parameters, frozen, on other data (no further updates)."""
    records = []
    for utt in dataset:
        t0 = time.perf_counter()
        spec, logmag = state._features(utt.noisy)
        enhanced, _ = state.predict(_Item(utt.uid, utt.noisy, spec, logmag))
        wave = Waveform(enhanced, utt.noisy.sample_rate)
        m = _metrics(wave, utt, state.stft_cfg)
        records.append(EvalRecord(utt.uid, state.aux.variant, state.cfg.label, domain, m.get("si_sdr"),
                                  m.get("ssnr"), m.get("lsd"), 1000.0 * (time.perf_counter() - t0),
                                  delta_norm=state.delta_norm()))
    return records


def noisy_records(dataset: Iterable[Utterance], domain: str, stft_cfg: StftConfig = StftConfig()) -> list[EvalRecord]:
    out = []
    for utt in dataset:
        m = _metrics(utt.noisy, utt, stft_cfg)
        out.append(EvalRecord(utt.uid, "noisy", "-", domain, m.get("si_sdr"), m.get("ssnr"), m.get("lsd")))
    return out


def strategy_matrix(lr: float, window: int = 5, steps: int = 1, seed: int = 0,
                    strategies: Sequence[str] = STRATEGIES) -> list[TttConfig]:
    return [TttConfig(s, lr=lr, steps=steps, window=window, seed=seed) for s in strategies]
