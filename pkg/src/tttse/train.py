"""Joint training of the main and self-supervised objectives."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import AdamW, PlateauScheduler, Tensor, backward, no_grad
from .data import Utterance, derive_seed
from .dsp import Spectrogram, StftConfig, Waveform, log_magnitude, masked_istft, stft
from .losses import LossWeights, loss_main, loss_ss, oracle_mask, si_sdr_db
from .model import ModelDims, NumericError, YModel
from .tasks import AuxTask, stack_spectrograms

logger = logging.getLogger(__name__)


class TrainingDiverged(NumericError):
    pass


@dataclass
class TrainConfig:
    variant: str = "nytt-real"
    epochs: int = 30
    batch_size: int = 4
    lr: float = 1e-3
    weight_decay: float = 0.01
    patience: int = 5
    factor: float = 0.5
    threshold: float = 1e-4
    min_lr: float = 1e-6
    mask_weight: float = 1.0
    si_sdr_weight: float = 1.0
    ss_weight: float = 1.0  # 0 trains the supervised-only baseline
    val_fraction: float = 0.1
    hidden: int = 256
    context: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.mask_weight, self.si_sdr_weight)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Prepared:
    """Per-utterance features that do not change between epochs."""

    uid: str
    noisy: Waveform
    clean: np.ndarray
    spec: Spectrogram
    logmag: np.ndarray
    oracle: np.ndarray


def prepare(utts: Sequence[Utterance], cfg: StftConfig = StftConfig()) -> list[Prepared]:
    out = []
    for u in utts:
        if u.clean is None:
            raise ValueError(f"utterance {u.uid} has no clean reference")
        spec = stft(u.noisy, cfg)
        out.append(Prepared(u.uid, u.noisy, u.clean.samples, spec, log_magnitude(spec, cfg.log_floor),
                            oracle_mask(stft(u.clean, cfg), spec)))
    return out


def _stack(batch: list[Prepared]):
    return (np.stack([b.logmag for b in batch]), stack_spectrograms([b.spec for b in batch]),
            np.stack([b.clean for b in batch]), np.stack([b.oracle for b in batch]))


def joint_loss(model: YModel, batch: list[Prepared], aux: AuxTask | None, aux_seeds: list[int],
               weights: LossWeights = LossWeights(), ss_weight: float = 1.0) -> tuple[Tensor, dict]:
    """``L_m(x, y; encoder, main) + ss_weight * L_s(x; encoder, ss)`` on one batch."""
    logmag, spec, clean, oracle = _stack(batch)
    mask = model.forward_main(logmag)
    total, parts = loss_main(mask, spec, clean, oracle, weights)
    parts = {"main": total.item(), **{f"main_{k}": v for k, v in parts.items()}}
    if aux is not None and ss_weight:
        sample = aux.build([b.noisy for b in batch], aux_seeds, [b.logmag for b in batch])
        l_s, sparts = loss_ss(aux.task, model.forward_ss(sample.inputs), sample, weights)
        parts["ss"] = l_s.item()
        parts.update({f"ss_{k}": v for k, v in sparts.items()})
        total = total + l_s * ss_weight
    return total, parts


def evaluate_main(model: YModel, items: Sequence[Prepared], weights: LossWeights = LossWeights(),
                  batch_size: int = 8) -> dict[str, float]:
    """Main loss and SI-SDR of enhanced and noisy signals, without recording a graph."""
    losses, sdr, noisy_sdr = [], [], []
    with no_grad():
        for i in range(0, len(items), batch_size):
            batch = list(items[i:i + batch_size])
            logmag, spec, clean, oracle = _stack(batch)
            mask = model.forward_main(logmag)
            loss, _ = loss_main(mask, spec, clean, oracle, weights)
            losses.append(loss.item() * len(batch))
            sdr.extend(si_sdr_db(masked_istft(mask, spec).data, clean))
            noisy_sdr.extend(si_sdr_db(np.stack([b.noisy.samples for b in batch]), clean))
    return {"loss_main": float(np.sum(losses) / len(items)), "si_sdr": float(np.mean(sdr)),
            "noisy_si_sdr": float(np.mean(noisy_sdr))}


def split_validation(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng(derive_seed(seed, 99)).permutation(n)
    n_val = int(math.ceil(fraction * n)) if fraction > 0 else 0
    n_val = min(n_val, n - 1)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


@dataclass
class TrainResult:
    model: YModel
    optimizer: AdamW
    history: list[dict] = field(default_factory=list)
    config: TrainConfig | None = None

    def metadata(self) -> dict:
        return {"config": asdict(self.config) if self.config else {}, "history": self.history,
                "epochs": len(self.history)}


def train_joint(model: YModel, data: Sequence[Utterance] | Sequence[Prepared], cfg: TrainConfig,
                aux: AuxTask | None = None, on_epoch: Callable[[dict], None] | None = None,
                stft_cfg: StftConfig = StftConfig()) -> TrainResult:
    """Minimise the summed main and self-supervised losses; AdamW steps every parameter group."""
    if aux is None and cfg.ss_weight:
        aux = AuxTask(cfg.variant, stft_cfg=stft_cfg)
    if aux is not None and aux.task != model.task:
        raise ValueError(f"auxiliary task {aux.variant!r} does not fit a {model.task!r} model")
    items = list(data) if data and isinstance(data[0], Prepared) else prepare(data, stft_cfg)
    train_idx, val_idx = split_validation(len(items), cfg.val_fraction, cfg.seed)
    train_items = [items[i] for i in train_idx]
    val_items = [items[i] for i in val_idx]

    # without an auxiliary loss the ss branch receives no gradient and is left as initialised
    params = model.parameters() if aux is not None else model.select({"encoder", "main"}).tensors
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = PlateauScheduler(opt, patience=cfg.patience, factor=cfg.factor, threshold=cfg.threshold,
                             min_lr=cfg.min_lr)
    result = TrainResult(model, opt, [], cfg)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng(derive_seed(cfg.seed, 7, epoch)).permutation(len(train_items))
        sums: dict[str, float] = {}
        n_steps = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = [train_items[i] for i in idx]
            seeds = [derive_seed(cfg.seed, 8, epoch, int(i)) for i in idx]
            opt.zero_grad()
            total, parts = joint_loss(model, batch, aux, seeds, cfg.weights, cfg.ss_weight)
            if not math.isfinite(total.item()):
                raise TrainingDiverged(f"loss became {total.item()} at epoch {epoch}, step {n_steps}")
            backward(total)
            opt.step()
            n_steps += 1
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
        record = {"epoch": epoch + 1, "lr": opt.lr,
                  "loss_main": sums["main"] / n_steps, "loss_ss": sums.get("ss", 0.0) / n_steps}
        if val_items:
            val = evaluate_main(model, val_items, cfg.weights)
            record.update({"val_loss_main": val["loss_main"], "val_si_sdr": val["si_sdr"],
                           "val_noisy_si_sdr": val["noisy_si_sdr"]})
            sched.step(val["loss_main"])
        else:
            sched.step(record["loss_main"])
        record["seconds"] = time.perf_counter() - t0
        result.history.append(record)
        logger.info(json.dumps(record, sort_keys=True))
        if on_epoch is not None:
            on_epoch(record)
    return result


def build_and_train(data: Sequence[Utterance], cfg: TrainConfig,
                    on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    aux = AuxTask(cfg.variant)
    model = YModel(aux.task, ModelDims(hidden=cfg.hidden, context=cfg.context), seed=cfg.seed)
    return train_joint(model, data, cfg, aux if cfg.ss_weight else None, on_epoch)
