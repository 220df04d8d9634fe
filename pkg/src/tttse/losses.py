"""Training objectives: mask MAE, negative SI-SDR, log-spectral MSE and their sums."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, absolute, log, reduce_mean, reduce_sum, square
from .dsp import Spectrogram, masked_istft

EPS = 1e-8
# keeps an all-zero estimate finite without measurably breaking scale invariance
_TINY = 1e-30
_DB = 10.0 / np.log(10.0)


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    mask: float = 1.0
    si_sdr: float = 1.0


def oracle_mask(clean: Spectrogram, noisy: Spectrogram, eps: float = EPS) -> np.ndarray:
    """Clipped ideal amplitude mask ``min(|S_clean| / (|S_noisy| + eps), 1)``."""
    if clean.values.shape != noisy.values.shape or clean.hop != noisy.hop or clean.win_length != noisy.win_length:
        raise LossError(f"geometry mismatch: {clean.values.shape} vs {noisy.values.shape}")
    return np.minimum(np.abs(clean.values) / (np.abs(noisy.values) + eps), 1.0)


def loss_mask(pred: Tensor, oracle: np.ndarray) -> Tensor:
    if pred.shape != np.shape(oracle):
        raise ShapeError("loss_mask", pred.shape, np.shape(oracle))
    return reduce_mean(absolute(pred - oracle))


def si_sdr_db(est: np.ndarray, ref: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Scale-invariant SDR in dB along the last axis.

    Both energies get ``eps * ||est||^2`` added, so a perfect estimate scores
    ``10 log10((1 + eps) / eps)`` (about 80 dB) at any scale.
    """
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise ShapeError("si_sdr", est.shape, ref.shape)
    ref_energy = np.sum(ref * ref, axis=-1, keepdims=True)
    if np.any(ref_energy == 0):
        raise LossError("SI-SDR reference has zero energy")
    alpha = np.sum(est * ref, axis=-1, keepdims=True) / ref_energy
    target = alpha * ref
    floor = eps * np.sum(est * est, axis=-1) + _TINY
    num = np.sum(target * target, axis=-1) + floor
    den = np.sum((target - est) ** 2, axis=-1) + floor
    return _DB * (np.log(num) - np.log(den))


def loss_si_sdr(est: Tensor, ref: np.ndarray, eps: float = EPS) -> Tensor:
    """Negative SI-SDR (dB), averaged over any leading batch axes."""
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise ShapeError("loss_si_sdr", est.shape, ref.shape)
    ref_energy = np.sum(ref * ref, axis=-1, keepdims=True)
    if np.any(ref_energy == 0):
        raise LossError("SI-SDR reference has zero energy")
    alpha = reduce_sum(est * ref, axis=-1, keepdims=True) / ref_energy
    target = alpha * ref
    floor = eps * reduce_sum(square(est), axis=-1) + _TINY
    num = reduce_sum(square(target), axis=-1) + floor
    den = reduce_sum(square(target - est), axis=-1) + floor
    return reduce_mean((log(den) - log(num)) * _DB)


def loss_msp(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared log-magnitude error over every time-frequency bin."""
    if pred.shape != np.shape(target):
        raise ShapeError("loss_msp", pred.shape, np.shape(target))
    return reduce_mean(square(pred - target))


def loss_main(mask: Tensor, noisy: Spectrogram, clean_wave: np.ndarray, oracle: np.ndarray,
              weights: LossWeights = LossWeights()) -> tuple[Tensor, dict[str, float]]:
    """Mask MAE against ``oracle`` plus negative SI-SDR of the masked resynthesis.

    ``noisy.values`` may carry a leading batch axis matching ``mask``.
    """
    l_mask = loss_mask(mask, oracle)
    enhanced = masked_istft(mask, noisy)
    l_sdr = loss_si_sdr(enhanced, clean_wave)
    total = l_mask * weights.mask + l_sdr * weights.si_sdr
    return total, {"mask": l_mask.item(), "si_sdr": l_sdr.item()}


def loss_ss(task: str, output: Tensor, sample, weights: LossWeights = LossWeights()) -> tuple[Tensor, dict[str, float]]:
    """Self-supervised loss for ``task`` on a sample built by :mod:`tttse.tasks`.

    For NyTT the noisy signal plays the clean role and the noisier one the noisy role.
    """
    if task == "msp":
        if getattr(sample, "kind", None) != "msp":
            raise LossError("msp loss needs an MspSample")
        l = loss_msp(output, sample.target)
        return l, {"msp": l.item()}
    if task == "nytt":
        if getattr(sample, "kind", None) != "nytt":
            raise LossError("nytt loss needs a NyttSample")
        return loss_main(output, sample.noisier_spec, sample.target_wave, sample.oracle, weights)
    raise LossError(f"unknown task kind {task!r}")
