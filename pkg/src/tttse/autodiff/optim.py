"""AdamW with decoupled weight decay, and a reduce-on-plateau LR schedule."""

from __future__ import annotations

import logging
import math
from typing import Iterable

import numpy as np

from .tensor import Tensor

logger = logging.getLogger(__name__)


class MissingGradError(RuntimeError):
    pass


class AdamW:
    """AdamW (Loshchilov & Hutter) over a fixed list of leaf tensors.

    The decay term ``lr * weight_decay * p`` is applied to the parameter
    directly, before the Adam update, and never enters the moments.
    Moments are keyed by position in ``params``.
    """

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = list(params)
        if not self.params:
            raise ValueError("AdamW needs at least one parameter")
        if lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {lr}")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise MissingGradError(f"parameter {p.name or p.node_id} has no gradient")
        self.t += 1
        lr, b1, b2 = self.lr, self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": [m.copy() for m in self.m],
            "v": [v.copy() for v in self.v],
            "lr": self.lr,
        }

    def load_state_dict(self, state: dict) -> None:
        if len(state["m"]) != len(self.params):
            raise ValueError("optimizer state does not match parameter list")
        self.t = int(state["t"])
        self.m = [np.array(m, dtype=np.float64) for m in state["m"]]
        self.v = [np.array(v, dtype=np.float64) for v in state["v"]]
        self.lr = float(state.get("lr", self.lr))


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` once a minimized metric stalls.

    An epoch counts as an improvement when the metric beats the best value by
    more than ``threshold * |best|``.  After more than ``patience`` bad epochs
    in a row the rate is reduced (never below ``min_lr``) and the counter resets.
    """

    def __init__(self, optimizer: AdamW | None = None, lr: float | None = None, patience: int = 5,
                 factor: float = 0.5, threshold: float = 1e-4, min_lr: float = 1e-6):
        if not 0 < factor < 1:
            raise ValueError("factor must be in (0, 1)")
        self.optimizer = optimizer
        self.lr = lr if lr is not None else (optimizer.lr if optimizer else 1e-3)
        self.patience = patience
        self.factor = factor
        self.threshold = threshold
        self.min_lr = min_lr
        self.best = math.inf
        self.num_bad = 0
        self.history: list[float] = []

    def step(self, metric: float) -> float:
        metric = float(metric)
        if not math.isfinite(metric):
            raise ValueError(f"scheduler metric must be finite, got {metric}")
        self.history.append(metric)
        if metric < self.best - self.threshold * abs(self.best) or self.best == math.inf:
            self.best = metric
            self.num_bad = 0
        else:
            self.num_bad += 1
        if self.num_bad > self.patience:
            new_lr = max(self.lr * self.factor, self.min_lr)
            if new_lr < self.lr:
                logger.info("plateau: lr %.3g -> %.3g", self.lr, new_lr)
            self.lr = new_lr
            self.num_bad = 0
        if self.optimizer is not None:
            self.optimizer.lr = self.lr
        return self.lr
