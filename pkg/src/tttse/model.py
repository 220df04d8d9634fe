"""Y-shaped mask estimator: shared encoder, main (mask) branch, self-supervised branch.

Every layer acts on one time frame at a time.  The frame input is the
log-magnitude of the frame and its ``context`` neighbours on each side,
flattened, so a ``(T, K)`` spectrogram becomes ``T`` rows of width
``(2 * context + 1) * K``.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from .autodiff import AdamW, Tensor, layer_norm, matmul, relu, reshape, tanh

GROUPS = ("encoder", "main", "ss")
KINDS = ("weight", "bias")
TASKS = ("msp", "nytt")

# (encoder blocks, blocks per branch)
TOPOLOGY = {"msp": (4, 3), "nytt": (6, 1)}


class ModelError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelDims:
    n_bins: int = 257
    hidden: int = 256
    context: int = 2

    def __post_init__(self):
        if self.n_bins < 1 or self.hidden < 1 or self.context < 0:
            raise ModelError(f"invalid model dims {self}")

    @property
    def input_width(self) -> int:
        return (2 * self.context + 1) * self.n_bins


@dataclass
class Param:
    tensor: Tensor
    group: str
    kind: str


def context_frames(logmag: np.ndarray, context: int) -> np.ndarray:
    """Stack each frame with ``context`` neighbours per side (edge frames repeated)."""
    logmag = np.asarray(logmag, dtype=np.float64)
    if context == 0:
        return logmag
    t = logmag.shape[-2]
    padded = np.concatenate(
        [np.repeat(logmag[..., :1, :], context, axis=-2), logmag,
         np.repeat(logmag[..., -1:, :], context, axis=-2)], axis=-2)
    return np.concatenate([padded[..., i:i + t, :] for i in range(2 * context + 1)], axis=-1)


class Dense:
    def __init__(self, w: Tensor, b: Tensor):
        self.w, self.b = w, b

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.w) + self.b


class Block:
    """``x + act(layer_norm(x W + b))``; the residual needs equal in/out width."""

    def __init__(self, dense: Dense, gain: Tensor, beta: Tensor, activation: str = "relu", residual: bool = True):
        if residual and dense.w.shape[0] != dense.w.shape[1]:
            raise ModelError("residual block needs a square dense layer")
        self.dense = dense
        self.gain, self.beta = gain, beta
        self.activation = activation
        self.residual = residual

    def __call__(self, x: Tensor) -> Tensor:
        h = _ACT[self.activation](layer_norm(self.dense(x), self.gain, self.beta))
        return x + h if self.residual else h


_ACT = {"relu": relu, "tanh": tanh, "linear": lambda x: x}


class YModel:
    def __init__(self, task: str, dims: ModelDims = ModelDims(), seed: int = 0):
        if task not in TASKS:
            raise ModelError(f"unknown task kind {task!r}; expected one of {TASKS}")
        self.task = task
        self.dims = dims
        self.seed = seed
        self.registry: dict[str, Param] = {}
        rng = np.random.default_rng(seed)
        n_enc, n_branch = TOPOLOGY[task]
        h, k = dims.hidden, dims.n_bins

        self.stem = self._block("encoder.stem", dims.input_width, h, "relu", rng, residual=False)
        self.encoder = [self._block(f"encoder.block{i}", h, h, "relu", rng) for i in range(n_enc)]
        self.main_blocks = [self._block(f"main.block{i}", h, h, "relu", rng) for i in range(n_branch)]
        self.main_head = [self._dense("main.head0", h, h, rng), self._dense("main.head1", h, k, rng)]
        self.main_acts = ("tanh", "tanh")
        self.ss_blocks = [self._block(f"ss.block{i}", h, h, "relu", rng) for i in range(n_branch)]
        self.ss_head = [self._dense("ss.head0", h, h, rng), self._dense("ss.head1", h, k, rng)]
        # the MSP head regresses unbounded log-magnitudes, so its last layer stays linear
        self.ss_acts = ("relu", "linear") if task == "msp" else ("tanh", "tanh")

    # -- construction ---------------------------------------------------
    def _leaf(self, name: str, data: np.ndarray, group: str, kind: str) -> Tensor:
        t = Tensor(data, requires_grad=True, name=name)
        self.registry[name] = Param(t, group, kind)
        return t

    def _dense(self, name: str, n_in: int, n_out: int, rng: np.random.Generator) -> Dense:
        group = name.split(".", 1)[0]
        limit = np.sqrt(6.0 / (n_in + n_out))
        w = self._leaf(f"{name}.w", rng.uniform(-limit, limit, (n_in, n_out)), group, "weight")
        b = self._leaf(f"{name}.b", np.zeros(n_out), group, "bias")
        return Dense(w, b)

    def _block(self, name, n_in, n_out, activation, rng, residual=True) -> Block:
        group = name.split(".", 1)[0]
        dense = self._dense(name, n_in, n_out, rng)
        gain = self._leaf(f"{name}.ln_g", np.ones(n_out), group, "weight")
        beta = self._leaf(f"{name}.ln_b", np.zeros(n_out), group, "bias")
        return Block(dense, gain, beta, activation, residual)

    # -- forward --------------------------------------------------------
    def _rows(self, logmag) -> tuple[Tensor, tuple[int, ...]]:
        x = np.asarray(logmag.data if isinstance(logmag, Tensor) else logmag, dtype=np.float64)
        if x.ndim not in (2, 3) or x.shape[-1] != self.dims.n_bins:
            raise ModelError(f"expected (T, {self.dims.n_bins}) or (B, T, {self.dims.n_bins}) input, got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise NumericError("non-finite model input")
        feats = context_frames(x, self.dims.context)
        return Tensor(feats.reshape(-1, feats.shape[-1])), x.shape

    def encode(self, logmag) -> tuple[Tensor, tuple[int, ...]]:
        rows, shape = self._rows(logmag)
        z = self.stem(rows)
        for blk in self.encoder:
            z = blk(z)
        return z, shape

    @staticmethod
    def _branch(z: Tensor, blocks, head, acts) -> Tensor:
        for blk in blocks:
            z = blk(z)
        for dense, act in zip(head, acts):
            z = _ACT[act](dense(z))
        return z

    def _finish(self, y: Tensor, shape, as_mask: bool) -> Tensor:
        if as_mask:
            y = (y + 1.0) * 0.5
        y = reshape(y, shape)
        if not y.is_finite():
            raise NumericError("non-finite activations in model output")
        return y

    def forward_main(self, logmag) -> Tensor:
        """Mask in [0, 1] with the shape of ``logmag``."""
        z, shape = self.encode(logmag)
        return self._finish(self._branch(z, self.main_blocks, self.main_head, self.main_acts), shape, True)

    def forward_ss(self, inputs) -> Tensor:
        """Self-supervised head: log-magnitude estimate (msp) or a [0, 1] mask (nytt)."""
        z, shape = self.encode(inputs)
        y = self._branch(z, self.ss_blocks, self.ss_head, self.ss_acts)
        return self._finish(y, shape, self.task == "nytt")

    # -- parameter bookkeeping -------------------------------------------
    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(name, p.tensor) for name, p in self.registry.items()]

    def parameters(self) -> list[Tensor]:
        return [p.tensor for p in self.registry.values()]

    def select(self, groups: Iterable[str], kinds: Iterable[str] = KINDS) -> ParamView:
        groups, kinds = set(groups), set(kinds)
        if not groups <= set(GROUPS) or not kinds <= set(KINDS):
            raise ModelError(f"unknown groups/kinds {groups - set(GROUPS)} {kinds - set(KINDS)}")
        names = [n for n, p in self.registry.items() if p.group in groups and p.kind in kinds]
        if not names:
            raise ModelError(f"no parameters match groups={sorted(groups)} kinds={sorted(kinds)}")
        return ParamView(self, names)

    def zero_grad(self) -> None:
        for p in self.registry.values():
            p.tensor.grad = None

    def topology(self) -> dict:
        n_enc, n_branch = TOPOLOGY[self.task]
        return {"task": self.task, **asdict(self.dims), "encoder_blocks": n_enc, "branch_blocks": n_branch}

    def snapshot(self, optimizer: AdamW | None = None) -> ParamSnapshot:
        opt = copy.deepcopy(optimizer.state_dict()) if optimizer is not None else None
        return ParamSnapshot(self.topology(), {n: p.tensor.data.copy() for n, p in self.registry.items()}, opt)

    def restore(self, snap: ParamSnapshot, optimizer: AdamW | None = None) -> None:
        if snap.topology != self.topology() or snap.params.keys() != self.registry.keys():
            raise ModelError(f"snapshot topology {snap.topology} does not match model {self.topology()}")
        for name, p in self.registry.items():
            # copy into the existing buffer so optimizers holding the tensor stay valid
            np.copyto(p.tensor.data, snap.params[name])
        if optimizer is not None and snap.optimizer is not None:
            optimizer.load_state_dict(copy.deepcopy(snap.optimizer))

    def clone(self) -> YModel:
        other = YModel.__new__(YModel)
        other.__dict__.update(copy.deepcopy(self.__dict__))
        return other


@dataclass
class ParamSnapshot:
    topology: dict
    params: dict[str, np.ndarray]
    optimizer: dict | None = None


class ParamView:
    """Named subset of a model's leaves; the only leaves an optimizer built from it touches."""

    def __init__(self, model: YModel, names: list[str]):
        self.model = model
        self.names = names

    @property
    def tensors(self) -> list[Tensor]:
        return [self.model.registry[n].tensor for n in self.names]

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self):
        return iter(self.tensors)

    def __contains__(self, name: str) -> bool:
        return name in self.names


def build_model(task: str, dims: ModelDims = ModelDims(), seed: int = 0) -> YModel:
    return YModel(task, dims, seed)


def select_params(model: YModel, groups: Iterable[str], kinds: Iterable[str] = KINDS) -> ParamView:
    return model.select(groups, kinds)
