"""
Approximator - one-hidden-layer sigmoid network trained by backpropagation

Inputs are shifted and scaled per feature to roughly [-1, 1] before the
hidden layer; hidden units use the logistic sigmoid, the output layer is
affine. Parameters are float64 throughout. The binary format is:

    magic b"FFNET1" | version u16 | n_in, n_hidden, n_out u32
    | x_offset, x_scale | W1, b1, W2, b2

with arrays row-major, little-endian float64.
"""
import logging
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import expit

from bodyimage.errors import DimensionError, FormatError, TrainingDivergedError, VersionError

logger = logging.getLogger(__name__)

MAGIC = b"FFNET1"
FORMAT_VERSION = 2
_HEADER = struct.Struct("<6sHIII")
PARAMETER_NAMES = ("W1", "b1", "W2", "b2")
SCALING_NAMES = ("x_offset", "x_scale")


class TrainConfig(BaseModel):
    """Optimizer and stopping settings shared by initial and online training."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    learning_rate: float = Field(default=1e-2, gt=0)
    optimizer: Literal["sgd", "momentum", "adam"] = "sgd"
    momentum: float = Field(default=0.9, ge=0, lt=1)
    epochs: int = Field(default=1, ge=1)
    loss: Literal["mse"] = "mse"
    seed: int = 0
    # used by fit() only
    batch_size: int = Field(default=64, ge=1)
    max_epochs: int = Field(default=200, ge=1)
    lr_decay: float = Field(default=1.0, gt=0, le=1)
    plateau_tolerance: float = Field(default=1e-4, ge=0)
    patience: int = Field(default=20, ge=1)


@dataclass
class Minibatch:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=float))
        if len(self.inputs) != len(self.targets):
            raise DimensionError("Minibatch inputs and targets differ in length")

    @classmethod
    def from_pairs(cls, pairs: Sequence[Tuple[np.ndarray, np.ndarray]]) -> "Minibatch":
        if len(pairs) == 0:
            raise DimensionError("Minibatch must not be empty")
        return cls(np.array([p[0] for p in pairs], dtype=float), np.array([p[1] for p in pairs], dtype=float))

    def __len__(self) -> int:
        return len(self.inputs)


@dataclass
class FitReport:
    final_loss: float
    epochs: int
    stopped: str  # "plateau" or "epoch cap"
    history: List[float] = field(default_factory=list)


class FeedforwardNet:
    """input -> sigmoid hidden layer -> affine output."""

    def __init__(self, n_in: int, n_hidden: int, n_out: int, seed: Optional[int] = 0):
        if min(n_in, n_hidden, n_out) < 1:
            raise DimensionError("Layer sizes must be positive")
        self.sizes = (int(n_in), int(n_hidden), int(n_out))
        rng = np.random.default_rng(seed)
        limit1 = np.sqrt(6.0 / (n_in + n_hidden))
        limit2 = np.sqrt(6.0 / (n_hidden + n_out))
        self.W1 = rng.uniform(-limit1, limit1, size=(n_hidden, n_in))
        self.b1 = np.zeros(n_hidden)
        self.W2 = rng.uniform(-limit2, limit2, size=(n_out, n_hidden))
        self.b2 = np.zeros(n_out)
        self.x_offset = np.zeros(n_in)
        self.x_scale = np.ones(n_in)

    @classmethod
    def zeros(cls, n_in: int, n_hidden: int, n_out: int) -> "FeedforwardNet":
        net = cls(n_in, n_hidden, n_out)
        for name in PARAMETER_NAMES:
            getattr(net, name)[...] = 0.0
        return net

    def fit_scaling(self, inputs: np.ndarray) -> None:
        """Map the per-feature range of `inputs` onto [-1, 1]; constant features keep unit scale."""
        inputs = self._check_inputs(np.atleast_2d(inputs))
        lo, hi = inputs.min(axis=0), inputs.max(axis=0)
        half = (hi - lo) / 2.0
        self.x_offset = (hi + lo) / 2.0
        self.x_scale = np.where(half > 1e-12, half, 1.0)

    def scaling(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in SCALING_NAMES}

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[2]

    def parameters(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAMETER_NAMES}

    def set_parameters(self, params: Dict[str, np.ndarray]) -> None:
        for name in PARAMETER_NAMES:
            getattr(self, name)[...] = params[name]

    def copy(self) -> "FeedforwardNet":
        clone = FeedforwardNet.zeros(*self.sizes)
        clone.set_parameters(self.parameters())
        clone.x_offset = self.x_offset.copy()
        clone.x_scale = self.x_scale.copy()
        return clone

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.parameters().values())

    def _check_inputs(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.n_in,) or x.ndim > 2:
            raise DimensionError(f"Expected input of size {self.n_in}, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise DimensionError("Network input must be finite")
        return x

    def forward(self, x) -> np.ndarray:
        """Evaluate one input vector or a batch of row vectors."""
        x = self._check_inputs(x)
        hidden = expit(self._scaled(x) @ self.W1.T + self.b1)
        return hidden @ self.W2.T + self.b2

    def _scaled(self, x: np.ndarray) -> np.ndarray:
        return (x - self.x_offset) / self.x_scale

    def gradients(self, inputs: np.ndarray, targets: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]:
        """Mean-squared-error loss over all batch elements and its parameter gradients."""
        inputs = self._check_inputs(np.atleast_2d(inputs))
        targets = np.atleast_2d(np.asarray(targets, dtype=float))
        if targets.shape != (len(inputs), self.n_out):
            raise DimensionError(f"Expected targets of shape {(len(inputs), self.n_out)}, got {targets.shape}")
        scaled = self._scaled(inputs)
        hidden = expit(scaled @ self.W1.T + self.b1)
        residual = hidden @ self.W2.T + self.b2 - targets
        loss = float(np.mean(residual ** 2))

        d_out = 2.0 * residual / residual.size
        d_hidden = (d_out @ self.W2) * hidden * (1.0 - hidden)
        grads = {
            "W1": d_hidden.T @ scaled,
            "b1": d_hidden.sum(axis=0),
            "W2": d_out.T @ hidden,
            "b2": d_out.sum(axis=0),
        }
        return loss, grads

    def loss(self, inputs: np.ndarray, targets: np.ndarray) -> float:
        residual = self.forward(np.atleast_2d(inputs)) - np.atleast_2d(targets)
        return float(np.mean(residual ** 2))

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(MAGIC, FORMAT_VERSION, *self.sizes)
        body = b"".join(np.ascontiguousarray(getattr(self, name), dtype="<f8").tobytes()
                        for name in SCALING_NAMES + PARAMETER_NAMES)
        return header + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "FeedforwardNet":
        net, consumed = cls.read_from(data)
        if consumed != len(data):
            raise FormatError(f"Trailing bytes after network stream ({len(data) - consumed})")
        return net

    @classmethod
    def read_from(cls, data: bytes, offset: int = 0) -> Tuple["FeedforwardNet", int]:
        """Parse one network starting at `offset`; returns the net and the end offset."""
        if len(data) - offset < _HEADER.size:
            raise FormatError("Network stream truncated in header")
        magic, version, n_in, n_hidden, n_out = _HEADER.unpack_from(data, offset)
        if magic != MAGIC:
            raise FormatError("Not a network stream (bad magic)")
        if version != FORMAT_VERSION:
            raise VersionError(f"Network stream version {version}, expected {FORMAT_VERSION}")
        if min(n_in, n_hidden, n_out) < 1:
            raise FormatError("Network stream has empty layers")
        shapes = {"x_offset": (n_in,), "x_scale": (n_in,),
                  "W1": (n_hidden, n_in), "b1": (n_hidden,), "W2": (n_out, n_hidden), "b2": (n_out,)}
        count = sum(int(np.prod(s)) for s in shapes.values())
        start = offset + _HEADER.size
        end = start + 8 * count
        if len(data) < end:
            raise FormatError("Network stream truncated in parameters")
        flat = np.frombuffer(data[start:end], dtype="<f8").astype(float)
        net = cls.zeros(n_in, n_hidden, n_out)
        cursor = 0
        for name in SCALING_NAMES + PARAMETER_NAMES:
            size = int(np.prod(shapes[name]))
            getattr(net, name)[...] = flat[cursor:cursor + size].reshape(shapes[name])
            cursor += size
        if not np.all(np.isfinite(net.x_scale)) or np.any(net.x_scale <= 0):
            raise FormatError("Network stream has a non-positive input scale")
        return net, end


class Optimizer:
    """Stateful parameter update rule selected by TrainConfig.optimizer."""

    def __init__(self, cfg: TrainConfig, net: FeedforwardNet):
        self.cfg = cfg
        self.learning_rate = cfg.learning_rate
        self.steps = 0
        self.velocity = {k: np.zeros_like(v) for k, v in net.parameters().items()}
        self.second = {k: np.zeros_like(v) for k, v in net.parameters().items()}

    def step(self, net: FeedforwardNet, grads: Dict[str, np.ndarray]) -> None:
        self.steps += 1
        lr = self.learning_rate
        for name, param in net.parameters().items():
            grad = grads[name]
            if self.cfg.optimizer == "sgd":
                param -= lr * grad
            elif self.cfg.optimizer == "momentum":
                self.velocity[name] = self.cfg.momentum * self.velocity[name] - lr * grad
                param += self.velocity[name]
            else:
                beta1, beta2, eps = 0.9, 0.999, 1e-8
                self.velocity[name] = beta1 * self.velocity[name] + (1 - beta1) * grad
                self.second[name] = beta2 * self.second[name] + (1 - beta2) * grad ** 2
                m_hat = self.velocity[name] / (1 - beta1 ** self.steps)
                v_hat = self.second[name] / (1 - beta2 ** self.steps)
                param -= lr * m_hat / (np.sqrt(v_hat) + eps)


def forward(net: FeedforwardNet, x) -> np.ndarray:
    return net.forward(x)


def _as_minibatch(batch: Union[Minibatch, Sequence[Tuple[np.ndarray, np.ndarray]]]) -> Minibatch:
    return batch if isinstance(batch, Minibatch) else Minibatch.from_pairs(batch)


def train_minibatch(net: FeedforwardNet, batch, cfg: TrainConfig,
                    optimizer: Optional[Optimizer] = None) -> float:
    """
    Run cfg.epochs full-batch gradient steps; returns the loss after the last step.

    On a non-finite loss the parameters are restored to their values before
    the call and TrainingDivergedError is raised.
    """
    batch = _as_minibatch(batch)
    if len(batch) == 0:
        raise DimensionError("Minibatch must not be empty")
    snapshot = net.copy().parameters()
    optimizer = optimizer or Optimizer(cfg, net)
    for _ in range(cfg.epochs):
        loss, grads = net.gradients(batch.inputs, batch.targets)
        if not np.isfinite(loss):
            break
        optimizer.step(net, grads)
    loss = net.loss(batch.inputs, batch.targets) if net.is_finite() else float("nan")
    if not np.isfinite(loss):
        net.set_parameters(snapshot)
        raise TrainingDivergedError("Training loss became non-finite; parameters rolled back")
    return loss


def fit(net: FeedforwardNet, inputs: np.ndarray, targets: np.ndarray, cfg: TrainConfig) -> FitReport:
    """Shuffled minibatch training until the loss plateaus or max_epochs is reached."""
    batch = Minibatch(inputs, targets)
    if len(batch) == 0:
        raise DimensionError("Training set must not be empty")
    rng = np.random.default_rng(cfg.seed)
    optimizer = Optimizer(cfg, net)
    step_cfg = cfg.model_copy(update={"epochs": 1})
    history: List[float] = []
    best = np.inf
    stale = 0
    stopped = "epoch cap"
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(batch))
        for start in range(0, len(batch), cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            try:
                train_minibatch(net, Minibatch(batch.inputs[rows], batch.targets[rows]), step_cfg, optimizer)
            except TrainingDivergedError as exc:
                report = FitReport(float("nan"), epoch + 1, "diverged", history)
                raise TrainingDivergedError(str(exc), report) from exc
        loss = net.loss(batch.inputs, batch.targets)
        history.append(loss)
        optimizer.learning_rate *= cfg.lr_decay
        if loss < best * (1.0 - cfg.plateau_tolerance):
            best = loss
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                stopped = "plateau"
                break
        if epoch % 50 == 0:
            logger.debug("epoch %d loss %.6g", epoch, loss)
    return FitReport(history[-1], len(history), stopped, history)


def save(net: FeedforwardNet) -> bytes:
    return net.to_bytes()


def load(data: bytes) -> FeedforwardNet:
    return FeedforwardNet.from_bytes(data)
