"""SGD with momentum, weight decay and a per-epoch cosine schedule."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..autodiff import Tape, backward, softmax_cross_entropy
from ..errors import DivergedLoss, InvalidSpec
from .zoo import Model

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 1e-3
    initial_lr: float = 0.05
    lr_schedule: str = "cosine"

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise InvalidSpec(f"momentum must be in [0, 1), got {self.momentum}")
        if self.initial_lr <= 0:
            raise InvalidSpec(f"initial_lr must be > 0, got {self.initial_lr}")
        if self.epochs < 0 or self.batch_size < 1:
            raise InvalidSpec("epochs must be >= 0 and batch_size >= 1")
        if self.lr_schedule != "cosine":
            raise InvalidSpec(f"unsupported lr_schedule {self.lr_schedule!r}")


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise ValueError("x and y lengths differ")

    def __len__(self):
        return len(self.y)

    def take(self, n: int) -> Dataset:
        return Dataset(self.x[:n], self.y[:n])


@dataclass
class History:
    loss: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)
    lr: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"loss": list(self.loss), "accuracy": list(self.accuracy), "lr": list(self.lr)}


def cosine_lr(t: float, T: int, lr0: float) -> float:
    """lr0 * (1 + cos(pi t / T)) / 2."""
    if T < 1 or not 0 <= t <= T:
        raise ValueError(f"need 0 <= t <= T and T >= 1, got t={t}, T={T}")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / T))


def sgd_epochs(model: Model, dataset: Dataset, config: TrainConfig, rng_seed: int, forward_kw=None, step_hook=None) -> History:
    """Shared SGD loop. ``forward_kw`` is passed to ``model.forward``.

    ``step_hook(model)`` runs after every parameter update (quantization
    uses it to refresh observers).
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    forward_kw = forward_kw or {}
    rng = np.random.default_rng(rng_seed)
    names = model.param_names()
    velocity = {n: np.zeros_like(model.params[n]) for n in names}
    history = History()
    n = len(dataset)
    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config.epochs, config.initial_lr)
        order = rng.permutation(n)
        losses, correct = [], 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            params = model.tensors()
            with Tape() as tape:
                logits = model.forward(dataset.x[idx], params=params, training=True, **forward_kw)
                loss = softmax_cross_entropy(logits, dataset.y[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise DivergedLoss(f"non-finite training loss at epoch {epoch}")
            grads = backward(loss, [params[k] for k in names])
            del tape
            for k, g in zip(names, grads):
                d = g.data + config.weight_decay * model.params[k]
                velocity[k] = config.momentum * velocity[k] + d
                model.params[k] = model.params[k] - lr * velocity[k]
            model.round_params()
            if step_hook is not None:
                step_hook(model)
            losses.append(value * len(idx))
            correct += int(np.sum(logits.data.argmax(axis=1) == dataset.y[idx]))
        epoch_loss = float(np.sum(losses) / n)
        if not math.isfinite(epoch_loss) or not all(np.all(np.isfinite(model.params[k])) for k in names):
            raise DivergedLoss(f"training diverged at epoch {epoch}")
        history.loss.append(epoch_loss)
        history.accuracy.append(correct / n)
        history.lr.append(lr)
        log.debug("epoch %d lr %.4g loss %.4f acc %.4f", epoch, lr, epoch_loss, correct / n)
    return history


def train(model: Model, dataset: Dataset, config: TrainConfig, rng_seed: int = 0) -> tuple[Model, History]:
    """Train a copy of ``model``; the input model is left untouched."""
    trained = model.copy()
    history = sgd_epochs(trained, dataset, config, rng_seed)
    return trained, history
