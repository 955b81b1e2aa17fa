"""Desk-scale training: SGD with momentum and weight decay over a graph's
parameter store, with per-phase ConvBN mode switching.

Weight decay applies to the live trainable parameters of the current mode:
raw (w, b, gamma, beta) in Train/Eval/Tune, the fused (w', b') in Deploy.
Equivalence experiments disable it so only the data loss is compared.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .block import Mode
from .errors import InputError
from .fixtures import make_blob_dataset, toy_net_graph
from .graph import Graph, execute_backward, execute_forward, switch_mode
from .ops import softmax_xent
from .tensor import dtype_of


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 16
    steps: int = 200
    seed: int = 0
    mode: str = "eval"
    dtype: str = "f32"
    # Optional [(mode, steps), ...] phase schedule; overrides mode/steps.
    phases: list = field(default_factory=list)
    classes: int = 4
    image_size: int = 16
    channels: int = 3
    dataset_size: int = 512

    def __post_init__(self):
        if not self.lr >= 0:
            raise InputError(f"learning rate must be >= 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise InputError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.total_steps() < 1:
            raise InputError("need at least one training step")

    def schedule(self):
        return list(self.phases) if self.phases else [(self.mode, self.steps)]

    def total_steps(self):
        return sum(s for _, s in self.schedule())


class SGD:
    """Momentum SGD; decay is folded into the gradient before the velocity
    update, so lr = 0 leaves parameters bit-identical."""

    def __init__(self, lr, momentum=0.0, weight_decay=0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {}

    def step(self, params, grads, names):
        for name in names:
            g = grads.get(name)
            if g is None:
                continue
            if self.weight_decay:
                g = g + self.weight_decay * params[name]
            v = self.velocity.get(name)
            v = g if v is None else self.momentum * v + g
            self.velocity[name] = v
            params[name] = params[name] - self.lr * v


def _batches(images, labels, batch_size, steps):
    n = images.shape[0]
    for i in range(steps):
        idx = (np.arange(batch_size) + i * batch_size) % n
        yield images[idx], labels[idx]


def default_dataset(config: TrainConfig):
    return make_blob_dataset(
        config.seed + 77, config.dataset_size, config.channels,
        config.image_size, config.classes, config.dtype,
    )


def default_graph(config: TrainConfig):
    return toy_net_graph(
        seed=config.seed, dtype=config.dtype, in_channels=config.channels,
        classes=config.classes,
    )


def run_training(config: TrainConfig, graph: Graph = None, dataset=None):
    """Train; returns {losses, accuracies, mode_per_step, final graph}.

    Raises InputError on a NaN loss, naming the step and mode.  Train-mode
    phases fold the returned running-statistic updates back into the store
    after each step; other modes leave statistics untouched.
    """
    g = default_graph(config) if graph is None else graph
    images, labels = default_dataset(config) if dataset is None else dataset
    if images.dtype != dtype_of(config.dtype):
        images = images.astype(dtype_of(config.dtype))
    opt = SGD(config.lr, config.momentum, config.weight_decay)
    losses = []
    accuracies = []
    modes = []
    step_index = 0
    batch_iter = _batches(images, labels, config.batch_size, config.total_steps())
    for mode_name, phase_steps in config.schedule():
        mode = Mode.parse(mode_name)
        switch_mode(g, mode)
        trainable = g.trainable_names()
        for _ in range(phase_steps):
            x, y = next(batch_iter)
            logits, saved, stat_updates = execute_forward(g, x)
            loss, dlogits = softmax_xent(logits, y)
            if not np.isfinite(loss):
                raise InputError(f"non-finite loss at step {step_index} in {mode.value} mode")
            _, grads = execute_backward(g, saved, dlogits)
            opt.step(g.params, grads, trainable)
            if mode is Mode.TRAIN:
                for name, value in stat_updates.items():
                    g.params[name] = value
            losses.append(loss)
            accuracies.append(float(np.mean(np.argmax(logits, axis=1) == y)))
            modes.append(mode.value)
            step_index += 1
    return {
        "losses": losses,
        "accuracies": accuracies,
        "modes": modes,
        "graph": g,
    }
