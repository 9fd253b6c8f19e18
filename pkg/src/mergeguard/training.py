"""Mini-batch training with cross-entropy plus an optional linearity penalty."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import TrainingError
from .layers import ParametricActivation
from .optim import SgdState, sgd_step
from .rng import make_rng

log = logging.getLogger(__name__)


def linearity_penalty(activations):
    """Sum over activations of ``(1 - alpha)^2`` as a differentiable scalar."""
    total = None
    for a in activations:
        alpha = a.alpha_tensor()
        term = ad.square(ad.sub(1.0, alpha))
        total = term if total is None else ad.add(total, term)
    return total


def composite_loss(model, x, y, lam=0.0, activations=()):
    """Return ``(total, ce, reg)`` tensors with total = ce + lam * reg."""
    logits = model.forward(x)
    ce = ad.cross_entropy(logits, y)
    if lam == 0 or not activations:
        return ce, ce, None
    reg = linearity_penalty(activations)
    return ad.add(ce, ad.mul(reg, lam)), ce, reg


def clip_gradients(grads, max_norm):
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for name in grads:
            grads[name] = (grads[name] * scale).astype(grads[name].dtype)
    return norm


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    ce: list = field(default_factory=list)
    reg: list = field(default_factory=list)
    alphas: list = field(default_factory=list)  # per epoch, one entry per regularized activation

    def to_dict(self):
        return {"loss": self.loss, "ce": self.ce, "reg": self.reg, "alphas": self.alphas}


def train(
    model,
    dataset,
    epochs,
    learning_rate,
    momentum=0.9,
    batch_size=128,
    seed=0,
    lam=0.0,
    regularized=(),
    trainable=None,
    stream="train",
    callback=None,
    schedule="constant",
    clip_norm=None,
):
    """Fit ``model`` in place with momentum SGD; returns a :class:`TrainHistory`.

    ``regularized`` lists the activations whose alpha enters the penalty.
    ``trainable`` optionally restricts updates to a subset of parameter names.
    ``callback(epoch, model, history)`` runs after every epoch.
    ``schedule`` is ``"constant"`` or ``"cosine"`` (per-step annealing to zero).
    ``clip_norm`` rescales the step's gradients when their global L2 norm exceeds it.
    """
    if schedule not in ("constant", "cosine"):
        raise ValueError(f"unknown learning-rate schedule {schedule!r}")
    regularized = [a for a in regularized if isinstance(a, ParametricActivation) and a.is_trainable]
    state = SgdState(learning_rate, momentum)
    rng = make_rng(seed, stream)
    history = TrainHistory()
    n = len(dataset)
    total_steps = epochs * math.ceil(n / batch_size)
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            params = model.parameters()
            if trainable is not None:
                params = {k: v for k, v in params.items() if k in trainable}
            with ad.GradTape() as tape:
                total, ce, reg = composite_loss(
                    model, dataset.images[idx], dataset.labels[idx], lam, regularized
                )
            loss = float(total.item())
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            grads = tape.backward(total, params)
            if clip_norm is not None:
                clip_gradients(grads, clip_norm)
            if schedule == "cosine":
                state.learning_rate = learning_rate * 0.5 * (1 + math.cos(math.pi * step / total_steps))
            sgd_step(params, grads, state)
            for a in regularized:
                a.project()
            step += 1
            history.loss.append(loss)
            history.ce.append(float(ce.item()))
            history.reg.append(0.0 if reg is None else float(reg.item()))
        history.alphas.append([float(a.alpha) for a in regularized])
        if callback is not None:
            callback(epoch, model, history)
        log.debug("epoch %d loss %.4f", epoch, history.loss[-1] if history.loss else float("nan"))
    return history
