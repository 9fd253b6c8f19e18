"""SGD with classic (heavy-ball) momentum."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, TrainingError


@dataclass
class SgdState:
    learning_rate: float
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


def sgd_step(params, grads, state):
    """One in-place update ``v <- m*v + g; p <- p - lr*v``.

    ``params`` maps names to tensors (anything with a ``.data`` array);
    ``grads`` maps the same names to arrays. Returns ``params``.
    """
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter '{name}'")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        elif v.shape != p.data.shape:
            raise DimensionError(f"velocity for {name} has shape {v.shape}, parameter {p.data.shape}")
        v = state.momentum * v + g.astype(p.data.dtype, copy=False)
        state.velocity[name] = v
        p.data = (p.data - state.learning_rate * v).astype(p.data.dtype, copy=False)
    return params
