"""Parameter-update rules, gradient clipping, LR schedule and early stopping.

Updates are plain SGD or RMSProp applied to explicit lists of parameter
arrays (mutated in place). The global gradient norm is clipped to 1 before
every step, the learning rate drops by 10x from epoch 100 on, and training
stops after 20 epochs without improvement of the monitored validation RMSE
or at 200 epochs, whichever comes first.
"""

from dataclasses import dataclass, field

import numpy as np

RMSPROP_RHO = 0.9
RMSPROP_EPS = 1e-8
IMPROVEMENT_DELTA = 1e-6


@dataclass
class OptimizerConfig:
    kind: str = "sgd"  # sgd | rmsprop
    lr: float = 0.01
    clip_norm: float = 1.0
    rho: float = RMSPROP_RHO
    eps: float = RMSPROP_EPS

    def __post_init__(self):
        if self.kind not in ("sgd", "rmsprop"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        # lr 0 is allowed so a pathological flat run can exercise early stopping
        if self.lr < 0 or self.clip_norm <= 0:
            raise ValueError("lr must be >= 0 and clip_norm positive")


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g))) for g in grads)))


def clip_global_norm(grads, max_norm: float = 1.0):
    """Scale all gradients by max_norm/||g|| when the joint norm exceeds it."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return [g * scale for g in grads]


def _check_shapes(params, grads):
    if len(params) != len(grads):
        raise ValueError("parameter/gradient count mismatch")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch: param {p.shape} vs grad {g.shape}")


def sgd_step(params, grads, lr: float):
    """theta <- theta - lr * grad, in place."""
    _check_shapes(params, grads)
    for p, g in zip(params, grads):
        p -= lr * g
    return params


def rmsprop_step(params, grads, lr: float, state, rho: float = RMSPROP_RHO, eps: float = RMSPROP_EPS):
    """v <- rho v + (1-rho) g^2;  theta <- theta - lr g / (sqrt(v) + eps)."""
    _check_shapes(params, grads)
    _check_shapes(params, state)
    for p, g, v in zip(params, grads, state):
        v *= rho
        v += (1.0 - rho) * g * g
        p -= lr * g / (np.sqrt(v) + eps)
    return params, state


class Optimizer:
    """Owns per-tensor accumulator state for one parameter group."""

    def __init__(self, config: OptimizerConfig, params):
        self.config = config
        self.params = params
        self.state = [np.zeros_like(p) for p in params] if config.kind == "rmsprop" else None

    def step(self, grads, lr: float):
        grads = clip_global_norm(grads, self.config.clip_norm)
        if self.config.kind == "sgd":
            sgd_step(self.params, grads, lr)
        else:
            rmsprop_step(self.params, grads, lr, self.state, self.config.rho, self.config.eps)


def lr_at_epoch(base_lr: float, epoch: int) -> float:
    """Step decay: 10x smaller from epoch 100 on (0-based epoch index)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base_lr if epoch < 100 else 0.1 * base_lr


@dataclass
class StopState:
    patience: int = 20
    max_epochs: int = 200
    min_delta: float = IMPROVEMENT_DELTA
    best_val_rmse: float | None = None
    best_epoch: int = 0
    epochs_since_improvement: int = field(default=0)


def should_stop(state: StopState, val_rmse: float, epoch: int):
    """Update the stopping state after an epoch; epochs are numbered from 1.

    The first observation sets the baseline (it cannot improve on anything),
    later epochs reset the counter only on a strict decrease of the best by
    more than ``min_delta``. Stops once the counter reaches the patience or
    the epoch budget is exhausted.
    """
    if state.best_val_rmse is None:
        state.best_val_rmse = val_rmse
        state.best_epoch = epoch
        state.epochs_since_improvement = 1
    elif val_rmse < state.best_val_rmse - state.min_delta:
        state.best_val_rmse = val_rmse
        state.best_epoch = epoch
        state.epochs_since_improvement = 0
    else:
        state.epochs_since_improvement += 1
    stop = state.epochs_since_improvement >= state.patience or epoch >= state.max_epochs
    return stop, state
