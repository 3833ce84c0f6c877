"""Losses (RMSLE, MSE) with analytic gradients, and the Adam optimizer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError


def _check_pair(y_hat, y):
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise ShapeError(f"prediction shape {y_hat.shape} != target shape {y.shape}")
    return y_hat, y


def rmsle(y_hat, y):
    """Root mean squared logarithmic error: sqrt(mean(ln^2((y_hat+1)/(y+1)))).

    Both arguments are distances in meters and must be nonnegative.  The
    squared log-ratio damps the contribution of large absolute errors at
    large distances.
    """
    y_hat, y = _check_pair(y_hat, y)
    if y_hat.min() < 0.0 or y.min() < 0.0:
        raise DomainError("rmsle requires nonnegative entries")
    r = np.log1p(y_hat) - np.log1p(y)
    return float(np.sqrt(np.mean(r * r)))


def rmsle_grad(y_hat, y):
    """Gradient of rmsle w.r.t. y_hat; defined as 0 at the loss minimum."""
    y_hat, y = _check_pair(y_hat, y)
    loss = rmsle(y_hat, y)
    if loss == 0.0:
        return np.zeros_like(y_hat)
    n = y_hat.size
    return (np.log1p(y_hat) - np.log1p(y)) / (n * loss * (y_hat + 1.0))


def rmsle_batch(y_hat, y):
    """Mean of per-row rmsle over a (B, N) batch."""
    y_hat, y = _check_pair(y_hat, y)
    if y_hat.min() < 0.0 or y.min() < 0.0:
        raise DomainError("rmsle requires nonnegative entries")
    r = np.log1p(y_hat) - np.log1p(y)
    per_row = np.sqrt(np.mean(r * r, axis=-1))
    return float(np.mean(per_row))


def rmsle_batch_grad(y_hat, y):
    """(loss, gradient) for the mean of per-row rmsle losses."""
    y_hat, y = _check_pair(y_hat, y)
    if y_hat.min() < 0.0 or y.min() < 0.0:
        raise DomainError("rmsle requires nonnegative entries")
    r = np.log1p(y_hat) - np.log1p(y)
    per_row = np.sqrt(np.mean(r * r, axis=-1))
    b = y_hat.shape[0]
    n = y_hat.shape[-1]
    safe = np.where(per_row > 0.0, per_row, 1.0)
    grad = r / (n * safe[:, None] * (y_hat + 1.0) * b)
    grad[per_row == 0.0] = 0.0
    return float(np.mean(per_row)), grad


def mse(y_hat, y):
    """Mean squared error, for comparison against rmsle."""
    y_hat, y = _check_pair(y_hat, y)
    d = y_hat - y
    return float(np.mean(d * d))


def mse_grad(y_hat, y):
    y_hat, y = _check_pair(y_hat, y)
    return 2.0 * (y_hat - y) / y_hat.size


def mse_batch_grad(y_hat, y):
    """(loss, gradient) for the mean of per-row mse losses."""
    y_hat, y = _check_pair(y_hat, y)
    d = y_hat - y
    per_row = np.mean(d * d, axis=-1)
    b, n = y_hat.shape[0], y_hat.shape[-1]
    return float(np.mean(per_row)), 2.0 * d / (n * b)


@dataclass
class AdamState:
    """First/second-moment estimates per parameter plus the step counter."""

    m: dict
    v: dict
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise DomainError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.t < 0:
            raise DomainError("step counter must be nonnegative")


def adam_init(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Fresh AdamState with zeroed moments shape-matched to `params`."""
    return AdamState(
        m={name: np.zeros_like(p) for name, p in params.items()},
        v={name: np.zeros_like(p) for name, p in params.items()},
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update, applied to `params` in place."""
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, expected {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state
