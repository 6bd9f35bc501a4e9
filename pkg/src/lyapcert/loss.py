"""Tightened Lyapunov hinge loss: pointwise terms and the batch mean.

The pointwise loss penalizes violations of the margin-tightened Lyapunov
conditions at a sample (x, y = f(x)):

    max(0, eps1 - V(x)) + max(0, eps2 + grad V(x)^T y) + V(0)^2

It is zero exactly when V(x) >= eps1, the Lie derivative is <= -eps2 and
V(0) = 0. The margins are tunable during training; at verification time the
grid module re-derives them from Lipschitz constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import net


class EmptyBatch(Exception):
    """The empirical loss is undefined on an empty sample list."""


@dataclass(frozen=True)
class TightenedLossConfig:
    eps1: float
    eps2: float

    def __post_init__(self):
        if self.eps1 <= 0 or self.eps2 <= 0:
            raise ValueError("margins eps1 and eps2 must be strictly positive")


def pointwise_loss(v_x: float, lie: float, v_0: float, cfg: TightenedLossConfig) -> float:
    """Single-sample tightened loss; `lie` is the precomputed grad V(x)^T y."""
    return max(0.0, cfg.eps1 - v_x) + max(0.0, cfg.eps2 + lie) + v_0 * v_0


def empirical_loss(theta, arch, batch, cfg: TightenedLossConfig) -> float:
    """Mean pointwise loss over a batch (X, Y) of samples, fixed summation order."""
    X, Y = batch
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape[0] == 0:
        raise EmptyBatch("empirical loss needs at least one sample")
    V = net.forward_batch(theta, arch, X)
    lie = np.sum(net.input_gradient_batch(theta, arch, X) * Y, axis=1)
    v0 = net.forward(theta, arch, np.zeros(arch.input_dim))
    pos = np.maximum(0.0, cfg.eps1 - V)
    dec = np.maximum(0.0, cfg.eps2 + lie)
    return float(np.mean(pos + dec) + v0 * v0)
