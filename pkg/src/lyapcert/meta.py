"""MAML training of the Lyapunov network and k-step test-time adaptation.

One meta-step: sample P tasks with replacement, draw one mini-batch per task,
take a single inner gradient step on each train half, evaluate the adapted
parameters on the test half, and descend the mean meta-gradient. The
second-order mode differentiates through the inner step via a Hessian-vector
product; the first-order mode drops the inner Jacobian (cheaper, standard
practice). Plain gradient descent throughout, no optimizer state.

The generic entry points (`adapt_with`, `meta_gradient_with`, ...) take a
TaskObjective so the same machinery runs against closed-form surrogate
objectives in tests; the Lyapunov-specific wrappers bind the network loss.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import net
from .dynamics import TaskDataset
from .loss import TightenedLossConfig, empirical_loss

Batch = tuple[np.ndarray, np.ndarray]


class NonFiniteLoss(Exception):
    """Training produced a non-finite loss; carries the meta-step index."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at meta-step {step}")
        self.step = step


@dataclass(frozen=True)
class MetaConfig:
    inner_lr: float = 0.01        # adaptation step size
    meta_lr: float = 0.005        # meta step size
    tasks_per_step: int = 4       # meta-batch size P
    meta_steps: int = 2000        # total meta-steps
    k_test: int = 10              # test-time adaptation steps
    mode: str = "second_order"    # or "first_order"
    seed: int = 0

    def __post_init__(self):
        if self.inner_lr <= 0 or self.meta_lr <= 0:
            raise ValueError("step sizes must be positive")
        if self.tasks_per_step < 1 or self.meta_steps < 1 or self.k_test < 0:
            raise ValueError("tasks_per_step >= 1, meta_steps >= 1, k_test >= 0")
        if self.mode not in ("first_order", "second_order"):
            raise ValueError("mode must be 'first_order' or 'second_order'")


@dataclass(frozen=True, eq=False)
class MetaTrainReport:
    theta_mnlf: np.ndarray
    loss_curve: np.ndarray        # per-meta-step mean adapted loss
    mode: str
    seed: int
    wall_time: float


@dataclass(frozen=True)
class TaskObjective:
    """Loss/gradient/HVP triple over a flat parameter vector and a batch."""

    loss: Callable[[np.ndarray, Batch], float]
    grad: Callable[[np.ndarray, Batch], np.ndarray]
    hvp: Callable[[np.ndarray, Batch, np.ndarray], np.ndarray]


def lyapunov_objective(arch: net.Architecture, cfg: TightenedLossConfig) -> TaskObjective:
    return TaskObjective(
        loss=lambda th, b: empirical_loss(th, arch, b, cfg),
        grad=lambda th, b: net.loss_gradient(th, arch, b, cfg),
        hvp=lambda th, b, v: net.hvp(th, arch, b, cfg, v),
    )


def adapt_with(obj: TaskObjective, theta: np.ndarray, batch: Batch, alpha: float) -> np.ndarray:
    return theta - alpha * obj.grad(theta, batch)


def meta_objective_with(obj: TaskObjective, theta, s_tr: Batch, s_te: Batch, alpha: float) -> float:
    return obj.loss(adapt_with(obj, theta, s_tr, alpha), s_te)


def meta_gradient_with(obj: TaskObjective, theta, s_tr: Batch, s_te: Batch,
                       alpha: float, mode: str) -> np.ndarray:
    adapted = adapt_with(obj, theta, s_tr, alpha)
    g_te = obj.grad(adapted, s_te)
    if mode == "first_order" or alpha == 0.0:
        return g_te
    # chain rule through theta' = theta - alpha * grad(theta):
    # d/dtheta L(theta') = (I - alpha H_tr(theta)) g_te(theta')
    return g_te - alpha * obj.hvp(theta, s_tr, g_te)


def adapt_step(theta, arch, s_tr: Batch, alpha: float, loss_cfg: TightenedLossConfig) -> np.ndarray:
    """One inner gradient step theta - alpha * grad of the tightened loss."""
    return adapt_with(lyapunov_objective(arch, loss_cfg), theta, s_tr, alpha)


def meta_objective(theta, arch, s_tr: Batch, s_te: Batch, alpha: float,
                   loss_cfg: TightenedLossConfig) -> float:
    """Post-adaptation test loss: the quantity the meta-parameters minimize."""
    return meta_objective_with(lyapunov_objective(arch, loss_cfg), theta, s_tr, s_te, alpha)


def meta_gradient(theta, arch, s_tr: Batch, s_te: Batch, alpha: float,
                  loss_cfg: TightenedLossConfig, mode: str = "second_order") -> np.ndarray:
    return meta_gradient_with(lyapunov_objective(arch, loss_cfg), theta, s_tr, s_te, alpha, mode)


def meta_train(tasks: Sequence[TaskDataset], arch: net.Architecture, meta_cfg: MetaConfig,
               loss_cfg: TightenedLossConfig, theta0: np.ndarray | None = None) -> MetaTrainReport:
    """Full meta-training run over the task datasets, deterministic given the seed."""
    if len(tasks) < 1 or any(t.n_batches < 1 for t in tasks):
        raise ValueError("need at least one task, each with at least one mini-batch")
    obj = lyapunov_objective(arch, loss_cfg)
    rng = np.random.default_rng(meta_cfg.seed)
    theta = net.init_params(arch, meta_cfg.seed) if theta0 is None else np.asarray(theta0, dtype=float).copy()

    start = time.perf_counter()
    curve = np.empty(meta_cfg.meta_steps)
    for step in range(meta_cfg.meta_steps):
        grad_sum = np.zeros_like(theta)
        loss_sum = 0.0
        for _ in range(meta_cfg.tasks_per_step):
            task = tasks[rng.integers(len(tasks))]
            s_tr, s_te = task.batches[rng.integers(task.n_batches)]
            adapted = adapt_with(obj, theta, s_tr, meta_cfg.inner_lr)
            g_te = obj.grad(adapted, s_te)
            if meta_cfg.mode == "second_order" and meta_cfg.inner_lr != 0.0:
                g_te = g_te - meta_cfg.inner_lr * obj.hvp(theta, s_tr, g_te)
            grad_sum += g_te
            loss_sum += obj.loss(adapted, s_te)
        mean_loss = loss_sum / meta_cfg.tasks_per_step
        if not np.isfinite(mean_loss):
            raise NonFiniteLoss(step, mean_loss)
        curve[step] = mean_loss
        theta = theta - meta_cfg.meta_lr * (grad_sum / meta_cfg.tasks_per_step)
    return MetaTrainReport(theta_mnlf=theta, loss_curve=curve, mode=meta_cfg.mode,
                           seed=meta_cfg.seed, wall_time=time.perf_counter() - start)


def test_time_adapt(theta_mnlf, arch, s_tr: Batch, alpha: float, k: int,
                    loss_cfg: TightenedLossConfig) -> np.ndarray:
    """k repeated full-batch inner steps from the meta-parameters."""
    if k < 0:
        raise ValueError("k must be >= 0")
    obj = lyapunov_objective(arch, loss_cfg)
    theta = np.asarray(theta_mnlf, dtype=float).copy()
    for _ in range(k):
        theta = adapt_with(obj, theta, s_tr, alpha)
    return theta


def export_report_json(report: MetaTrainReport, meta_cfg: MetaConfig,
                       checkpoint_ref: str) -> dict:
    """JSON-ready view of a training run (timing excluded: artifacts are
    reproducible bitwise, wall time is not)."""
    return {
        "config": {
            "inner_lr": meta_cfg.inner_lr,
            "meta_lr": meta_cfg.meta_lr,
            "tasks_per_step": meta_cfg.tasks_per_step,
            "meta_steps": meta_cfg.meta_steps,
            "k_test": meta_cfg.k_test,
            "mode": meta_cfg.mode,
            "seed": meta_cfg.seed,
        },
        "loss_curve": [float(v) for v in report.loss_curve],
        "checkpoint": checkpoint_ref,
    }
