"""Gradient signals fed to the fine-tuners.

Two modes: the exact reverse-mode gradient of the task loss (first order),
and a random-direction finite-difference estimate built purely from loss
values (zeroth order) for the black-box setting:

    g = sum_j u_j * (f(theta + mu * u_j) - f(theta)) / (mu * n)

with u_j ~ N(0, I). Forward differences, n + 1 loss evaluations per call,
fresh directions every call, all deterministic in the direction seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attack import AttackConfig, task_loss
from .data import LabeledImages
from .victims import VictimModel


@dataclass
class ZoConfig:
    n_dirs: int = 20
    mu: float = 0.01
    direction_seed: int = 0

    def __post_init__(self):
        if self.n_dirs < 1:
            raise ValueError(f"n_dirs must be >= 1, got {self.n_dirs}")
        if self.mu <= 0:
            raise ValueError(f"mu must be > 0, got {self.mu}")


@dataclass
class GradEstimate:
    g: np.ndarray = field(repr=False)
    mode: str = "FO"
    n_dirs: int = 0
    mu: float = 0.0
    queries_used: int = 0


def fo_gradient(theta, split: LabeledImages, victim: VictimModel,
                cfg: AttackConfig = AttackConfig()) -> GradEstimate:
    """Exact reverse-mode gradient of the task loss w.r.t. theta."""
    th = T.leaf(theta.data if isinstance(theta, T.Tensor) else theta)
    loss = task_loss(th, split, victim, cfg)
    g = T.backward(loss).wrt(th).data
    return GradEstimate(g=g, mode="FO", queries_used=0)


def zo_estimate(f, theta: np.ndarray, n_dirs: int, mu: float, seed: int) -> np.ndarray:
    """Random-direction forward-difference estimate of grad f at theta.

    f maps a float32 array shaped like theta to a float; called n_dirs + 1
    times. The direction sum runs in a fixed order, so the result is a
    deterministic function of (f, theta, n_dirs, mu, seed).
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    dirs = rng.standard_normal((n_dirs,) + theta.shape).astype(np.float32)
    f0 = np.float32(f(theta))
    acc = np.zeros_like(theta, dtype=np.float32)
    for j in range(n_dirs):
        fj = np.float32(f(theta + mu * dirs[j]))
        acc += dirs[j] * (fj - f0)
    return acc / np.float32(mu * n_dirs)


def zo_gradient(theta, split: LabeledImages, victim: VictimModel,
                zo: ZoConfig, cfg: AttackConfig = AttackConfig()) -> GradEstimate:
    """Zeroth-order estimate of the task-loss gradient w.r.t. theta."""
    th = theta.data if isinstance(theta, T.Tensor) else np.asarray(theta, dtype=np.float32)

    def value(v):
        try:
            return task_loss(T.Tensor(v), split, victim, cfg).item()
        except T.NonFiniteError as e:
            raise T.NonFiniteError(f"non-finite loss at a probe point: {e}") from e

    g = zo_estimate(value, th, zo.n_dirs, zo.mu, zo.direction_seed)
    return GradEstimate(g=g, mode="ZO", n_dirs=zo.n_dirs, mu=zo.mu,
                        queries_used=zo.n_dirs + 1)


def zo_estimate_central(f, theta: np.ndarray, n_dirs: int, mu: float, seed: int) -> np.ndarray:
    """Central-difference variant, for diagnostics only (2n evaluations)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    dirs = rng.standard_normal((n_dirs,) + theta.shape).astype(np.float32)
    acc = np.zeros_like(theta, dtype=np.float32)
    for j in range(n_dirs):
        fp = np.float32(f(theta + mu * dirs[j]))
        fm = np.float32(f(theta - mu * dirs[j]))
        acc += dirs[j] * (fp - fm)
    return acc / np.float32(2.0 * mu * n_dirs)
