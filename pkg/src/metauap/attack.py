"""Task loss for universal perturbations: margin attack loss plus an L1 term.

Conventions baked in here and echoed in every run manifest:
  - the L1 penalty and all reported "l1" values are the MEAN absolute pixel
    value of the perturbation, so numbers are comparable across image sizes;
  - argmax ties count as misclassification (attacker-favorable);
  - pixel clipping to [0, 1] is ON when measuring attack success and OFF by
    default inside loss/gradient computations, where smoothness matters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import LabeledImages
from .victims import VictimModel

_EXCLUDE = np.float32(1e9)  # pushes the true class out of the runner-up max


@dataclass(frozen=True)
class AttackConfig:
    lam: float = 0.1          # weight of the mean-|theta| penalty
    kappa: float = 0.0        # margin confidence
    pixel_clip: bool = False  # clamp x + theta to [0, 1] inside the loss
    eps_inf: float = None     # L-inf radius for projected descent, if any

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"lam must be finite and >= 0, got {self.lam}")
        if self.kappa < 0:
            raise ValueError(f"kappa must be >= 0, got {self.kappa}")
        if self.eps_inf is not None and self.eps_inf <= 0:
            raise ValueError(f"eps_inf must be > 0 when set, got {self.eps_inf}")


@dataclass
class UapPerturbation:
    theta: np.ndarray
    source_shape: tuple

    def __post_init__(self):
        self.theta = np.ascontiguousarray(self.theta, dtype=np.float32)
        if tuple(self.theta.shape) != tuple(self.source_shape):
            raise T.ShapeMismatchError(
                f"perturbation shape {self.theta.shape} != source shape {self.source_shape}")


def apply_perturbation(images, theta, clip: bool) -> T.Tensor:
    """images + theta broadcast over the batch, optionally clamped to [0, 1]."""
    x = images if isinstance(images, T.Tensor) else T.Tensor(images)
    th = theta if isinstance(theta, T.Tensor) else T.Tensor(theta)
    if tuple(x.shape[1:]) != tuple(th.shape):
        raise T.ShapeMismatchError(
            f"perturbation shape {th.shape} does not match image shape {x.shape[1:]}")
    out = T.add(x, T.reshape(th, (1,) + tuple(th.shape)))
    return T.clamp(out, 0.0, 1.0) if clip else out


def cw_loss(logits, labels, kappa: float = 0.0) -> T.Tensor:
    """Per-example margin loss max(z_y - max_{c != y} z_c + kappa, 0).

    Zero exactly when the attack succeeds with margin kappa; ties between
    the true class and a wrong class count as success at kappa = 0.
    """
    z = logits if isinstance(logits, T.Tensor) else T.Tensor(logits)
    y = np.asarray(labels)
    B, n = z.shape
    if y.min() < 0 or y.max() >= n:
        raise ValueError(f"label out of range [0, {n})")
    onehot = np.zeros((B, n), dtype=np.float32)
    onehot[np.arange(B), y] = 1.0
    z_true = T.sum_(T.mul(z, onehot), axis=1)
    z_other = T.max_(T.sub(z, T.Tensor(onehot * _EXCLUDE)), axis=1)
    margin = T.sub(z_true, z_other)
    return T.relu(T.add(margin, float(kappa)))


def l1_mean(theta) -> T.Tensor:
    th = theta if isinstance(theta, T.Tensor) else T.Tensor(theta)
    return T.mean_(T.absolute(th))


def task_loss(theta, split: LabeledImages, victim: VictimModel,
              cfg: AttackConfig = AttackConfig()) -> T.Tensor:
    """Summed margin loss over the split plus lam * mean|theta|.

    Differentiable w.r.t. theta when theta is recorded on a tape.
    """
    perturbed = apply_perturbation(split.images, theta, clip=cfg.pixel_clip)
    logits = victim.forward_logits(perturbed)
    atk = T.sum_(cw_loss(logits, split.labels, cfg.kappa))
    return T.add(atk, T.mul(l1_mean(theta), float(cfg.lam)))


def attack_success_rate(theta, split: LabeledImages, victim: VictimModel,
                        clip: bool = True) -> float:
    """Fraction of split images misclassified under x + theta.

    Images the victim gets wrong even unperturbed count as successes; a tie
    with the true class counts as a success.
    """
    th = theta.data if isinstance(theta, T.Tensor) else np.asarray(theta, dtype=np.float32)
    x = split.images + th[None]
    if clip:
        x = np.clip(x, 0.0, 1.0)
    z = victim.forward_logits(x).data
    y = np.asarray(split.labels)
    z_true = z[np.arange(len(y)), y]
    z_masked = z.copy()
    z_masked[np.arange(len(y)), y] = -np.inf
    return float((z_masked.max(axis=1) >= z_true).mean())
