"""Inner-loop updaters that turn gradient signals into perturbation updates.

The learned fine-tuner is a coordinate-wise LSTM: one shared cell is applied
independently to every coordinate of the optimizee, with a (dim, hidden)
state bank. Its parameter count is therefore independent of the optimizee
dimension, which is what lets one set of weights drive perturbations of any
image shape. A linear head projects the hidden state to a scalar update per
coordinate:

    delta, state' = cell(g, state);    theta' = theta - delta

K-step unrolls can be recorded on the tape, in which case gradients of any
function of the iterates flow back into the cell weights. The incoming
gradient signal is always treated as a constant w.r.t. the weights: it is
computed outside the tape, so no second-order terms ever arise. Truncated
backprop detaches theta and the state at window boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attack import AttackConfig, UapPerturbation, task_loss
from .episodes import FewShotEpisode, derive_seed
from .gradients import GradEstimate, ZoConfig, fo_gradient, zo_gradient

HIDDEN = 10

PARAM_ORDER = (
    "lstm.W_ii", "lstm.W_if", "lstm.W_ig", "lstm.W_io",
    "lstm.W_hi", "lstm.W_hf", "lstm.W_hg", "lstm.W_ho",
    "lstm.b_i", "lstm.b_f", "lstm.b_g", "lstm.b_o",
    "proj.w", "proj.b",
)

WEIGHT_SCHEMES = ("uniform", "linear", "last")


class DivergenceError(RuntimeError):
    """A fine-tuning iterate became non-finite."""

    def __init__(self, step: int, msg: str):
        super().__init__(f"non-finite iterate at step {step}: {msg}")
        self.step = step


@dataclass
class FineTunerParams:
    weights: dict = field(repr=False)
    hidden: int = HIDDEN
    out_scale: float = 0.1

    def __post_init__(self):
        if self.out_scale <= 0:
            raise ValueError(f"out_scale must be positive, got {self.out_scale}")
        missing = [k for k in PARAM_ORDER if k not in self.weights]
        if missing:
            raise ValueError(f"fine-tuner weights missing {missing}")

    def copy(self) -> "FineTunerParams":
        return FineTunerParams({k: v.copy() for k, v in self.weights.items()},
                               hidden=self.hidden, out_scale=self.out_scale)


@dataclass
class FineTunerState:
    h: np.ndarray = field(repr=False)
    c: np.ndarray = field(repr=False)

    @classmethod
    def zeros(cls, dim: int, hidden: int = HIDDEN) -> "FineTunerState":
        return cls(h=np.zeros((dim, hidden), dtype=np.float32),
                   c=np.zeros((dim, hidden), dtype=np.float32))


def init_finetuner(seed: int, hidden: int = HIDDEN, out_scale: float = 0.1) -> FineTunerParams:
    """Uniform(-1/sqrt(hidden), +1/sqrt(hidden)) init for all cell weights."""
    rng = np.random.Generator(np.random.PCG64(seed))
    bound = 1.0 / np.sqrt(hidden)

    def u(*shape):
        return rng.uniform(-bound, bound, size=shape).astype(np.float32)

    w = {}
    for gate in "ifgo":
        w[f"lstm.W_i{gate}"] = u(1, hidden)
        w[f"lstm.W_h{gate}"] = u(hidden, hidden)
        w[f"lstm.b_{gate}"] = u(hidden)
    w["proj.w"] = u(hidden, 1)
    w["proj.b"] = u(1)
    return FineTunerParams(w, hidden=hidden, out_scale=out_scale)


def zero_finetuner(hidden: int = HIDDEN, out_scale: float = 0.1) -> FineTunerParams:
    w = {}
    for gate in "ifgo":
        w[f"lstm.W_i{gate}"] = np.zeros((1, hidden), dtype=np.float32)
        w[f"lstm.W_h{gate}"] = np.zeros((hidden, hidden), dtype=np.float32)
        w[f"lstm.b_{gate}"] = np.zeros(hidden, dtype=np.float32)
    w["proj.w"] = np.zeros((hidden, 1), dtype=np.float32)
    w["proj.b"] = np.zeros(1, dtype=np.float32)
    return FineTunerParams(w, hidden=hidden, out_scale=out_scale)


def _cell(wt: dict, out_scale: float, x: T.Tensor, h: T.Tensor, c: T.Tensor):
    """One shared-weight LSTM step on a (dim, 1) input column."""
    gi = T.sigmoid(T.add(T.add(x @ wt["lstm.W_ii"], h @ wt["lstm.W_hi"]), wt["lstm.b_i"]))
    gf = T.sigmoid(T.add(T.add(x @ wt["lstm.W_if"], h @ wt["lstm.W_hf"]), wt["lstm.b_f"]))
    gg = T.tanh(T.add(T.add(x @ wt["lstm.W_ig"], h @ wt["lstm.W_hg"]), wt["lstm.b_g"]))
    go = T.sigmoid(T.add(T.add(x @ wt["lstm.W_io"], h @ wt["lstm.W_ho"]), wt["lstm.b_o"]))
    c2 = T.add(T.mul(gf, c), T.mul(gi, gg))
    h2 = T.mul(go, T.tanh(c2))
    delta = T.mul(T.add(h2 @ wt["proj.w"], wt["proj.b"]), float(out_scale))
    return delta, h2, c2


def lstm_step(phi: FineTunerParams, g, state: FineTunerState):
    """Value-level single step: returns (delta array, new state).

    g may be a GradEstimate or a flat array; each coordinate passes through
    the shared cell with its own state row.
    """
    gv = g.g if isinstance(g, GradEstimate) else np.asarray(g, dtype=np.float32)
    flat = gv.reshape(-1)
    if state.h.shape[0] != flat.shape[0]:
        raise T.ShapeMismatchError(
            f"state holds {state.h.shape[0]} coordinates, signal has {flat.shape[0]}")
    wt = {k: T.Tensor(v) for k, v in phi.weights.items()}
    delta, h2, c2 = _cell(wt, phi.out_scale, T.Tensor(flat.reshape(-1, 1)),
                          T.Tensor(state.h), T.Tensor(state.c))
    return delta.data.reshape(gv.shape), FineTunerState(h=h2.data, c=c2.data)


@dataclass
class LstmRun:
    """One recorded (or value-only) K-step unroll."""
    theta_values: list                 # K arrays, theta after each step
    theta_nodes: list                  # K Tensors when recorded, else []
    phi_leaves: dict = field(default_factory=dict)
    final_state: FineTunerState = None
    theta0: np.ndarray = None
    signals: list = field(default_factory=list)


def lstm_trajectory(phi: FineTunerParams, theta0: np.ndarray, signal_fn,
                    K: int, record: bool = False, truncation: int = None) -> LstmRun:
    """Unroll the fine-tuner for K steps from theta0.

    signal_fn(theta_values, k) supplies the per-step gradient signal as a
    plain array; it never joins the tape. With record=True the weights are
    tape leaves and every iterate stays connected to them, except across
    truncation-window boundaries where theta and the state are detached.
    """
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    trunc = K if truncation is None else int(truncation)
    if trunc < 1 or K % trunc:
        raise ValueError(f"truncation {trunc} must be >= 1 and divide K={K}")

    wt = ({k: T.leaf(v) for k, v in phi.weights.items()} if record
          else {k: T.Tensor(v) for k, v in phi.weights.items()})
    dim = int(np.prod(theta0.shape))
    theta = T.Tensor(theta0.reshape(-1, 1))
    h = T.Tensor(np.zeros((dim, phi.hidden), dtype=np.float32))
    c = T.Tensor(np.zeros((dim, phi.hidden), dtype=np.float32))

    run = LstmRun(theta_values=[], theta_nodes=[], phi_leaves=wt if record else {},
                  theta0=theta0.copy())
    for k in range(1, K + 1):
        if record and k > 1 and (k - 1) % trunc == 0:
            theta, h, c = theta.detach(), h.detach(), c.detach()
        g = signal_fn(theta.data.reshape(theta0.shape), k)
        gv = np.asarray(g.g if isinstance(g, GradEstimate) else g, dtype=np.float32)
        run.signals.append(gv.reshape(theta0.shape).copy())
        try:
            delta, h, c = _cell(wt, phi.out_scale, T.Tensor(gv.reshape(-1, 1)), h, c)
            theta = T.sub(theta, delta)
        except T.NonFiniteError as e:
            raise DivergenceError(k, str(e)) from e
        run.theta_values.append(theta.data.reshape(theta0.shape).copy())
        if record:
            run.theta_nodes.append(T.reshape(theta, theta0.shape))
    run.final_state = FineTunerState(h=h.data, c=c.data)
    return run


def random_theta0(shape, seed: int, scale: float = 0.01) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(seed))
    return (scale * rng.standard_normal(shape)).astype(np.float32)


def episode_signal_fn(episode: FewShotEpisode, grad_mode: str, seed: int,
                      cfg: AttackConfig, zo: ZoConfig = None):
    """Per-step gradient oracle on the episode's support set."""
    mode = grad_mode.lower()
    if mode == "fo":
        def fn(theta, k):
            return fo_gradient(theta, episode.support, episode.victim, cfg).g
    elif mode == "zo":
        base = zo or ZoConfig()

        def fn(theta, k):
            step_zo = ZoConfig(n_dirs=base.n_dirs, mu=base.mu,
                               direction_seed=derive_seed(seed, 0xD1, k))
            return zo_gradient(theta, episode.support, episode.victim, step_zo, cfg).g
    else:
        raise ValueError(f"grad_mode must be 'fo' or 'zo', got {grad_mode!r}")
    return fn


def finetune_lstm(phi: FineTunerParams, episode: FewShotEpisode, K: int,
                  grad_mode: str = "fo", seed: int = 0,
                  record_for_meta: bool = False, truncation: int = None,
                  cfg: AttackConfig = AttackConfig(), zo: ZoConfig = None) -> LstmRun:
    """K learned-fine-tuner steps on an episode, from a small random start.

    theta0 ~ N(0, 0.01^2) seeded per episode; the hidden state starts at
    zero and persists across the K steps of this one call.
    """
    theta0 = random_theta0(episode.support.image_shape, derive_seed(seed, 0x7E7A0))
    signal = episode_signal_fn(episode, grad_mode, seed, cfg, zo)
    return lstm_trajectory(phi, theta0, signal, K, record=record_for_meta,
                           truncation=truncation)


def gd_trajectory(theta0: np.ndarray, grad_fn, K: int, alpha: float) -> list:
    """Plain K-step gradient descent on a value-level gradient oracle."""
    theta = theta0.astype(np.float32).copy()
    out = []
    for k in range(1, K + 1):
        theta = theta - np.float32(alpha) * grad_fn(theta, k)
        if not np.isfinite(theta).all():
            raise DivergenceError(k, "gradient descent diverged")
        out.append(theta.copy())
    return out


def finetune_gd(theta0: np.ndarray, episode: FewShotEpisode, K: int, alpha: float,
                cfg: AttackConfig = AttackConfig()) -> list:
    """Exact K-step gradient descent on the support task loss."""
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")

    def grad(theta, k):
        return fo_gradient(theta, episode.support, episode.victim, cfg).g

    return gd_trajectory(np.asarray(theta0, dtype=np.float32), grad, K, alpha)


PGD_KAPPA = 3.0  # margin hysteresis; signed steps cycle between runner-up
                 # classes at kappa 0 and stall short of a joint flip


def pgd_trajectory(episode: FewShotEpisode, steps: int, step_size: float,
                   eps_inf: float, cfg: AttackConfig = None) -> list:
    """Signed-gradient steps on the support loss, projected onto the
    L-inf ball of radius eps_inf, with pixel clipping inside the loss."""
    if cfg is None:
        cfg = AttackConfig(kappa=PGD_KAPPA)
    loss_cfg = AttackConfig(lam=cfg.lam, kappa=cfg.kappa, pixel_clip=True)
    theta = np.zeros(episode.support.image_shape, dtype=np.float32)
    out = []
    for _ in range(steps):
        g = fo_gradient(theta, episode.support, episode.victim, loss_cfg).g
        theta = theta - np.float32(step_size) * np.sign(g, dtype=np.float32)
        theta = np.clip(theta, -eps_inf, eps_inf)
        out.append(theta.copy())
    return out


def pgd_uap(episode: FewShotEpisode, steps: int = 200, step_size: float = 0.01,
            eps_inf: float = 0.15, cfg: AttackConfig = None) -> UapPerturbation:
    traj = pgd_trajectory(episode, steps, step_size, eps_inf, cfg)
    return UapPerturbation(theta=traj[-1], source_shape=episode.support.image_shape)


def default_pgd_eps(image_shape) -> float:
    """0.15 for grayscale sources, 0.10 for RGB."""
    return 0.15 if image_shape[0] == 1 else 0.10


def weight_vector(scheme: str, K: int) -> np.ndarray:
    """Per-step importance weights over a K-step unroll."""
    if scheme == "uniform":
        return np.ones(K, dtype=np.float32)
    if scheme == "linear":
        return np.arange(1, K + 1, dtype=np.float32)
    if scheme == "last":
        w = np.zeros(K, dtype=np.float32)
        w[-1] = 1.0
        return w
    raise ValueError(f"unknown weight scheme {scheme!r}, expected one of {WEIGHT_SCHEMES}")
