"""Meta-learners for the fine-tuner and the baselines.

Three engines share one skeleton: sample a batch of episodes, run the inner
loop on each support set, differentiate an outer objective, apply one
meta-update.

  * learned fine-tuner ("lft"): inner loop is the K-step LSTM unroll; the
    outer objective is the weighted QUERY loss of the iterates, so the cell
    is trained explicitly for generalization to unseen images. The gradient
    w.r.t. the cell weights flows in reverse mode through the recorded
    unroll; the per-step input signal is a constant on that tape (see
    finetuners), and truncation windows bound how far gradients reach.
  * "l2o": identical machinery, but each episode's support and query are
    merged and that one set feeds both the inner loop and the outer
    objective - the classic train-on-what-you-optimize learned optimizer.
  * "maml" (first-order): meta-learns a shared perturbation initialization
    by K-step gradient descent per task; the outer update applies the query
    gradient at the adapted point directly to the initialization. Requires
    every episode to share one optimizee shape, so it refuses mixed-source
    streams - which is exactly the gap the learned fine-tuner closes.
    "ensemble maml" trains one such initialization per source and needs the
    episode's source id at test time.

Also here: the gradient-gap probe contrasting the query-side and
support-side meta-gradients at matched samples, together with the
sqrt(2)*G*sigma*sqrt(1/D_tr + 1/D_val) consistency bound.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import checkpoint
from . import tensor as T
from .attack import AttackConfig, task_loss
from .data import LabeledImages
from .episodes import (EpisodeStream, FewShotEpisode, derive_seed,
                       sample_episode)
from .finetuners import (FineTunerParams, finetune_gd, finetune_lstm,
                         init_finetuner, lstm_trajectory, random_theta0,
                         weight_vector)
from .gradients import ZoConfig, fo_gradient

META_OPTIMIZERS = ("adam", "sgd")


class IncongruousShapesError(ValueError):
    """A shared-initialization meta-learner saw episodes of mixed shapes."""


class DispatchError(KeyError):
    """No per-source artifact registered for the episode's source id."""


class MetaGradientError(RuntimeError):
    """A task produced a non-finite meta-gradient."""


@dataclass(frozen=True)
class MetaConfig:
    T: int = 200                 # meta-steps
    K: int = 20                  # inner fine-tuning steps per task
    truncation: int = None       # backprop window; defaults to K
    batch_tasks: int = 4
    beta: float = 0.001          # meta learning rate
    weights: str = "last"        # unroll weight scheme
    grad_mode: str = "fo"
    alpha: float = 0.01          # inner GD rate (initialization-based only)
    seed: int = 0
    n_tasks: int = 200           # size of the meta-training task set
    meta_optimizer: str = "adam"
    out_scale: float = 0.1
    zo_n_dirs: int = 20
    zo_mu: float = 0.01

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        tr = self.K if self.truncation is None else self.truncation
        if tr < 1 or self.K % tr:
            raise ValueError(f"truncation {tr} must divide K={self.K}")
        if self.beta <= 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if self.T < 0 or self.n_tasks < 1 or self.batch_tasks < 1:
            raise ValueError("T must be >= 0; n_tasks and batch_tasks >= 1")
        if self.meta_optimizer not in META_OPTIMIZERS:
            raise ValueError(f"meta_optimizer must be one of {META_OPTIMIZERS}")

    @property
    def window(self) -> int:
        return self.K if self.truncation is None else self.truncation

    def zo_config(self, seed: int = 0) -> ZoConfig:
        return ZoConfig(n_dirs=self.zo_n_dirs, mu=self.zo_mu, direction_seed=seed)


class Adam:
    """Standard Adam on a dict of named arrays."""

    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = np.float32(self.b1), np.float32(self.b2)
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            m = self.m.get(k)
            if m is None:
                m = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            m = b1 * m + (np.float32(1) - b1) * g
            v = b2 * self.v[k] + (np.float32(1) - b2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / np.float32(bc1)
            vhat = v / np.float32(bc2)
            params[k] = params[k] - np.float32(self.lr) * mhat / (np.sqrt(vhat) + np.float32(self.eps))


class Sgd:
    """The plain summed-gradient meta-update."""

    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict, grads: dict) -> None:
        for k, g in grads.items():
            params[k] = params[k] - np.float32(self.lr) * g


def make_optimizer(cfg: MetaConfig):
    return Adam(cfg.beta) if cfg.meta_optimizer == "adam" else Sgd(cfg.beta)


def _grad_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.square(g, dtype=np.float64).sum())
    return float(np.sqrt(total))


def merge_support_query(ep: FewShotEpisode) -> FewShotEpisode:
    """Fold the query images into the support set and use that set on both
    levels; this is how the train-on-support learned optimizer sees the
    same images the query-side method does."""
    merged = LabeledImages(
        np.concatenate([ep.support.images, ep.query.images], axis=0),
        np.concatenate([ep.support.labels, ep.query.labels], axis=0),
        source_id=ep.support.source_id,
        num_classes=max(ep.support.num_classes, ep.query.num_classes),
    )
    return FewShotEpisode(support=merged, query=merged, victim=ep.victim,
                          source_id=ep.source_id, episode_seed=ep.episode_seed)


def task_meta_gradient(phi: FineTunerParams, ep: FewShotEpisode, cfg: MetaConfig,
                       attack: AttackConfig, w: np.ndarray = None):
    """Gradient w.r.t. the fine-tuner weights of the weighted per-step query
    loss of one episode's unroll. Returns (grad dict, objective value)."""
    if w is None:
        w = weight_vector(cfg.weights, cfg.K)
    run = finetune_lstm(phi, ep, cfg.K, grad_mode=cfg.grad_mode,
                        seed=ep.episode_seed, record_for_meta=True,
                        truncation=cfg.window, cfg=attack,
                        zo=cfg.zo_config(derive_seed(ep.episode_seed, 0x20)))
    obj = None
    for k in range(1, cfg.K + 1):
        wk = float(w[k - 1])
        if wk == 0.0:
            continue
        term = T.mul(task_loss(run.theta_nodes[k - 1], ep.query, ep.victim, attack), wk)
        obj = term if obj is None else T.add(obj, term)
    gm = T.backward(obj)
    grads = {name: gm.wrt(leaf).data for name, leaf in run.phi_leaves.items()}
    return grads, obj.item()


def _lft_engine(stream: EpisodeStream, cfg: MetaConfig, attack: AttackConfig,
                transform=None):
    phi = init_finetuner(derive_seed(cfg.seed, 0x1F7), out_scale=cfg.out_scale)
    opt = make_optimizer(cfg)
    rng = np.random.Generator(np.random.PCG64(derive_seed(cfg.seed, 0xBA7C4)))
    w = weight_vector(cfg.weights, cfg.K)
    log = []
    for t in range(1, cfg.T + 1):
        t0 = time.perf_counter()
        batch = sorted(rng.choice(cfg.n_tasks, size=min(cfg.batch_tasks, cfg.n_tasks),
                                  replace=False).tolist())
        total = {k: np.zeros_like(v) for k, v in phi.weights.items()}
        loss_sum = 0.0
        for i in batch:
            ep = sample_episode(stream, i)
            if transform is not None:
                ep = transform(ep)
            try:
                grads, loss = task_meta_gradient(phi, ep, cfg, attack, w)
            except T.NonFiniteError as e:
                raise MetaGradientError(
                    f"non-finite meta-gradient at meta-step {t}, task {i}: {e}") from e
            for k in total:
                total[k] += grads[k]
            loss_sum += loss
        opt.step(phi.weights, total)
        log.append({"step": t, "mean_meta_loss": loss_sum / len(batch),
                    "grad_norm": _grad_norm(total),
                    "wall_time_s": time.perf_counter() - t0})
    return phi, log


def meta_train_lft(stream: EpisodeStream, cfg: MetaConfig,
                   attack: AttackConfig = AttackConfig()):
    """Meta-train the learned fine-tuner with the query-side objective."""
    return _lft_engine(stream, cfg, attack, transform=None)


def meta_train_l2o(stream: EpisodeStream, cfg: MetaConfig,
                   attack: AttackConfig = AttackConfig()):
    """Meta-train with the support-side objective on merged episode data."""
    return _lft_engine(stream, cfg, attack, transform=merge_support_query)


def meta_train_maml(stream: EpisodeStream, cfg: MetaConfig,
                    attack: AttackConfig = AttackConfig(), inner_steps: int = None):
    """First-order initialization meta-learning on a single-shape stream.

    inner_steps overrides cfg.K; 0 is allowed and degenerates to plain
    gradient descent on the query loss at the shared initialization.
    """
    shapes = sorted(set(stream.image_shapes))
    if len(shapes) > 1:
        raise IncongruousShapesError(
            "shared-initialization meta-learning needs one optimizee shape; "
            f"stream mixes {shapes[0]} and {shapes[1]}")
    shape = shapes[0]
    inner = cfg.K if inner_steps is None else int(inner_steps)
    if inner < 0:
        raise ValueError(f"inner_steps must be >= 0, got {inner}")
    theta = {"theta": np.zeros(shape, dtype=np.float32)}
    opt = make_optimizer(cfg)
    rng = np.random.Generator(np.random.PCG64(derive_seed(cfg.seed, 0xBA7C4)))
    log = []
    for t in range(1, cfg.T + 1):
        t0 = time.perf_counter()
        batch = sorted(rng.choice(cfg.n_tasks, size=min(cfg.batch_tasks, cfg.n_tasks),
                                  replace=False).tolist())
        total = np.zeros(shape, dtype=np.float32)
        loss_sum = 0.0
        for i in batch:
            ep = sample_episode(stream, i)
            adapted = theta["theta"]
            if inner:
                adapted = finetune_gd(adapted, ep, inner, cfg.alpha, attack)[-1]
            g = fo_gradient(adapted, ep.query, ep.victim, attack).g
            if not np.isfinite(g).all():
                raise MetaGradientError(f"non-finite meta-gradient at meta-step {t}, task {i}")
            total += g
            loss_sum += task_loss(adapted, ep.query, ep.victim, attack).item()
        opt.step(theta, {"theta": total})
        log.append({"step": t, "mean_meta_loss": loss_sum / len(batch),
                    "grad_norm": _grad_norm({"theta": total}),
                    "wall_time_s": time.perf_counter() - t0})
    return theta["theta"], log


def meta_train_ensemble_maml(per_source_streams: dict, cfg: MetaConfig,
                             attack: AttackConfig = AttackConfig()):
    """One shared initialization per source id; returns ({source_id: theta}, logs)."""
    inits, logs = {}, {}
    for source_id in sorted(per_source_streams):
        stream = per_source_streams[source_id]
        sub_cfg = replace(cfg, seed=derive_seed(cfg.seed, zlib.crc32(source_id.encode())))
        inits[source_id], logs[source_id] = meta_train_maml(stream, sub_cfg, attack)
    return inits, logs


def ensemble_lookup(inits: dict, source_id: str) -> np.ndarray:
    if source_id not in inits:
        raise DispatchError(
            f"no initialization registered for source {source_id!r}; "
            f"known sources: {sorted(inits)}")
    return inits[source_id]


def split_stream_per_source(stream: EpisodeStream) -> dict:
    """Single-source streams, one per registered source, seeds derived."""
    out = {}
    for i, src in enumerate(stream.sources):
        out[src.source_id] = EpisodeStream(
            sources=[src], global_seed=derive_seed(stream.global_seed, 0xE5, i),
            n_way=stream.n_way, k_support=stream.k_support, k_query=stream.k_query)
    return out


# ---------------------------------------------------------------------------
# gradient-gap probe


@dataclass
class Prop1Report:
    grid: list                       # (d_tr, d_val) pairs, strictly increasing
    gaps: list                       # measured gradient-gap norm per grid point
    bounds: list                     # sqrt(2)*G_hat*sigma_hat*sqrt(1/d_tr+1/d_val)
    g_hat: list                      # per grid point, max per-sample gradient norm
    sigma_hat: list                  # per grid point, per-sample gradient std
    ref_grad_norm: float = 0.0       # ||support-side gradient|| at the last grid point
    holds: list = field(default_factory=list)

    def __post_init__(self):
        sizes = [min(p) for p in self.grid]
        if any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise ValueError(f"grid must be strictly increasing, got {self.grid}")
        if any(g < 0 for g in self.gaps):
            raise ValueError("gaps must be nonnegative")
        if not self.holds:
            self.holds = [g <= b for g, b in zip(self.gaps, self.bounds)]


def _flat(grads: dict) -> np.ndarray:
    return np.concatenate([grads[k].reshape(-1).astype(np.float64)
                           for k in sorted(grads)])


def _probe_objective(run, split: LabeledImages, victim, attack: AttackConfig, K: int):
    """(1/K) sum_k mean-per-sample loss of iterate k on the split."""
    obj = None
    scale = 1.0 / (K * max(len(split), 1))
    for k in range(1, K + 1):
        term = T.mul(task_loss(run.theta_nodes[k - 1], split, victim, attack), scale)
        obj = term if obj is None else T.add(obj, term)
    return obj


def _per_sample_theta_grads(theta: np.ndarray, split: LabeledImages, victim,
                            attack: AttackConfig) -> list:
    """Per-sample gradients of the mean-normalized loss w.r.t. theta."""
    out = []
    for s in range(len(split)):
        one = split.subset(np.array([s]))
        g = fo_gradient(theta, one, victim, attack).g
        out.append(g.reshape(-1).astype(np.float64))
    return out


def prop1_gap_probe(stream: EpisodeStream, phi: FineTunerParams, grid,
                    repeats: int = 8, seed: int = 0, K: int = 5,
                    attack: AttackConfig = AttackConfig(),
                    stat_samples: int = 64, jac_probes: int = 3) -> Prop1Report:
    """Measure the gap between support-side and query-side meta-gradients.

    For each grid point (d_tr, d_val) and each repeat, draw a support set
    and a query set of those sizes from the pool, unroll the fine-tuner K
    steps on the support set, and differentiate two objectives on the same
    tape: the per-sample-mean loss of the iterates on the support set and
    on the query set, each weighted 1/K per step. Gradients are averaged
    over repeats before taking the gap norm, so the probe estimates the gap
    between the two objective gradients, not per-draw noise.

    The reported bound at each grid point is
        sqrt(2) * G_hat * sigma_hat * sqrt(1/d_tr + 1/d_val)
    with the scale constants estimated in the units the bound multiplies:
    sigma_hat is the standard deviation of per-sample loss gradients in
    perturbation space (over up to stat_samples samples at the iterates),
    and G_hat is the largest norm seen among those per-sample gradients and
    Frobenius estimates of the unroll Jacobian d theta / d weights (random
    vector probes through the recorded tape). Both are empirical stand-ins
    for the bound's uniform constants, so this is a consistency check.
    """
    src = stream.sources[0]
    pool, victim = src.pool, src.victim
    n = len(pool)
    gaps, bounds, g_hats, sigma_hats = [], [], [], []
    ref_norm = 0.0
    for gi, (d_tr, d_val) in enumerate(grid):
        if d_tr > n or d_val > n:
            raise ValueError(f"grid point ({d_tr}, {d_val}) exceeds pool size {n}")
        sum_support = None
        sum_query = None
        theta_grads = []
        jac_norms = []
        for r in range(repeats):
            # common random numbers across grid points: repeat r reuses one
            # permutation pair and one theta0, so smaller draws nest inside
            # larger ones and gap comparisons across sizes are coupled
            rng = np.random.Generator(np.random.PCG64(derive_seed(seed, 0x9A9, r)))
            perm_sup = rng.permutation(n)
            perm_qry = rng.permutation(n)
            sup = pool.subset(np.sort(perm_sup[:d_tr]))
            qry = pool.subset(np.sort(perm_qry[:d_val]))
            theta0 = random_theta0(pool.image_shape, derive_seed(seed, 0x7E7, r))

            def signal(theta, k):
                return fo_gradient(theta, sup, victim, attack).g

            run = lstm_trajectory(phi, theta0, signal, K, record=True)
            g_sup = {name: T.backward(_probe_objective(run, sup, victim, attack, K))
                     .wrt(leaf_t).data for name, leaf_t in run.phi_leaves.items()}
            g_qry = {name: T.backward(_probe_objective(run, qry, victim, attack, K))
                     .wrt(leaf_t).data for name, leaf_t in run.phi_leaves.items()}
            fs, fq = _flat(g_sup), _flat(g_qry)
            sum_support = fs if sum_support is None else sum_support + fs
            sum_query = fq if sum_query is None else sum_query + fq

            # Jacobian Frobenius estimate: E_v ||v^T J||^2 = ||J||_F^2
            jrng = np.random.Generator(np.random.PCG64(derive_seed(seed, 0x1AC, gi, r)))
            theta_node = run.theta_nodes[-1]
            sq = 0.0
            for j in range(jac_probes):
                v = jrng.standard_normal(theta_node.shape).astype(np.float32)
                gm = T.backward(T.sum_(T.mul(theta_node, T.Tensor(v))))
                vj = _flat({nm: gm.wrt(lt).data for nm, lt in run.phi_leaves.items()})
                sq += float(np.sum(vj * vj))
            jac_norms.append(np.sqrt(sq / jac_probes))

            if len(theta_grads) < stat_samples:
                theta_k = run.theta_values[-1]
                for split in (sup, qry):
                    for g in _per_sample_theta_grads(theta_k, split, victim, attack):
                        if len(theta_grads) >= stat_samples:
                            break
                        theta_grads.append(g)
        mean_support = sum_support / repeats
        mean_query = sum_query / repeats
        gap = float(np.linalg.norm(mean_support - mean_query))
        samples = np.stack(theta_grads)
        sigma_hat = float(np.sqrt(
            np.mean(np.sum((samples - samples.mean(axis=0)) ** 2, axis=1))))
        g_hat = float(max(np.linalg.norm(samples, axis=1).max(), max(jac_norms)))
        gaps.append(gap)
        g_hats.append(g_hat)
        sigma_hats.append(sigma_hat)
        bounds.append(float(np.sqrt(2.0) * g_hat * sigma_hat
                            * np.sqrt(1.0 / d_tr + 1.0 / d_val)))
        ref_norm = float(np.linalg.norm(mean_support))
    return Prop1Report(grid=[tuple(p) for p in grid], gaps=gaps, bounds=bounds,
                       g_hat=g_hats, sigma_hat=sigma_hats, ref_grad_norm=ref_norm)


# ---------------------------------------------------------------------------
# artifact serialization (reuses the victim checkpoint container)


def save_finetuner(phi: FineTunerParams, path) -> None:
    tensors = {k: phi.weights[k] for k in sorted(phi.weights)}
    tensors["meta.artifact"] = np.float32([0.0])
    tensors["meta.hidden"] = np.float32([phi.hidden])
    tensors["meta.out_scale"] = np.float32([phi.out_scale])
    checkpoint.save_tensors(path, tensors)


def load_finetuner(path) -> FineTunerParams:
    tensors = checkpoint.load_tensors(path)
    if int(tensors.pop("meta.artifact")[0]) != 0:
        raise checkpoint.CheckpointError(f"{path} is not a fine-tuner artifact")
    hidden = int(tensors.pop("meta.hidden")[0])
    out_scale = float(tensors.pop("meta.out_scale")[0])
    return FineTunerParams(tensors, hidden=hidden, out_scale=out_scale)


def save_maml(inits: dict, alpha: float, path) -> None:
    """One or many shared initializations, keyed by source id."""
    tensors = {}
    for source_id in sorted(inits):
        tensors[f"theta0.{source_id}"] = inits[source_id]
    tensors["meta.artifact"] = np.float32([1.0])
    tensors["meta.alpha"] = np.float32([alpha])
    checkpoint.save_tensors(path, tensors)


def load_maml(path):
    tensors = checkpoint.load_tensors(path)
    if int(tensors.pop("meta.artifact")[0]) != 1:
        raise checkpoint.CheckpointError(f"{path} is not an initialization artifact")
    alpha = float(tensors.pop("meta.alpha")[0])
    inits = {k[len("theta0."):]: v for k, v in tensors.items() if k.startswith("theta0.")}
    return inits, alpha
