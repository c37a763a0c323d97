"""Episodic meta-testing: per-step attack curves and their aggregates.

Every method is driven for max_steps on each test episode's support set;
after each step we record the query-set attack success rate (with pixel
clipping, the physically valid measurement), the support-set success rate,
the mean-|theta| size, and the support fine-tuning loss.

Reported "asr within N steps" follows the running-max convention: the best
per-episode success rate seen in the first N steps, then averaged over
episodes. steps_to_full_asr is the first step at which the per-step mean
over episodes reaches 1.0. Curve CSV schema "curve-v1" has the fixed
columns step, mean_asr, std_asr, mean_l1, mean_loss, where mean_asr is the
query-set rate.

Episodes are evaluated independently (optionally on a process pool) and
reduced in episode-index order, so results are identical at any job count.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attack import AttackConfig, attack_success_rate, task_loss
from .episodes import EpisodeStream, sample_episode
from .finetuners import (PGD_KAPPA, FineTunerParams, default_pgd_eps,
                         finetune_lstm, gd_trajectory, pgd_trajectory)
from .gradients import ZoConfig, fo_gradient
from .meta import ensemble_lookup

CURVE_SCHEMA = "curve-v1"
CURVE_COLUMNS = ("step", "mean_asr", "std_asr", "mean_l1", "mean_loss")


@dataclass(frozen=True)
class TestConfig:
    max_steps: int = 200
    grad_mode: str = "fo"
    alpha: float = 0.01            # GD rate for initialization artifacts
    pgd_step_size: float = 0.01
    pgd_eps: float = None          # None: 0.15 grayscale / 0.06 RGB
    pgd_kappa: float = None        # None: the hysteresis default
    zo_n_dirs: int = 20
    zo_mu: float = 0.01
    attack: AttackConfig = field(default_factory=AttackConfig)


@dataclass
class RunReport:
    method: str
    episodes: int
    max_steps: int
    query_asr: np.ndarray = field(repr=False)    # (E, S)
    support_asr: np.ndarray = field(repr=False)  # (E, S)
    l1: np.ndarray = field(repr=False)           # (E, S)
    loss: np.ndarray = field(repr=False)         # (E, S)
    source_ids: list = field(default_factory=list)

    def mean_curve(self, which: str) -> np.ndarray:
        return getattr(self, which).mean(axis=0) if self.episodes else np.zeros(0)

    def _best_within(self, arr: np.ndarray, n: int) -> np.ndarray:
        n = min(n, self.max_steps)
        return arr[:, :n].max(axis=1)

    def steps_to_full_asr(self):
        """First step where the mean query ASR over episodes is 1.0."""
        if not self.episodes:
            return None
        curve = self.query_asr.mean(axis=0)
        hits = np.nonzero(curve >= 1.0 - 1e-9)[0]
        return int(hits[0]) + 1 if hits.size else None

    def steps_to_best_asr(self):
        if not self.episodes:
            return None
        return int(self.query_asr.mean(axis=0).argmax()) + 1

    def summary(self) -> dict:
        out = {
            "schema": "report-v1",
            "csv_schema": CURVE_SCHEMA,
            "method": self.method,
            "episodes": self.episodes,
            "max_steps": self.max_steps,
        }
        if not self.episodes:
            return out
        for n in (50, 100):
            best = self._best_within(self.query_asr, n)
            out[f"query_asr_best_{n}"] = float(best.mean())
            out[f"query_asr_best_{n}_std"] = float(best.std())
            at = self.query_asr[:, min(n, self.max_steps) - 1]
            out[f"query_asr_at_{n}"] = float(at.mean())
            out[f"query_asr_at_{n}_std"] = float(at.std())
        idx100 = min(100, self.max_steps) - 1
        out["mean_l1_at_100"] = float(self.l1[:, idx100].mean())
        out["support_asr_best"] = float(self._best_within(self.support_asr,
                                                          self.max_steps).mean())
        out["support_asr_final"] = float(self.support_asr[:, -1].mean())
        out["query_asr_final"] = float(self.query_asr[:, -1].mean())
        out["query_asr_best"] = float(self._best_within(self.query_asr,
                                                        self.max_steps).mean())
        stf = self.steps_to_full_asr()
        out["steps_to_full_asr"] = stf if stf is not None else "N/A"
        out["steps_to_best_asr"] = self.steps_to_best_asr()
        return out

    def curve_rows(self):
        rows = []
        if not self.episodes:
            return rows
        mean_asr = self.query_asr.mean(axis=0)
        std_asr = self.query_asr.std(axis=0)
        mean_l1 = self.l1.mean(axis=0)
        mean_loss = self.loss.mean(axis=0)
        for s in range(self.max_steps):
            rows.append((s + 1, float(mean_asr[s]), float(std_asr[s]),
                         float(mean_l1[s]), float(mean_loss[s])))
        return rows

    def write_curves_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write(",".join(CURVE_COLUMNS) + "\n")
            for row in self.curve_rows():
                f.write("%d,%.6f,%.6f,%.6f,%.6f\n" % row)

    def write_summary_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.summary(), f, indent=2, sort_keys=True)
            f.write("\n")


def _trajectory_for(method: str, artifact, episode, tcfg: TestConfig):
    method = method.lower()
    if method in ("lft", "l2o"):
        run = finetune_lstm(artifact, episode, tcfg.max_steps,
                            grad_mode=tcfg.grad_mode, seed=episode.episode_seed,
                            cfg=tcfg.attack,
                            zo=ZoConfig(n_dirs=tcfg.zo_n_dirs, mu=tcfg.zo_mu))
        return run.theta_values
    if method in ("maml", "ensemble-maml"):
        inits = artifact if isinstance(artifact, dict) else {episode.source_id: artifact}
        theta0 = ensemble_lookup(inits, episode.source_id)

        def grad(theta, k):
            return fo_gradient(theta, episode.support, episode.victim, tcfg.attack).g

        return gd_trajectory(theta0, grad, tcfg.max_steps, tcfg.alpha)
    if method == "pgd":
        eps = tcfg.pgd_eps or default_pgd_eps(episode.support.image_shape)
        kappa = PGD_KAPPA if tcfg.pgd_kappa is None else tcfg.pgd_kappa
        cfg = AttackConfig(lam=tcfg.attack.lam, kappa=kappa)
        return pgd_trajectory(episode, tcfg.max_steps, tcfg.pgd_step_size,
                              eps, cfg)
    raise ValueError(f"unknown method {method!r}")


def evaluate_episode(method: str, artifact, episode, tcfg: TestConfig):
    """Per-step metric arrays for one episode."""
    traj = _trajectory_for(method, artifact, episode, tcfg)
    S = len(traj)
    q_asr = np.zeros(S, dtype=np.float64)
    s_asr = np.zeros(S, dtype=np.float64)
    l1 = np.zeros(S, dtype=np.float64)
    loss = np.zeros(S, dtype=np.float64)
    for s, theta in enumerate(traj):
        q_asr[s] = attack_success_rate(theta, episode.query, episode.victim, clip=True)
        s_asr[s] = attack_success_rate(theta, episode.support, episode.victim, clip=True)
        l1[s] = float(np.abs(theta).mean())
        loss[s] = task_loss(theta, episode.support, episode.victim, tcfg.attack).item()
    return q_asr, s_asr, l1, loss, episode.source_id


_WORKER = {}


def _worker_init(method, artifact, stream, tcfg):
    _WORKER.update(method=method, artifact=artifact, stream=stream, tcfg=tcfg)


def _worker_eval(index: int):
    ep = sample_episode(_WORKER["stream"], index)
    return evaluate_episode(_WORKER["method"], _WORKER["artifact"], ep, _WORKER["tcfg"])


def run_meta_test(method: str, artifact, stream: EpisodeStream, episodes: int,
                  tcfg: TestConfig = TestConfig(), jobs: int = 1) -> RunReport:
    """Evaluate a method over `episodes` episodes of the stream.

    Pure per-episode work fans out to `jobs` processes; the reduction is in
    episode-index order either way.
    """
    S = tcfg.max_steps
    if episodes == 0:
        empty = np.zeros((0, S))
        return RunReport(method=method, episodes=0, max_steps=S, query_asr=empty,
                         support_asr=empty, l1=empty, loss=empty)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_worker_init,
                                 initargs=(method, artifact, stream, tcfg)) as pool:
            results = list(pool.map(_worker_eval, range(episodes), chunksize=4))
    else:
        results = [evaluate_episode(method, artifact, sample_episode(stream, i), tcfg)
                   for i in range(episodes)]
    report = RunReport(
        method=method, episodes=episodes, max_steps=S,
        query_asr=np.stack([r[0] for r in results]),
        support_asr=np.stack([r[1] for r in results]),
        l1=np.stack([r[2] for r in results]),
        loss=np.stack([r[3] for r in results]),
        source_ids=[r[4] for r in results],
    )
    return report
