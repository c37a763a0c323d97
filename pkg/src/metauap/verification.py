"""Self-contained correctness probes with independent oracles.

Every probe compares the production float32 code against a separate
float64 reference implemented directly in numpy here: finite differences
for gradients, closed forms for the random-direction estimator, and the
scale-constant bound for the gradient-gap probe. The probes return
machine-checkable results and power both the test suite and the CLI
verify command.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attack import AttackConfig
from .data import synth_source
from .episodes import EpisodeStream, StreamSource, derive_seed, sample_episode
from .finetuners import (FineTunerParams, finetune_lstm, init_finetuner,
                         weight_vector)
from .gradients import fo_gradient, zo_estimate
from .meta import MetaConfig, Prop1Report, prop1_gap_probe, task_meta_gradient
from .victims import VictimArch, train_victim


@dataclass
class CheckResult:
    name: str
    measured: float
    bound: float
    passed: bool

    def to_dict(self) -> dict:
        return {"name": self.name, "measured": self.measured,
                "bound": self.bound, "pass": bool(self.passed)}


def _rel_err(g_ad: np.ndarray, g_fd: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(g_fd)), 1e-12)
    return float(np.linalg.norm(g_ad.astype(np.float64) - g_fd) / denom)


def _fd_gradient(f, x: np.ndarray, h: float) -> np.ndarray:
    """Central differences of a scalar float64 function, coordinate-wise."""
    x = x.astype(np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


# ---------------------------------------------------------------------------
# primitive gradient checks


def _ref_conv2d(x, k, padding=0):
    from numpy.lib.stride_tricks import sliding_window_view
    p = padding
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, k.shape[2:], axis=(2, 3))
    return np.einsum("bcijyx,fcyx->bfij", win, k)


def _ref_maxpool2x2(x):
    B, C, H, W = x.shape
    return x.reshape(B, C, H // 2, 2, W // 2, 2).max(axis=(3, 5))


def _ref_softmax_ce(z, y):
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    return (np.log(s) + m - z[np.arange(z.shape[0]), y][:, None]).reshape(-1)


def _primitive_cases(rng):
    """(name, tape_loss, ref_loss, input) triples; each loss maps the input
    to a scalar through one primitive plus a fixed weighting."""

    def w_like(shape):
        return rng.uniform(0.5, 1.5, size=shape).astype(np.float32)

    def away_from(x, kink, margin=0.15):
        return np.where(np.abs(x - kink) < margin, x + 2 * margin, x)

    cases = []

    a = rng.uniform(-1, 1, (3, 4)).astype(np.float32)
    b = rng.uniform(-1, 1, (3, 4)).astype(np.float32)
    wab = w_like((3, 4))
    for name, top, rop in (("add", T.add, np.add), ("sub", T.sub, np.subtract),
                           ("mul", T.mul, np.multiply)):
        cases.append((name,
                      lambda x, top=top: T.sum_(T.mul(top(x, T.Tensor(b)), T.Tensor(wab))),
                      lambda x, rop=rop: float((rop(x, b) * wab).sum()),
                      a.copy()))
    scalar_w = w_like((3, 4))
    cases.append(("mul_scalar_broadcast",
                  lambda x: T.sum_(T.mul(T.mul(x, 0.7), T.Tensor(scalar_w))),
                  lambda x: float((x * 0.7 * scalar_w).sum()),
                  a.copy()))
    chan = rng.uniform(-1, 1, (1, 3, 1, 1)).astype(np.float32)
    img = rng.uniform(-1, 1, (2, 3, 4, 4)).astype(np.float32)
    wimg = w_like((2, 3, 4, 4))
    cases.append(("add_per_channel",
                  lambda x: T.sum_(T.mul(T.add(x, T.Tensor(chan)), T.Tensor(wimg))),
                  lambda x: float(((x + chan) * wimg).sum()),
                  img.copy()))

    m1 = rng.uniform(-1, 1, (3, 5)).astype(np.float32)
    m2 = rng.uniform(-1, 1, (5, 4)).astype(np.float32)
    wmm = w_like((3, 4))
    cases.append(("matmul",
                  lambda x: T.sum_(T.mul(T.matmul(x, T.Tensor(m2)), T.Tensor(wmm))),
                  lambda x: float(((x @ m2) * wmm).sum()),
                  m1.copy()))

    cx = rng.uniform(-1, 1, (2, 2, 5, 5)).astype(np.float32)
    ck = rng.uniform(-1, 1, (3, 2, 3, 3)).astype(np.float32)
    for pad in (0, 1):
        wc = w_like(_ref_conv2d(cx, ck, pad).shape)
        cases.append((f"conv2d_pad{pad}_kernel",
                      lambda k, pad=pad, wc=wc: T.sum_(
                          T.mul(T.conv2d(T.Tensor(cx), k, padding=pad), T.Tensor(wc))),
                      lambda k, pad=pad, wc=wc: float((_ref_conv2d(cx, k, pad) * wc).sum()),
                      ck.copy()))
        cases.append((f"conv2d_pad{pad}_input",
                      lambda x, pad=pad, wc=wc: T.sum_(
                          T.mul(T.conv2d(x, T.Tensor(ck), padding=pad), T.Tensor(wc))),
                      lambda x, pad=pad, wc=wc: float((_ref_conv2d(x, ck, pad) * wc).sum()),
                      cx.copy()))

    px = rng.uniform(-1, 1, (2, 2, 4, 4)).astype(np.float32)
    px += rng.permuted(np.linspace(0, 0.4, px.size)).reshape(px.shape).astype(np.float32)
    wp = w_like((2, 2, 2, 2))
    cases.append(("maxpool2x2",
                  lambda x: T.sum_(T.mul(T.maxpool2x2(x), T.Tensor(wp))),
                  lambda x: float((_ref_maxpool2x2(x) * wp).sum()),
                  px.copy()))

    u = rng.uniform(-1, 1, (4, 5)).astype(np.float32)
    wu = w_like((4, 5))
    cases.append(("relu",
                  lambda x: T.sum_(T.mul(T.relu(x), T.Tensor(wu))),
                  lambda x: float((np.maximum(x, 0) * wu).sum()),
                  away_from(u, 0.0)))
    cases.append(("abs",
                  lambda x: T.sum_(T.mul(T.absolute(x), T.Tensor(wu))),
                  lambda x: float((np.abs(x) * wu).sum()),
                  away_from(u, 0.0)))
    cases.append(("tanh",
                  lambda x: T.sum_(T.mul(T.tanh(x), T.Tensor(wu))),
                  lambda x: float((np.tanh(x) * wu).sum()),
                  u.copy()))
    cases.append(("sigmoid",
                  lambda x: T.sum_(T.mul(T.sigmoid(x), T.Tensor(wu))),
                  lambda x: float(((1 / (1 + np.exp(-x))) * wu).sum()),
                  u.copy()))
    clipped = away_from(away_from(u, -0.5), 0.5)
    cases.append(("clamp",
                  lambda x: T.sum_(T.mul(T.clamp(x, -0.5, 0.5), T.Tensor(wu))),
                  lambda x: float((np.clip(x, -0.5, 0.5) * wu).sum()),
                  clipped))

    labels = rng.integers(0, 5, size=4)
    wce = w_like((4,))
    logits = rng.uniform(-1, 1, (4, 5)).astype(np.float32)
    cases.append(("softmax_cross_entropy",
                  lambda z: T.sum_(T.mul(T.softmax_cross_entropy(z, labels), T.Tensor(wce))),
                  lambda z: float((_ref_softmax_ce(z, labels) * wce).sum()),
                  logits.copy()))

    r = rng.uniform(-1, 1, (3, 4)).astype(np.float32)
    cases.append(("sum_all", lambda x: T.mul(T.sum_(x), 1.5),
                  lambda x: float(x.sum() * 1.5), r.copy()))
    w0 = w_like((4,))
    cases.append(("sum_axis0",
                  lambda x: T.sum_(T.mul(T.sum_(x, axis=0), T.Tensor(w0))),
                  lambda x: float((x.sum(axis=0) * w0).sum()), r.copy()))
    cases.append(("mean_axis1",
                  lambda x: T.sum_(T.mul(T.mean_(x, axis=1), T.Tensor(w_like((3,))[:3] * 0 + 1.0))),
                  lambda x: float(x.mean(axis=1).sum()), r.copy()))
    spread = r + np.arange(12, dtype=np.float32).reshape(3, 4) * 0.31
    wmax = w_like((3,))
    cases.append(("max_axis1",
                  lambda x: T.sum_(T.mul(T.max_(x, axis=1), T.Tensor(wmax))),
                  lambda x: float((x.max(axis=1) * wmax).sum()), spread))
    wre = w_like((12,))
    cases.append(("reshape",
                  lambda x: T.sum_(T.mul(T.reshape(x, (12,)), T.Tensor(wre))),
                  lambda x: float((x.reshape(12) * wre).sum()), r.copy()))
    wsl = w_like((2, 2))
    cases.append(("slice",
                  lambda x: T.sum_(T.mul(x[1:3, 0:2], T.Tensor(wsl))),
                  lambda x: float((x[1:3, 0:2] * wsl).sum()), r.copy()))
    other = rng.uniform(-1, 1, (2, 4)).astype(np.float32)
    wct = w_like((5, 4))
    cases.append(("concat",
                  lambda x: T.sum_(T.mul(T.concat([x, T.Tensor(other)], axis=0),
                                         T.Tensor(wct))),
                  lambda x: float((np.concatenate([x, other], axis=0) * wct).sum()),
                  r.copy()))
    return cases


def check_primitive_gradients(seed: int = 11, tol: float = 1e-4, h: float = 1e-4):
    """Tape gradients of every primitive vs float64 central differences."""
    rng = np.random.Generator(np.random.PCG64(seed))
    results = []
    for name, tape_loss, ref_loss, x in _primitive_cases(rng):
        xt = T.leaf(x)
        g_ad = T.backward(tape_loss(xt)).wrt(xt).data
        g_fd = _fd_gradient(lambda v: ref_loss(v), x, h)
        results.append(CheckResult(f"grad/{name}", _rel_err(g_ad, g_fd), tol,
                                   _rel_err(g_ad, g_fd) <= tol))
    return results


def check_unrolled_recurrence(seed: int = 5, K: int = 3, tol: float = 1e-3):
    """Gradient w.r.t. the parameters of a K-step recurrence vs float64 FD."""
    rng = np.random.Generator(np.random.PCG64(seed))
    dim = 6
    params = rng.uniform(-0.5, 0.5, size=3).astype(np.float32)
    theta0 = rng.uniform(-1, 1, size=dim).astype(np.float32)
    signals = [rng.uniform(-1, 1, size=dim).astype(np.float32) for _ in range(K)]

    p = T.leaf(params)
    theta = T.Tensor(theta0)
    for k in range(K):
        upd = T.mul(T.tanh(T.add(T.mul(T.Tensor(signals[k]), p[0:1]),
                                 T.mul(theta, p[1:2]))), p[2:3])
        theta = T.sub(theta, upd)
    loss = T.sum_(T.mul(theta, theta))
    g_ad = T.backward(loss).wrt(p).data

    def ref(pv):
        th = theta0.astype(np.float64)
        for k in range(K):
            th = th - np.tanh(signals[k] * pv[0] + th * pv[1]) * pv[2]
        return float((th * th).sum())

    g_fd = _fd_gradient(ref, params, 1e-5)
    err = _rel_err(g_ad, g_fd)
    return CheckResult(f"grad/unrolled_recurrence_K{K}", err, tol, err <= tol)


# ---------------------------------------------------------------------------
# learned-fine-tuner meta-gradient vs finite differences


def _ref_sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _ref_unroll_objective(weights64: dict, out_scale: float, theta0: np.ndarray,
                          signals: list, w_steps: np.ndarray, query_loss64) -> float:
    """Float64 replay of the K-step unroll with a frozen signal sequence."""
    dim = theta0.size
    hidden = weights64["lstm.W_hi"].shape[0]
    h = np.zeros((dim, hidden))
    c = np.zeros((dim, hidden))
    theta = theta0.reshape(-1, 1).astype(np.float64)
    total = 0.0
    for k, sig in enumerate(signals):
        x = sig.reshape(-1, 1).astype(np.float64)
        gi = _ref_sigmoid(x @ weights64["lstm.W_ii"] + h @ weights64["lstm.W_hi"]
                          + weights64["lstm.b_i"])
        gf = _ref_sigmoid(x @ weights64["lstm.W_if"] + h @ weights64["lstm.W_hf"]
                          + weights64["lstm.b_f"])
        gg = np.tanh(x @ weights64["lstm.W_ig"] + h @ weights64["lstm.W_hg"]
                     + weights64["lstm.b_g"])
        go = _ref_sigmoid(x @ weights64["lstm.W_io"] + h @ weights64["lstm.W_ho"]
                          + weights64["lstm.b_o"])
        c = gf * c + gi * gg
        h = go * np.tanh(c)
        delta = (h @ weights64["proj.w"] + weights64["proj.b"]) * out_scale
        theta = theta - delta
        if w_steps[k]:
            total += float(w_steps[k]) * query_loss64(theta.reshape(theta0.shape))
    return total


def _ref_mlp_logits(params: dict, x: np.ndarray) -> np.ndarray:
    h = x.reshape(x.shape[0], -1).astype(np.float64)
    h = np.maximum(h @ params["fc1.w"] + params["fc1.b"], 0.0)
    return h @ params["fc2.w"] + params["fc2.b"]


def _ref_attack_loss(params: dict, split, theta: np.ndarray, lam: float) -> float:
    x = split.images.astype(np.float64) + theta[None]
    z = _ref_mlp_logits(params, x)
    y = np.asarray(split.labels)
    z_true = z[np.arange(len(y)), y]
    z_masked = z.copy()
    z_masked[np.arange(len(y)), y] = -np.inf
    margin = np.maximum(z_true - z_masked.max(axis=1), 0.0)
    return float(margin.sum() + lam * np.abs(theta).mean())


def check_meta_gradient_fd(seed: int = 23, K: int = 3, n_coords: int = 8,
                           tol: float = 1e-2, h: float = 1e-3,
                           weights_scheme: str = "last"):
    """Reverse-mode meta-gradient of the unroll vs float64 finite differences.

    The incoming gradient signal is a constant on the tape, so the function
    the tape differentiates holds the per-step signal sequence fixed; the
    finite-difference oracle replays exactly that function in float64.
    Checked on n_coords randomly chosen fine-tuner coordinates.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    pool = synth_source((1, 4, 4), num_classes=2, n_per_class=6, seed=seed)
    arch = VictimArch("mlp_tiny", (1, 4, 4), num_classes=2)
    victim = train_victim(arch, pool, epochs=3, seed=seed)
    stream = EpisodeStream([StreamSource(pool, victim)], global_seed=seed)
    ep = sample_episode(stream, 0)
    phi = init_finetuner(derive_seed(seed, 0xF1))
    attack = AttackConfig(lam=0.1)
    cfg = MetaConfig(T=1, K=K, n_tasks=1, weights=weights_scheme, seed=seed)

    grads, _ = task_meta_gradient(phi, ep, cfg, attack)

    run = finetune_lstm(phi, ep, K, grad_mode="fo", seed=ep.episode_seed,
                        record_for_meta=False, cfg=attack)
    signals = run.signals
    theta0 = run.theta0
    w_steps = weight_vector(weights_scheme, K)
    params64 = {k: v.astype(np.float64) for k, v in victim.params.items()}

    def objective(weights64):
        return _ref_unroll_objective(
            weights64, phi.out_scale, theta0, signals, w_steps,
            lambda th: _ref_attack_loss(params64, ep.query, th, attack.lam))

    names = sorted(phi.weights)
    sizes = [phi.weights[n].size for n in names]
    total = int(np.sum(sizes))
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    ad_vals, fd_vals = [], []
    for flat_idx in sorted(int(i) for i in picks):
        acc = 0
        for name, size in zip(names, sizes):
            if flat_idx < acc + size:
                local = flat_idx - acc
                break
            acc += size
        w64 = {k: v.astype(np.float64) for k, v in phi.weights.items()}
        orig = w64[name].reshape(-1)[local]
        w64[name].reshape(-1)[local] = orig + h
        fp = objective(w64)
        w64[name].reshape(-1)[local] = orig - h
        fm = objective(w64)
        fd_vals.append((fp - fm) / (2.0 * h))
        ad_vals.append(float(grads[name].reshape(-1)[local]))
    err = _rel_err(np.array(ad_vals), np.array(fd_vals))
    return CheckResult(f"grad/meta_unroll_K{K}", err, tol, err <= tol)


# ---------------------------------------------------------------------------
# zeroth-order estimator laws


def check_zo_constant(seed: int = 3, tol: float = 0.0):
    g = zo_estimate(lambda v: 4.2, np.zeros(6, dtype=np.float32), 16, 0.01, seed)
    measured = float(np.abs(g).max())
    return CheckResult("zo/constant_objective_zero", measured, tol, measured <= tol)


def check_zo_linear_unbiased(seed: int = 7, n_seeds: int = 10_000, dim: int = 8,
                             n_dirs: int = 20, tol: float = 0.05):
    """Mean estimate over many direction draws vs the true linear gradient."""
    rng = np.random.Generator(np.random.PCG64(seed))
    a = rng.uniform(0.5, 1.5, size=dim).astype(np.float32)
    theta = rng.uniform(-1, 1, size=dim).astype(np.float32)

    def f(v):
        return float(a @ v)

    acc = np.zeros(dim, dtype=np.float64)
    for s in range(n_seeds):
        acc += zo_estimate(f, theta, n_dirs, 0.01, derive_seed(seed, 0x11, s))
    mean = acc / n_seeds
    measured = float(np.max(np.abs(mean - a) / np.abs(a)))
    return CheckResult("zo/linear_unbiased_per_coord", measured, tol, measured <= tol)


def check_zo_bias_decay(seed: int = 9, n_seeds: int = 200, dim: int = 6,
                        n_dirs: int = 8, lo: float = 5.0, hi: float = 20.0):
    """Forward-difference bias on a fixed quadratic is O(mu): shrinking mu
    tenfold shrinks the seed-averaged error about tenfold. Evaluated near
    the minimum so the curvature term dominates the direction noise."""
    rng = np.random.Generator(np.random.PCG64(seed))
    curv = rng.uniform(0.5, 2.0, size=dim).astype(np.float32)
    center = rng.uniform(-0.5, 0.5, size=dim).astype(np.float32)
    theta = (center + 1e-4).astype(np.float32)
    true_grad = 2.0 * curv * (theta - center)

    def f(v):
        return float(np.sum(curv * (v - center) ** 2, dtype=np.float64))

    errs = {}
    for mu in (1e-2, 1e-3):
        acc = np.zeros(dim, dtype=np.float64)
        for s in range(n_seeds):
            acc += zo_estimate(f, theta, n_dirs, mu, derive_seed(seed, 0x22, s))
        errs[mu] = float(np.linalg.norm(acc / n_seeds - true_grad))
    ratio = errs[1e-2] / errs[1e-3]
    return CheckResult("zo/quadratic_bias_decay_ratio", ratio, hi,
                       lo <= ratio <= hi)


# ---------------------------------------------------------------------------
# gradient-gap probe wrapper


def _probe_fixture(seed: int, pool_size_per_class: int = 40):
    pool = synth_source((1, 8, 8), num_classes=2, n_per_class=pool_size_per_class,
                        seed=derive_seed(seed, 0xA11))
    arch = VictimArch("mlp_tiny", (1, 8, 8), num_classes=2)
    victim = train_victim(arch, pool, epochs=3, seed=derive_seed(seed, 0xB22))
    stream = EpisodeStream([StreamSource(pool, victim)], global_seed=seed)
    phi = init_finetuner(derive_seed(seed, 0xC33))
    return stream, phi


def run_gap_probe_seeds(sizes, n_seeds: int, repeats: int = 6, seed: int = 0,
                        K: int = 5, stat_samples: int = 32):
    """The gap probe across several probe seeds on a synthetic fixture.

    Returns (reports, mean_gaps, all_bounds_hold, nonincreasing_pairs).
    """
    stream, phi = _probe_fixture(seed)
    grid = [(s, s) for s in sizes]
    reports = []
    for s in range(n_seeds):
        reports.append(prop1_gap_probe(stream, phi, grid, repeats=repeats,
                                       seed=derive_seed(seed, 0xD44, s), K=K,
                                       stat_samples=stat_samples))
    gaps = np.array([r.gaps for r in reports])
    mean_gaps = gaps.mean(axis=0)
    all_hold = all(all(r.holds) for r in reports)
    noninc = int(sum(mean_gaps[i + 1] <= mean_gaps[i] + 1e-15
                     for i in range(len(sizes) - 1)))
    return reports, mean_gaps, all_hold, noninc


def check_gap_bound_and_monotonic(sizes=(4, 8, 16, 32, 64), n_seeds: int = 20,
                                  repeats: int = 6, seed: int = 0):
    reports, mean_gaps, all_hold, noninc = run_gap_probe_seeds(
        sizes, n_seeds=n_seeds, repeats=repeats, seed=seed)
    pairs = len(sizes) - 1
    need = max(1, pairs - 1)
    return [
        CheckResult("gap/bound_holds_everywhere", float(all_hold), 1.0, all_hold),
        CheckResult(f"gap/nonincreasing_pairs_of_{pairs}", float(noninc),
                    float(need), noninc >= need),
    ]


# ---------------------------------------------------------------------------
# bundle


def verification_suite(quick: bool = False, prop1_sizes=(4, 8, 16, 32, 64),
                       seed: int = 0) -> dict:
    checks = []
    checks.extend(check_primitive_gradients(seed=derive_seed(seed, 1)))
    checks.append(check_unrolled_recurrence(seed=derive_seed(seed, 2)))
    checks.append(check_meta_gradient_fd(seed=derive_seed(seed, 3)))
    checks.append(check_zo_constant(seed=derive_seed(seed, 4)))
    checks.append(check_zo_linear_unbiased(
        seed=derive_seed(seed, 5), n_seeds=2000 if quick else 10_000))
    checks.append(check_zo_bias_decay(seed=derive_seed(seed, 6),
                                      n_seeds=50 if quick else 200))
    checks.extend(check_gap_bound_and_monotonic(
        sizes=tuple(prop1_sizes), n_seeds=5 if quick else 20,
        repeats=4 if quick else 6, seed=derive_seed(seed, 7)))
    return {
        "schema": "verify-v1",
        "all_pass": all(c.passed for c in checks),
        "checks": [c.to_dict() for c in checks],
    }
