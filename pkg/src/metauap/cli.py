"""Command-line front door.

Subcommands: train-victim, meta-train, meta-test, verify. Every run writes
a manifest JSON echoing the full configuration and the conventions baked
into the loss and reports; everything except the manifest's timing fields
is byte-reproducible for a given seed at any --jobs value.

Source mini-language, comma-separated for multi-source runs:
    synth<C>x<H>x<W>:<classes>:<per-class>   e.g. synth1x28x28:10:40
    idx:<images-path>,<labels-path>
    cifar:<path or dir>
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import re
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .attack import AttackConfig
from .data import LabeledImages, load_cifar10_bin, load_idx, synth_source
from .episodes import EpisodeStream, StreamSource, derive_seed, split_meta_pools
from .evaluate import CURVE_SCHEMA, TestConfig, run_meta_test
from .meta import (MetaConfig, load_finetuner, load_maml, meta_train_ensemble_maml,
                   meta_train_l2o, meta_train_lft, meta_train_maml, save_finetuner,
                   save_maml, split_stream_per_source)
from .verification import verification_suite
from .victims import (VictimArch, default_arch_for_shape, load_checkpoint,
                      save_checkpoint, train_victim)

SPLIT_SEED = 0          # pool split is fixed per source spec, not per run seed
VICTIM_TRAIN_PER_CLASS = 100

_SYNTH_RE = re.compile(r"^(?:synth)?(\d+)x(\d+)x(\d+):(\d+):(\d+)$")


class UsageError(ValueError):
    pass


def parse_synth_spec(spec: str):
    m = _SYNTH_RE.match(spec)
    if not m:
        raise UsageError(f"bad synth spec {spec!r}, expected synth<C>x<H>x<W>:<classes>:<per-class>")
    c, h, w, classes, per = (int(g) for g in m.groups())
    return (c, h, w), classes, per


def load_source(spec: str, data_seed: int) -> LabeledImages:
    if spec.startswith("synth") or _SYNTH_RE.match(spec):
        shape, classes, per = parse_synth_spec(spec)
        return synth_source(shape, classes, per, seed=derive_seed(data_seed, *shape, classes))
    if spec.startswith("idx:"):
        parts = spec[len("idx:"):].split(",")
        if len(parts) != 2:
            raise UsageError(f"idx spec needs <images>,<labels>: {spec!r}")
        return load_idx(parts[0], parts[1])
    if spec.startswith("cifar:"):
        root = Path(spec[len("cifar:"):])
        paths = sorted(root.glob("*.bin")) if root.is_dir() else [root]
        if not paths:
            raise UsageError(f"no .bin files under {root}")
        return load_cifar10_bin(paths)
    raise UsageError(f"unrecognized source spec {spec!r}")


def _auto_victim(pool: LabeledImages, data_seed: int, index: int, epochs: int):
    """Deterministic default victim for a source: trains on an independent
    synthetic draw for synthetic sources, else on the meta-train pool."""
    arch = default_arch_for_shape(pool.image_shape, pool.num_classes)
    seed = derive_seed(data_seed, 0x71C, index)
    if pool.source_id.startswith("synth"):
        train_set = synth_source(pool.image_shape, pool.num_classes,
                                 VICTIM_TRAIN_PER_CLASS, seed=derive_seed(seed, 1))
    else:
        train_set = pool
    return train_victim(arch, train_set, epochs=epochs, seed=seed)


def build_streams(args) -> tuple:
    """(meta-train stream, meta-test stream) from --sources/--victims."""
    specs = [s for s in args.sources.split(",") if s]
    merged, i = [], 0
    while i < len(specs):  # idx:<a>,<b> spans two comma-split fields
        if specs[i].startswith("idx:"):
            if i + 1 >= len(specs):
                raise UsageError("idx source needs <images>,<labels>")
            merged.append(specs[i] + "," + specs[i + 1])
            i += 2
        else:
            merged.append(specs[i])
            i += 1
    victim_paths = args.victims.split(",") if getattr(args, "victims", None) else None
    if victim_paths and len(victim_paths) != len(merged):
        raise UsageError(f"{len(victim_paths)} victims for {len(merged)} sources")
    train_sources, test_sources = [], []
    for i, spec in enumerate(merged):
        pool = load_source(spec, args.data_seed)
        train_pool, test_pool = split_meta_pools(pool, seed=SPLIT_SEED)
        if victim_paths:
            victim = load_checkpoint(victim_paths[i])
        else:
            victim = _auto_victim(train_pool, args.data_seed, i, args.victim_epochs)
        train_sources.append(StreamSource(train_pool, victim, source_id=pool.source_id))
        test_sources.append(StreamSource(test_pool, victim, source_id=pool.source_id))
    train_stream = EpisodeStream(train_sources, global_seed=derive_seed(args.seed, 0x7E57A))
    test_stream = EpisodeStream(test_sources, global_seed=derive_seed(args.seed, 0x7E57B))
    return train_stream, test_stream


def git_version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except Exception:
        pass
    return f"v{__version__}"


def write_manifest(path, args, extra: dict, started: float) -> None:
    manifest = {
        "command": args.command,
        "config": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
        "conventions": {
            "l1_norm": "mean absolute pixel value",
            "tie_rule": "argmax ties count as misclassification",
            "pixel_clip": "on for ASR evaluation, off inside loss/gradients (PGD loss clips)",
            "signal_detach": "fine-tuner input gradients are constants w.r.t. the optimizer weights",
            "csv_schema": CURVE_SCHEMA,
        },
        "version": git_version(),
        "wall_clock_s": time.perf_counter() - started,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    manifest.update(extra)
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True, default=str)
        f.write("\n")


def write_train_log(path, log) -> None:
    with open(path, "w") as f:
        f.write("step,mean_meta_loss,grad_norm,wall_time_s\n")
        for row in log:
            f.write("%d,%.6f,%.6f,%.6f\n" % (row["step"], row["mean_meta_loss"],
                                             row["grad_norm"], row["wall_time_s"]))


# ---------------------------------------------------------------------------
# subcommands


def cmd_train_victim(args) -> int:
    started = time.perf_counter()
    if args.synth:
        shape, classes, per = parse_synth_spec(args.synth)
        data = synth_source(shape, classes, per, seed=derive_seed(args.data_seed, *shape, classes))
    elif args.idx:
        parts = args.idx.split(",")
        if len(parts) != 2:
            raise UsageError("--idx needs <images>,<labels>")
        data = load_idx(parts[0], parts[1])
    elif args.cifar:
        root = Path(args.cifar)
        data = load_cifar10_bin(sorted(root.glob("*.bin")) if root.is_dir() else [root])
    else:
        raise UsageError("one of --synth/--idx/--cifar is required")
    arch = VictimArch(args.arch, data.image_shape, data.num_classes)
    model = train_victim(arch, data, epochs=args.epochs, seed=args.seed,
                         lr=args.lr, batch_size=args.batch_size)
    save_checkpoint(model, args.out)
    write_manifest(str(args.out) + ".manifest.json", args,
                   {"train_accuracy": model.train_accuracy}, started)
    print(f"wrote {args.out}  train_accuracy={model.train_accuracy:.4f}")
    return 0


def _meta_config(args) -> MetaConfig:
    return MetaConfig(T=args.T, K=args.K, truncation=args.truncation,
                      batch_tasks=args.batch_tasks, beta=args.beta,
                      weights=args.weights, grad_mode=args.grad_mode,
                      alpha=args.alpha, seed=args.seed, n_tasks=args.tasks,
                      meta_optimizer=args.meta_optimizer, out_scale=args.out_scale,
                      zo_n_dirs=args.zo_n, zo_mu=args.zo_mu)


def _attack_config(args) -> AttackConfig:
    return AttackConfig(lam=args.lam, kappa=args.kappa)


def cmd_meta_train(args) -> int:
    started = time.perf_counter()
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_stream, _ = build_streams(args)
    cfg = _meta_config(args)
    attack = _attack_config(args)
    method = args.method
    if method == "lft":
        phi, log = meta_train_lft(train_stream, cfg, attack)
        save_finetuner(phi, out_dir / "artifact.ckpt")
    elif method == "l2o":
        phi, log = meta_train_l2o(train_stream, cfg, attack)
        save_finetuner(phi, out_dir / "artifact.ckpt")
    elif method == "maml":
        theta, log = meta_train_maml(train_stream, cfg, attack)
        save_maml({train_stream.sources[0].source_id: theta}, cfg.alpha,
                  out_dir / "artifact.ckpt")
    elif method == "ensemble-maml":
        per_source = split_stream_per_source(train_stream)
        inits, logs = meta_train_ensemble_maml(per_source, cfg, attack)
        save_maml(inits, cfg.alpha, out_dir / "artifact.ckpt")
        log = [row for sid in sorted(logs) for row in logs[sid]]
    else:
        raise UsageError(f"unknown method {method!r}")
    write_train_log(out_dir / "train_log.csv", log)
    write_manifest(out_dir / "manifest.json", args,
                   {"artifact": "artifact.ckpt", "log_rows": len(log)}, started)
    print(f"wrote {out_dir / 'artifact.ckpt'}  ({len(log)} log rows)")
    return 0


def cmd_meta_test(args) -> int:
    started = time.perf_counter()
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _, test_stream = build_streams(args)
    method = args.method
    artifact = None
    if method in ("lft", "l2o"):
        if not args.artifact:
            raise UsageError(f"--artifact is required for method {method}")
        artifact = load_finetuner(args.artifact)
    elif method in ("maml", "ensemble-maml"):
        if not args.artifact:
            raise UsageError(f"--artifact is required for method {method}")
        inits, alpha = load_maml(args.artifact)
        artifact = inits
        if args.alpha is None:
            args.alpha = alpha
    elif method != "pgd":
        raise UsageError(f"unknown method {method!r}")
    tcfg = TestConfig(max_steps=args.max_steps, grad_mode=args.grad_mode,
                      alpha=args.alpha if args.alpha is not None else 0.01,
                      pgd_step_size=args.pgd_step_size, pgd_eps=args.eps_inf,
                      pgd_kappa=args.pgd_kappa,
                      zo_n_dirs=args.zo_n, zo_mu=args.zo_mu,
                      attack=AttackConfig(lam=args.lam, kappa=args.kappa))
    report = run_meta_test(method, artifact, test_stream, args.episodes,
                           tcfg, jobs=args.jobs)
    report.write_summary_json(out_dir / "report.json")
    report.write_curves_csv(out_dir / "curves.csv")
    write_manifest(out_dir / "manifest.json", args, {"summary": report.summary()},
                   started)
    s = report.summary()
    if report.episodes:
        print(f"{method}: query ASR within 100 steps "
              f"{s['query_asr_best_100']:.3f} +/- {s['query_asr_best_100_std']:.3f}, "
              f"l1@100 {s['mean_l1_at_100']:.4f}, "
              f"steps-to-100% {s['steps_to_full_asr']}")
    else:
        print(f"{method}: empty report (0 episodes)")
    return 0


def cmd_verify(args) -> int:
    sizes = tuple(int(s) for s in args.prop1_grid.split(","))
    result = verification_suite(quick=args.quick, prop1_sizes=sizes, seed=args.seed)
    text = json.dumps(result, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return 0 if result["all_pass"] else 1


# ---------------------------------------------------------------------------


def _add_source_flags(p):
    p.add_argument("--sources", required=True,
                   help="comma-separated source specs (see module docstring)")
    p.add_argument("--victims", default=None,
                   help="comma-separated victim checkpoints, one per source "
                        "(default: train a standard victim per source)")
    p.add_argument("--victim-epochs", type=int, default=20)
    p.add_argument("--data-seed", type=int, default=0,
                   help="seed for synthetic pools and auto-victims; keep fixed "
                        "across train/test commands")


def _add_meta_flags(p):
    p.add_argument("--tasks", type=int, default=200, help="meta-training task count")
    p.add_argument("--T", type=int, default=200, help="meta-steps")
    p.add_argument("--K", type=int, default=20, help="inner fine-tuning steps")
    p.add_argument("--truncation", type=int, default=None,
                   help="backprop window; must divide K (default K)")
    p.add_argument("--batch-tasks", type=int, default=4)
    p.add_argument("--beta", type=float, default=0.001, help="meta learning rate")
    p.add_argument("--weights", default="last", choices=("uniform", "linear", "last"))
    p.add_argument("--meta-optimizer", default="adam", choices=("adam", "sgd"))
    p.add_argument("--out-scale", type=float, default=0.1)


def _add_shared_flags(p):
    p.add_argument("--grad-mode", default="fo", choices=("fo", "zo"))
    p.add_argument("--zo-n", type=int, default=20, help="ZO directions per call")
    p.add_argument("--zo-mu", type=float, default=0.01, help="ZO smoothing radius")
    p.add_argument("--alpha", type=float, default=None,
                   help="inner GD rate for initialization-based methods")
    p.add_argument("--lam", type=float, default=0.1, help="L1 weight")
    p.add_argument("--kappa", type=float, default=0.0, help="margin confidence")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="metauap", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-victim", help="train and checkpoint a victim model")
    p.add_argument("--arch", required=True, choices=("mlp_tiny", "lenet5_gray", "lenet7_rgb"))
    p.add_argument("--synth", default=None, help="synth spec <C>x<H>x<W>:<classes>:<per-class>")
    p.add_argument("--idx", default=None, help="<images>,<labels> IDX pair")
    p.add_argument("--cifar", default=None, help="CIFAR-10 .bin file or directory")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_victim)

    p = sub.add_parser("meta-train", help="meta-train a fine-tuner or initialization")
    p.add_argument("--method", required=True, choices=("lft", "l2o", "maml", "ensemble-maml"))
    _add_source_flags(p)
    _add_meta_flags(p)
    _add_shared_flags(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_meta_train)

    p = sub.add_parser("meta-test", help="evaluate a method over held-out episodes")
    p.add_argument("--method", required=True,
                   choices=("lft", "l2o", "maml", "ensemble-maml", "pgd"))
    p.add_argument("--artifact", default=None, help="learned artifact checkpoint")
    _add_source_flags(p)
    _add_shared_flags(p)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--max-steps", type=int, default=200)
    p.add_argument("--pgd-step-size", type=float, default=0.01)
    p.add_argument("--pgd-kappa", type=float, default=None,
                   help="margin hysteresis inside the PGD loss (default 1.5)")
    p.add_argument("--eps-inf", type=float, default=None,
                   help="PGD L-inf radius (default 0.15 gray / 0.10 RGB)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_meta_test)

    p = sub.add_parser("verify", help="run the self-contained verification suite")
    p.add_argument("--quick", action="store_true")
    p.add_argument("--prop1-grid", default="4,8,16,32,64",
                   help="comma-separated matched support/query sizes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="also write the JSON here")
    p.set_defaults(func=cmd_verify)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
