"""Few-shot attack tasks: a support set to build the perturbation and a
disjoint query set to judge it, both from one source and one class pair.

Episode randomness is counter-based: episode i of a stream is a pure
function of (global_seed, i), so episodes can be generated in any order,
on any worker, and always come out identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import LabeledImages
from .victims import VictimModel

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """SplitMix64 finalizer: a bijective 64-bit mix."""
    z = x & MASK64
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & MASK64
    return (z ^ (z >> 31)) & MASK64


def derive_seed(base: int, *salts: int) -> int:
    """Fold extra context into a seed; each step is a SplitMix64 finalize."""
    z = base & MASK64
    for s in salts:
        z = splitmix64(z ^ splitmix64((s + 0x9E3779B97F4A7C15) & MASK64))
    return z


class InsufficientPoolError(ValueError):
    pass


@dataclass
class StreamSource:
    pool: LabeledImages
    victim: VictimModel
    source_id: str = ""

    def __post_init__(self):
        if not self.source_id:
            self.source_id = self.pool.source_id


@dataclass
class FewShotEpisode:
    support: LabeledImages
    query: LabeledImages
    victim: VictimModel
    source_id: str
    episode_seed: int


@dataclass
class EpisodeStream:
    sources: list
    mix: list = None
    global_seed: int = 0
    n_way: int = 2
    k_support: int = 2
    k_query: int = 2

    def __post_init__(self):
        if not self.sources:
            raise ValueError("stream needs at least one source")
        if self.mix is None:
            self.mix = [1.0] * len(self.sources)
        if len(self.mix) != len(self.sources):
            raise ValueError("one mix weight per source required")
        total = float(sum(self.mix))
        if total <= 0:
            raise ValueError("mix weights must sum to a positive value")
        self.mix = [float(w) / total for w in self.mix]

    @property
    def image_shapes(self) -> list:
        return [s.pool.image_shape for s in self.sources]


def sample_episode(stream: EpisodeStream, index: int) -> FewShotEpisode:
    """Deterministic episode i of the stream.

    Picks a source by mix weight, then n_way classes, then disjoint
    support/query images per class.
    """
    seed = splitmix64(stream.global_seed ^ index)
    rng = np.random.Generator(np.random.PCG64(seed))

    if len(stream.sources) == 1:
        src = stream.sources[0]
    else:
        r = rng.random()
        acc, pick = 0.0, len(stream.sources) - 1
        for i, w in enumerate(stream.mix):
            acc += w
            if r < acc:
                pick = i
                break
        src = stream.sources[pick]

    pool = src.pool
    need = stream.k_support + stream.k_query
    if pool.num_classes < stream.n_way:
        raise InsufficientPoolError(
            f"source {src.source_id!r} has {pool.num_classes} classes, need {stream.n_way}")
    for c in range(pool.num_classes):
        have = pool.class_indices(c).size
        if have < need:
            raise InsufficientPoolError(
                f"source {src.source_id!r} class {c} has {have} images, need {need}")

    classes = rng.choice(pool.num_classes, size=stream.n_way, replace=False)
    sup_idx, qry_idx = [], []
    for c in classes:
        picks = rng.choice(pool.class_indices(int(c)), size=need, replace=False)
        sup_idx.extend(picks[:stream.k_support])
        qry_idx.extend(picks[stream.k_support:])
    return FewShotEpisode(
        support=pool.subset(np.asarray(sup_idx)),
        query=pool.subset(np.asarray(qry_idx)),
        victim=src.victim,
        source_id=src.source_id,
        episode_seed=seed,
    )


def split_meta_pools(data: LabeledImages, seed: int, train_fraction: float = 0.8):
    """Disjoint per-class split into (meta-train pool, meta-test pool)."""
    train_idx, test_idx = [], []
    rng = np.random.Generator(np.random.PCG64(splitmix64(seed ^ 0x5EED5EED)))
    for c in range(data.num_classes):
        idx = data.class_indices(c)
        if idx.size < 8:
            raise InsufficientPoolError(
                f"class {c} has {idx.size} images, need at least 8 to split")
        perm = rng.permutation(idx)
        cut = int(idx.size * train_fraction)
        train_idx.extend(perm[:cut])
        test_idx.extend(perm[cut:])
    return (data.subset(np.asarray(sorted(train_idx))),
            data.subset(np.asarray(sorted(test_idx))))
