"""Few-shot open-set episodes: support set, in-distribution queries and
queries from classes absent in the support."""
from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, replace

import numpy as np
import torch

from .config import SamplingPlan
from .data import DatasetManifest, ExemplarImage, LabeledImage
from .errors import DataError


@dataclass(frozen=True)
class Episode:
    support_classes: tuple[int, ...]  # dataset class id for each slot
    support: dict[int, list[LabeledImage]]
    exemplars: dict[int, ExemplarImage]
    queries_in: list[tuple[LabeledImage, int]]
    queries_out: list[LabeledImage]

    @property
    def n_way(self) -> int:
        return len(self.support_classes)

    @property
    def k_shot(self) -> int:
        return len(self.support[0])

    @property
    def openness_labels(self) -> np.ndarray:
        return np.r_[np.zeros(len(self.queries_in), np.int64),
                     np.ones(len(self.queries_out), np.int64)]

    @property
    def open_classes(self) -> set[int]:
        return {img.class_id for img in self.queries_out}

    def sample_ids(self) -> list[str]:
        ids = [img.sample_id for slot in range(self.n_way) for img in self.support[slot]]
        ids += [img.sample_id for img, _ in self.queries_in]
        ids += [img.sample_id for img in self.queries_out]
        return ids

    def balanced(self) -> Episode:
        """Truncate the larger query side so in/out counts are equal."""
        n = min(len(self.queries_in), len(self.queries_out))
        return replace(self, queries_in=self.queries_in[:n], queries_out=self.queries_out[:n])

    def with_exemplars(self, exemplars: dict[int, ExemplarImage]) -> Episode:
        return replace(self, exemplars=dict(exemplars))


@dataclass
class EpisodeBatch:
    """Tensor view of an episode. Support rows are slot-major (slot 0's K
    samples first); ``query_slots`` is -1 for out-of-distribution queries."""

    support_x: torch.Tensor
    support_slots: torch.Tensor
    query_x: torch.Tensor
    query_slots: torch.Tensor
    exemplar_x: torch.Tensor | None
    n_way: int
    k_shot: int

    @property
    def y_open(self) -> torch.Tensor:
        return (self.query_slots < 0).to(self.support_x.dtype)

    @property
    def in_mask(self) -> torch.Tensor:
        return self.query_slots >= 0


def sample_episode(manifest: DatasetManifest, plan: SamplingPlan,
                   rng: np.random.Generator) -> Episode:
    n, k, kq, kout = plan.n_way, plan.k_shot, plan.k_query_in_per_class, plan.k_query_out_total
    classes = manifest.class_ids
    if len(classes) < n + (1 if kout > 0 else 0):
        raise DataError(
            f"manifest {manifest.name} has {len(classes)} classes; {n}-way episodes with "
            f"open queries need at least {n + 1}")
    eligible = [c for c in classes if len(manifest.samples[c]) >= k + kq]
    if len(eligible) < n:
        short = [c for c in classes if c not in eligible]
        raise DataError(
            f"only {len(eligible)} classes have >= {k + kq} samples; too small: "
            + ", ".join(str(manifest.class_names.get(c, c)) for c in short[:10]))
    picked = rng.choice(len(eligible), size=n, replace=False)
    support_classes = tuple(int(eligible[i]) for i in picked)

    support, queries_in = {}, []
    for slot, c in enumerate(support_classes):
        ids = manifest.samples[c]
        order = rng.choice(len(ids), size=k + kq, replace=False)
        support[slot] = [manifest.image(ids[i]) for i in order[:k]]
        queries_in += [(manifest.image(ids[i]), slot) for i in order[k:]]

    open_pool = [c for c in classes if c not in support_classes]
    if plan.n_open_classes is not None:
        if len(open_pool) < plan.n_open_classes:
            raise DataError(
                f"need {plan.n_open_classes} open classes, only {len(open_pool)} remain")
        sel = rng.choice(len(open_pool), size=plan.n_open_classes, replace=False)
        open_pool = sorted(open_pool[i] for i in sel)
    pairs = [sid for c in open_pool for sid in manifest.samples[c]]
    if len(pairs) < kout:
        raise DataError(f"open classes hold {len(pairs)} samples, {kout} queries requested")
    chosen = rng.choice(len(pairs), size=kout, replace=False)
    queries_out = [manifest.image(pairs[i]) for i in chosen]

    exemplars = {slot: manifest.exemplars[c] for slot, c in enumerate(support_classes)
                 if c in manifest.exemplars}
    return Episode(support_classes, support, exemplars, queries_in, queries_out)


class EpisodeStream(Sequence):
    """Indexable, reproducible sequence of episodes: episode ``i`` depends only
    on ``(seed, i)`` so streams can be resumed or materialised out of order."""

    def __init__(self, manifest: DatasetManifest, plan: SamplingPlan, count: int, seed: int):
        if count < 1:
            raise ValueError("episode count must be >= 1")
        self.manifest, self.plan, self.count, self.seed = manifest, plan, count, seed

    def __len__(self):
        return self.count

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(self.count))]
        if i < 0:
            i += self.count
        if not 0 <= i < self.count:
            raise IndexError(i)
        return sample_episode(self.manifest, self.plan, np.random.default_rng([self.seed, i]))


def episode_stream(manifest, plan, count, seed) -> EpisodeStream:
    return EpisodeStream(manifest, plan, count, seed)


def to_batch(episode: Episode, dtype=torch.float32) -> EpisodeBatch:
    n, k = episode.n_way, episode.k_shot
    sup = [img.pixels for slot in range(n) for img in episode.support[slot]]
    qry = [img.pixels for img, _ in episode.queries_in] + [img.pixels for img in episode.queries_out]
    slots = [s for _, s in episode.queries_in] + [-1] * len(episode.queries_out)
    ex = None
    if len(episode.exemplars) == n:
        ex = torch.from_numpy(np.stack([episode.exemplars[s].pixels for s in range(n)])).to(dtype)
    return EpisodeBatch(
        support_x=torch.from_numpy(np.stack(sup)).to(dtype),
        support_slots=torch.arange(n).repeat_interleave(k),
        query_x=torch.from_numpy(np.stack(qry)).to(dtype),
        query_slots=torch.tensor(slots, dtype=torch.long),
        exemplar_x=ex,
        n_way=n,
        k_shot=k,
    )
