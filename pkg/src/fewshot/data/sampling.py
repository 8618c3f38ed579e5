"""Episodic N-way K-shot task sampling and triplet batches."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from ..errors import CapacityError
from .augment import AugmentSpec, augment
from .dataset import FewShotDataset, ImageSample, preprocess


@dataclass(frozen=True)
class Episode:
    n_way: int
    k_shot: int
    q_query: int
    support: list[tuple[ImageSample, int]]  # class-major order
    query: list[tuple[ImageSample, int]]
    class_map: dict[int, str]

    def check(self) -> None:
        """Raise AssertionError if any structural invariant is violated."""
        assert len(self.class_map) == self.n_way == len(set(self.class_map.values()))
        for part, per in ((self.support, self.k_shot), (self.query, self.q_query)):
            labels = np.array([lbl for _, lbl in part])
            assert len(part) == self.n_way * per
            assert np.array_equal(np.bincount(labels, minlength=self.n_way), np.full(self.n_way, per))
            for s, lbl in part:
                assert s.class_label == self.class_map[lbl]
        s_ids = [s.id for s, _ in self.support]
        q_ids = [s.id for s, _ in self.query]
        assert len(set(s_ids)) == len(s_ids) and len(set(q_ids)) == len(q_ids)
        assert not set(s_ids) & set(q_ids)


@dataclass
class EpisodeBatch:
    """Preprocessed arrays for one episode, ready for a model."""

    support: np.ndarray  # (N*K, 3, S, S)
    support_labels: np.ndarray
    query: np.ndarray  # (N*Q, 3, S, S)
    query_labels: np.ndarray
    n_way: int
    class_map: dict[int, str]
    query_ids: list[str]


def sample_episode(
    dataset: FewShotDataset,
    split: str,
    n_way: int,
    k_shot: int,
    q_query: int,
    rng: np.random.Generator,
) -> Episode:
    pool = dataset.samples[split]
    if n_way > len(dataset.classes):
        raise CapacityError(f"n_way={n_way} exceeds the {len(dataset.classes)} classes in the dataset")
    need = k_shot + q_query
    chosen = rng.choice(len(dataset.classes), size=n_way, replace=False)
    class_map = {i: dataset.classes[c] for i, c in enumerate(chosen)}
    for cls in class_map.values():
        have = len(pool[cls])
        if have < need:
            raise CapacityError(
                f"class {cls!r} in split {split!r} has {have} samples, needs {need} (short by {need - have})"
            )
    support, query = [], []
    for local, cls in class_map.items():
        idx = rng.permutation(len(pool[cls]))[:need]
        support += [(pool[cls][i], local) for i in idx[:k_shot]]
        query += [(pool[cls][i], local) for i in idx[k_shot:]]
    return Episode(n_way, k_shot, q_query, support, query, class_map)


def episode_batch(
    episode: Episode,
    image_size: int | None = None,
    augment_spec: AugmentSpec | None = None,
    epoch: int = 0,
) -> EpisodeBatch:
    def arrays(part):
        items = [augment(s, augment_spec, epoch) if augment_spec else s for s, _ in part]
        x = np.stack([preprocess(s, image_size) for s in items])
        return x, np.array([lbl for _, lbl in part], dtype=np.intp)

    xs, ys = arrays(episode.support)
    xq, yq = arrays(episode.query)
    return EpisodeBatch(xs, ys, xq, yq, episode.n_way, dict(episode.class_map), [s.id for s, _ in episode.query])


@dataclass
class TripletBatch:
    anchors: list[ImageSample]
    positives: list[ImageSample]
    negatives: list[ImageSample]

    def __len__(self) -> int:
        return len(self.anchors)

    def arrays(self, image_size: int | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return tuple(np.stack([preprocess(s, image_size) for s in part]) for part in (self.anchors, self.positives, self.negatives))


def triplet_batches(
    dataset: FewShotDataset,
    split: str,
    batch_size: int = 32,
    rng: np.random.Generator | None = None,
    n_batches: int | None = None,
) -> Iterator[TripletBatch]:
    """Yield batches of (anchor, positive, negative) triplets.

    One pass visits every sample of the split as an anchor once, in a
    random order; the last batch is topped up with extra random anchors so
    every batch holds exactly ``batch_size`` triplets. ``n_batches``
    overrides the pass length.
    """
    rng = rng if rng is not None else np.random.default_rng()
    pool = dataset.samples[split]
    classes = [c for c in dataset.classes if pool.get(c)]
    if len(classes) < 2:
        raise CapacityError(f"split {split!r} has fewer than 2 classes; triplets need a negative class")
    for c in classes:
        if len(pool[c]) < 2:
            raise CapacityError(f"class {c!r} in split {split!r} has {len(pool[c])} sample(s); positives need 2")
    flat = [(c, i) for c in classes for i in range(len(pool[c]))]
    if n_batches is None:
        n_batches = -(-len(flat) // batch_size)
    order = list(rng.permutation(len(flat)))
    while len(order) < n_batches * batch_size:
        order += list(rng.permutation(len(flat)))
    for b in range(n_batches):
        anchors, positives, negatives = [], [], []
        for k in order[b * batch_size:(b + 1) * batch_size]:
            c, i = flat[k]
            j = int(rng.integers(len(pool[c]) - 1))
            j += j >= i
            nc = classes[int(rng.integers(len(classes) - 1))]
            if nc == c:
                nc = classes[-1]
            anchors.append(pool[c][i])
            positives.append(pool[c][j])
            negatives.append(pool[nc][int(rng.integers(len(pool[nc])))])
        yield TripletBatch(anchors, positives, negatives)
