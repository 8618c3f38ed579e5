"""Few-shot classification heads.

All heads take an :class:`EpisodeBatch` (or triplet arrays for the Siamese
head) and an encoder. Support and query images go through the encoder as
one batch so batch-norm statistics are shared within the episode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data.sampling import EpisodeBatch
from ..errors import CapacityError
from ..numcore import BatchNorm2d, Conv2d, Linear, Module, Tensor, ops
from .encoders import EncoderOutput, ResidualEncoder


@dataclass
class PrototypeSet:
    prototypes: Tensor  # (N, D)
    class_map: dict[int, str]


@dataclass
class ProtoOutput:
    logits: Tensor  # (Q, N) = -squared distance / temperature
    probabilities: Tensor
    predictions: np.ndarray
    distances: Tensor


@dataclass
class MatchingOutput:
    scores: Tensor  # (Q, N)
    attention: Tensor  # (Q, N*K)
    predictions: np.ndarray


@dataclass
class RelationPair:
    support_class_features: Tensor  # (N, C, H, W)
    query_features: Tensor  # (Q, C, H, W)
    scores: Tensor  # (Q, N)
    targets: np.ndarray  # (Q, N) one-hot

    @property
    def predictions(self) -> np.ndarray:
        return np.argmax(self.scores.data, axis=1)


def encode_episode(batch: EpisodeBatch, encoder: Module) -> tuple[EncoderOutput, int]:
    x = Tensor(np.concatenate([batch.support, batch.query]).astype(_param_dtype(encoder), copy=False))
    return encoder(x), len(batch.support)


def _param_dtype(module: Module):
    return module.parameters()[0].dtype


def _split(t: Tensor, n: int) -> tuple[Tensor, Tensor]:
    return t[:n], t[n:]


def class_average_matrix(labels: np.ndarray, n_way: int, dtype=np.float32, reduce: str = "mean") -> np.ndarray:
    labels = np.asarray(labels)
    onehot = (labels[None, :] == np.arange(n_way)[:, None]).astype(dtype)
    counts = onehot.sum(axis=1)
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise CapacityError(f"no support embeddings for classes {missing}")
    return onehot / counts[:, None] if reduce == "mean" else onehot


def compute_prototypes(
    support_embeddings: Tensor, labels, n_way: int | None = None, class_map: dict[int, str] | None = None
) -> PrototypeSet:
    """Per-class mean of the support embeddings."""
    labels = np.asarray(labels)
    n_way = int(labels.max()) + 1 if n_way is None else n_way
    avg = class_average_matrix(labels, n_way, support_embeddings.dtype)
    protos = ops.matmul(Tensor(avg), support_embeddings)
    return PrototypeSet(protos, class_map or {i: str(i) for i in range(n_way)})


def proto_classify(query_embeddings: Tensor, protos: PrototypeSet, temperature: float = 1.0) -> ProtoOutput:
    d = ops.pairwise_sq_dist(query_embeddings, protos.prototypes)
    logits = -d if temperature == 1.0 else -d * (1.0 / temperature)
    probs = ops.softmax(logits, axis=1)
    # argmax takes the first maximum: ties resolve to the lowest class index
    return ProtoOutput(logits, probs, np.argmax(logits.data, axis=1), d)


def proto_forward(batch: EpisodeBatch, encoder: Module) -> tuple[ProtoOutput, PrototypeSet]:
    out, ns = encode_episode(batch, encoder)
    s_emb, q_emb = _split(out.embedding, ns)
    protos = compute_prototypes(s_emb, batch.support_labels, batch.n_way, batch.class_map)
    return proto_classify(q_emb, protos), protos


def proto_episode_loss(batch: EpisodeBatch, encoder: Module) -> tuple[Tensor, ProtoOutput]:
    res, _ = proto_forward(batch, encoder)
    return ops.cross_entropy_from_logits(res.logits, batch.query_labels), res


def hybrid_forward(batch: EpisodeBatch, encoder: Module) -> ProtoOutput:
    """Shared-encoder prototype classification over a residual encoder.

    Similarity is the negative squared distance; the pairwise (Siamese)
    objective is carried implicitly by the prototype cross-entropy, so this
    is the prototypical path with a residual encoder.
    """
    if not isinstance(encoder, ResidualEncoder):
        raise TypeError("the hybrid head needs a residual encoder")
    res, _ = proto_forward(batch, encoder)
    return res


def hybrid_loss(batch: EpisodeBatch, encoder: Module) -> tuple[Tensor, ProtoOutput]:
    res = hybrid_forward(batch, encoder)
    return ops.cross_entropy_from_logits(res.logits, batch.query_labels), res


# --- matching ---------------------------------------------------------------

def matching_scores(q_emb: Tensor, s_emb: Tensor, support_labels, n_way: int) -> MatchingOutput:
    qn = ops.l2_normalize(q_emb)
    sn = ops.l2_normalize(s_emb)
    sim = ops.matmul(qn, sn.T)
    attn = ops.softmax(sim, axis=1)
    onehot = class_average_matrix(support_labels, n_way, sim.dtype, reduce="sum").T
    scores = ops.matmul(attn, Tensor(onehot))
    return MatchingOutput(scores, attn, np.argmax(scores.data, axis=1))


def matching_forward(batch: EpisodeBatch, encoder: Module) -> MatchingOutput:
    out, ns = encode_episode(batch, encoder)
    s_emb, q_emb = _split(out.embedding, ns)
    return matching_scores(q_emb, s_emb, batch.support_labels, batch.n_way)


def matching_loss(batch: EpisodeBatch, encoder: Module) -> tuple[Tensor, MatchingOutput]:
    res = matching_forward(batch, encoder)
    return ops.nll_from_probs(res.scores, batch.query_labels), res


# --- relation -----------------------------------------------------------------

class RelationModule(Module):
    """Two conv blocks, global average pooling, linear, sigmoid."""

    def __init__(self, in_channels: int, hidden: int = 32, seed: int = 0, dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng(seed + 7919)
        self.conv1 = Conv2d(2 * in_channels, hidden, 3, padding=1, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(hidden, dtype=dtype)
        self.conv2 = Conv2d(hidden, hidden, 3, padding=1, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(hidden, dtype=dtype)
        self.fc = Linear(hidden, 1, rng=rng, dtype=dtype)

    def forward(self, z: Tensor) -> Tensor:
        h = ops.relu(self.bn1(self.conv1(z)))
        h = ops.relu(self.bn2(self.conv2(h)))
        return ops.sigmoid(self.fc(ops.global_avg_pool(h)))


def relation_scores(support_fmap: Tensor, support_labels, query_fmap: Tensor, n_way: int, module: RelationModule):
    n_support = support_fmap.shape[0]
    C, H, W = support_fmap.shape[1:]
    summ = class_average_matrix(support_labels, n_way, support_fmap.dtype, reduce="sum")
    class_feats = ops.matmul(Tensor(summ), support_fmap.reshape(n_support, -1)).reshape(n_way, C, H, W)
    Q = query_fmap.shape[0]
    z = ops.concat(
        [class_feats[np.tile(np.arange(n_way), Q)], query_fmap[np.repeat(np.arange(Q), n_way)]], axis=1
    )
    scores = module(z).reshape(Q, n_way)
    return class_feats, scores


def relation_forward(batch: EpisodeBatch, encoder: ResidualEncoder, module: RelationModule) -> RelationPair:
    x = Tensor(np.concatenate([batch.support, batch.query]).astype(_param_dtype(encoder), copy=False))
    fmap = encoder.features(x)
    s_map, q_map = _split(fmap, len(batch.support))
    class_feats, scores = relation_scores(s_map, batch.support_labels, q_map, batch.n_way, module)
    targets = (batch.query_labels[:, None] == np.arange(batch.n_way)[None, :]).astype(scores.dtype)
    return RelationPair(class_feats, q_map, scores, targets)


def relation_loss(pair: RelationPair) -> Tensor:
    return ops.binary_cross_entropy(pair.scores, pair.targets)


# --- siamese -------------------------------------------------------------------

@dataclass
class PairEval:
    d_pos: np.ndarray
    d_neg: np.ndarray

    @property
    def correct(self) -> np.ndarray:
        # strict: a tie counts as incorrect
        return self.d_pos < self.d_neg

    @property
    def accuracy(self) -> float:
        return float(self.correct.mean()) if self.correct.size else 0.0


def triplet_distances(anchor: np.ndarray, positive: np.ndarray, negative: np.ndarray, encoder: Module):
    B = len(anchor)
    x = Tensor(np.concatenate([anchor, positive, negative]).astype(_param_dtype(encoder), copy=False))
    emb = encoder(x).embedding
    a, p, n = emb[:B], emb[B:2 * B], emb[2 * B:]
    dp, dn = a - p, a - n
    return (dp * dp).sum(axis=1), (dn * dn).sum(axis=1)


def siamese_triplet_step(anchor, positive, negative, encoder: Module, margin: float = 1.0) -> Tensor:
    d_pos, d_neg = triplet_distances(anchor, positive, negative, encoder)
    return ops.triplet_loss(d_pos, d_neg, margin)


def pair_eval_from_distances(d_pos, d_neg) -> PairEval:
    return PairEval(np.asarray(d_pos, dtype=np.float64), np.asarray(d_neg, dtype=np.float64))


def siamese_pair_eval(anchor, positive, negative, encoder: Module) -> PairEval:
    d_pos, d_neg = triplet_distances(anchor, positive, negative, encoder)
    return pair_eval_from_distances(d_pos.data, d_neg.data)
