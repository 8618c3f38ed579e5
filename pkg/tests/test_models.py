import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fewshot.data import EpisodeBatch
from fewshot.errors import CapacityError
from fewshot.models import (
    EncoderConfig,
    FewShotModel,
    PrototypeSet,
    RelationModule,
    ResidualBlock,
    ResidualEncoder,
    SiameseCNN,
    compute_prototypes,
    hybrid_forward,
    hybrid_loss,
    matching_forward,
    matching_loss,
    matching_scores,
    proto_classify,
    proto_episode_loss,
    proto_forward,
    relation_forward,
    relation_loss,
    relation_scores,
    siamese_pair_eval,
    siamese_param_count,
    siamese_triplet_step,
)
from fewshot.models.heads import pair_eval_from_distances
from fewshot.numcore import ShapeError, Tensor, cross_entropy_from_logits, l2_normalize, no_grad, pairwise_sq_dist

from oracles import softmax_scalar

F64 = np.float64


def episode(rng, n_way=4, k=5, q=10, size=16):
    return EpisodeBatch(
        rng.standard_normal((n_way * k, 3, size, size)), np.repeat(np.arange(n_way), k),
        rng.standard_normal((n_way * q, 3, size, size)), np.repeat(np.arange(n_way), q),
        n_way, {i: f"c{i}" for i in range(n_way)}, [f"q{i}" for i in range(n_way * q)],
    )


def permute_classes(batch: EpisodeBatch, perm) -> EpisodeBatch:
    """Relabel class i as perm[i] and reorder supports class-major."""
    perm = np.asarray(perm)
    s_lab = perm[batch.support_labels]
    q_lab = perm[batch.query_labels]
    order = np.argsort(s_lab, kind="stable")
    return EpisodeBatch(batch.support[order], s_lab[order], batch.query, q_lab, batch.n_way,
                        {int(perm[i]): batch.class_map[i] for i in range(batch.n_way)}, batch.query_ids)


def residual(seed=0, fd=8, size=16, dtype=F64):
    return ResidualEncoder(EncoderConfig("residual", size, fd, (4, 4, 6, 6), seed), dtype=dtype)


def collapse(encoder):
    encoder.fc.weight.data[...] = 0.0
    encoder.fc.bias.data[...] = 0.3
    return encoder


# --- encoders ---------------------------------------------------------------

def test_siamese_embedding_dim():
    enc = SiameseCNN(EncoderConfig("siamese_cnn", 64, 64, (16, 32)))
    enc.train()
    out = enc(Tensor(np.random.default_rng(0).standard_normal((2, 3, 64, 64))))
    assert out.embedding.shape == (2, 64)
    enc.eval()
    assert enc(Tensor(np.zeros((1, 3, 64, 64)))).embedding.shape == (1, 64)


def test_siamese_identical_inputs_identical_embeddings():
    enc = SiameseCNN(EncoderConfig("siamese_cnn", 16, 8, (4, 4)))
    x = np.random.default_rng(1).standard_normal((3, 3, 16, 16))
    enc.train()
    with no_grad():
        enc(Tensor(x))
    enc.eval()
    with no_grad():
        e = enc(Tensor(np.concatenate([x[:1], x[:1]]))).embedding.data
    np.testing.assert_array_equal(e[0], e[1])


def test_siamese_param_count_hand_arithmetic():
    # conv1 3*16*9+16, bn1 2*16, conv2 16*32*9+32, bn2 2*32, fc (32*16*16)*64+64
    expected = 448 + 32 + 4640 + 64 + 524352
    enc = SiameseCNN(EncoderConfig("siamese_cnn", 64, 64, (16, 32)))
    assert enc.num_parameters() == expected == siamese_param_count(64, 16, 32, 64)


def test_wrong_spatial_size_rejected():
    with pytest.raises(ShapeError):
        residual()(Tensor(np.zeros((1, 3, 20, 20))))
    with pytest.raises(ShapeError):
        SiameseCNN(EncoderConfig("siamese_cnn", 16, 8, (4, 4)))(Tensor(np.zeros((1, 3, 8, 8))))


def test_residual_shapes():
    enc = ResidualEncoder(EncoderConfig("residual", 64, 512, seed=0))
    out = enc(Tensor(np.random.default_rng(0).standard_normal((2, 3, 64, 64)).astype(np.float32)))
    assert out.embedding.shape == (2, 512)
    assert out.feature_map.shape[2:] == (8, 8)
    assert EncoderConfig("residual", 64, 512).exposes_feature_map
    assert not EncoderConfig("siamese_cnn", 64, 64, (16, 32)).exposes_feature_map


def test_encoder_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig("residual", 64, 0)
    with pytest.raises(ValueError):
        EncoderConfig("transformer", 64, 8)


def test_zeroed_residual_branch_is_identity():
    rng = np.random.default_rng(0)
    block = ResidualBlock(4, 4, 1, rng, F64)
    block.conv2.weight.data[...] = 0.0
    x = np.abs(rng.standard_normal((2, 4, 6, 6)))
    np.testing.assert_allclose(block(Tensor(x)).data, x, atol=1e-12)
    down = ResidualBlock(4, 6, 2, rng, F64)
    down.conv2.weight.data[...] = 0.0
    y = down(Tensor(x)).data
    skip = np.maximum(down.down_bn(down.down(Tensor(x))).data, 0.0)
    np.testing.assert_allclose(y, skip, atol=1e-12)


# --- prototypes -------------------------------------------------------------

def test_prototype_single_shot():
    e = Tensor(np.array([[1.0, 2.0], [3.0, -1.0]]))
    np.testing.assert_allclose(compute_prototypes(e, [0, 1]).prototypes.data, e.data)


def test_prototype_mean():
    e = Tensor(np.array([[0.0, 0.0], [2.0, 2.0], [5.0, 5.0]]))
    np.testing.assert_allclose(compute_prototypes(e, [0, 0, 1]).prototypes.data, [[1.0, 1.0], [5.0, 5.0]])


def test_prototype_identical_embeddings():
    e = Tensor(np.tile([0.5, -0.25, 2.0], (4, 1)))
    np.testing.assert_allclose(compute_prototypes(e, [0, 0, 1, 1]).prototypes.data[0], [0.5, -0.25, 2.0])


def test_prototype_missing_class():
    with pytest.raises(CapacityError):
        compute_prototypes(Tensor(np.zeros((2, 3))), [0, 0], n_way=2)


def _protos(arr):
    return PrototypeSet(Tensor(np.asarray(arr, dtype=F64)), {i: str(i) for i in range(len(arr))})


def test_classify_equidistant_uniform():
    p = _protos([[1, 0], [-1, 0], [0, 1], [0, -1]])
    out = proto_classify(Tensor(np.zeros((1, 2))), p)
    np.testing.assert_allclose(out.probabilities.data, 0.25, atol=1e-12)
    assert out.predictions[0] == 0


def test_classify_at_prototype():
    p = _protos([[0, 0], [30, 0], [0, 30], [30, 30]])
    out = proto_classify(Tensor(np.array([[0.0, 30.0]])), p)
    assert out.predictions[0] == 2
    assert out.probabilities.data[0, 2] > 1 - 1e-12


def test_classify_distances_zero_one():
    # squared distances 0 and 1 to the two prototypes
    out = proto_classify(Tensor(np.zeros((1, 1))), _protos([[0.0], [1.0]]))
    np.testing.assert_allclose(out.probabilities.data[0], softmax_scalar([0.0, -1.0]), atol=1e-12)
    np.testing.assert_allclose(out.probabilities.data[0], [0.7311, 0.2689], atol=1e-4)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6), st.integers(1, 8))
def test_argmin_distance_is_argmax_probability(seed, n, q):
    rng = np.random.default_rng(seed)
    out = proto_classify(Tensor(rng.standard_normal((q, 5))), _protos(rng.standard_normal((n, 5))))
    np.testing.assert_array_equal(np.argmin(out.distances.data, axis=1), out.predictions)
    np.testing.assert_array_equal(np.argmax(out.probabilities.data, axis=1), out.predictions)


def test_collapsed_proto_loss_ln_n():
    enc = collapse(SiameseCNN(EncoderConfig("siamese_cnn", 16, 8, (4, 4)), dtype=F64))
    loss, _ = proto_episode_loss(episode(np.random.default_rng(0)), enc)
    assert abs(loss.data - math.log(4)) < 1e-12


def test_collapsed_hybrid_loss_ln_n():
    enc = collapse(residual())
    loss, _ = hybrid_loss(episode(np.random.default_rng(1)), enc)
    assert abs(loss.data - math.log(4)) < 1e-12


def test_separated_clusters_loss_near_zero():
    q_emb = Tensor(np.array([[0.0, 0.0], [100.0, 0.0]]))
    out = proto_classify(q_emb, _protos([[0.0, 0.0], [100.0, 0.0]]))
    assert cross_entropy_from_logits(out.logits, np.array([0, 1])).data < 1e-12


def test_hybrid_logit_shape_and_equals_proto():
    b = episode(np.random.default_rng(2))
    enc = residual(fd=16)
    enc.train()
    h = hybrid_forward(b, enc)
    p, _ = proto_forward(b, enc)
    assert h.logits.shape == (40, 4)
    np.testing.assert_array_equal(h.logits.data, p.logits.data)
    np.testing.assert_array_equal(h.predictions, p.predictions)


def test_hybrid_rejects_non_residual():
    with pytest.raises(TypeError):
        hybrid_forward(episode(np.random.default_rng(0)), SiameseCNN(EncoderConfig("siamese_cnn", 16, 8, (4, 4))))


def test_prediction_invariant_under_monotone_transform():
    rng = np.random.default_rng(3)
    out = proto_classify(Tensor(rng.standard_normal((20, 4))), _protos(rng.standard_normal((4, 4))))
    sim = out.logits.data
    for f in (np.exp, lambda s: 3 * s + 7, lambda s: np.tanh(s / 10)):
        np.testing.assert_array_equal(np.argmax(f(sim), axis=1), out.predictions)


def test_proto_permutation_equivariance():
    b = episode(np.random.default_rng(4))
    enc = residual(fd=8)
    enc.train()
    perm = [2, 0, 3, 1]
    a, _ = proto_forward(b, enc)
    c, _ = proto_forward(permute_classes(b, perm), enc)
    np.testing.assert_allclose(c.logits.data[:, perm], a.logits.data, atol=1e-6)


# --- matching ---------------------------------------------------------------

def test_matching_uniform_attention():
    out = matching_scores(Tensor(np.ones((1, 3))), Tensor(np.ones((3, 3))), [0, 1, 2], 3)
    np.testing.assert_allclose(out.attention.data, 1 / 3, atol=1e-12)


def test_matching_rows_sum_to_one():
    rng = np.random.default_rng(5)
    out = matching_scores(Tensor(rng.standard_normal((7, 6))), Tensor(rng.standard_normal((12, 6))),
                          np.repeat(np.arange(4), 3), 4)
    np.testing.assert_allclose(out.attention.data.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(out.scores.data.sum(axis=1), 1.0, atol=1e-6)


def test_matching_self_similarity_dominates():
    rng = np.random.default_rng(6)
    s = rng.standard_normal((4, 6))
    out = matching_scores(Tensor(s[2:3].copy()), Tensor(s), [0, 1, 2, 3], 4)
    assert out.predictions[0] == 2


def test_collapsed_matching_loss_ln_n():
    enc = collapse(SiameseCNN(EncoderConfig("siamese_cnn", 16, 8, (4, 4)), dtype=F64))
    loss, _ = matching_loss(episode(np.random.default_rng(7), k=3, q=2), enc)
    assert abs(loss.data - math.log(4)) < 1e-12


def test_matching_permutation_equivariance():
    b = episode(np.random.default_rng(8), k=2, q=3)
    enc = residual(fd=8)
    enc.train()
    perm = [3, 1, 0, 2]
    a = matching_forward(b, enc)
    c = matching_forward(permute_classes(b, perm), enc)
    np.testing.assert_allclose(c.scores.data[:, perm], a.scores.data, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_normalized_distance_dot_identity(seed):
    rng = np.random.default_rng(seed)
    a = l2_normalize(Tensor(rng.standard_normal((5, 7))))
    b = l2_normalize(Tensor(rng.standard_normal((3, 7))))
    np.testing.assert_allclose(pairwise_sq_dist(a, b).data, 2 - 2 * a.data @ b.data.T, atol=1e-5)


# --- relation ---------------------------------------------------------------

def _relation_setup(seed=0, k=2, q=2):
    b = episode(np.random.default_rng(seed), k=k, q=q)
    enc = residual(seed)
    mod = RelationModule(6, hidden=5, seed=seed, dtype=F64)
    enc.train()
    mod.train()
    return b, enc, mod


def test_relation_scores_open_interval_and_channels():
    b, enc, mod = _relation_setup()
    pair = relation_forward(b, enc, mod)
    assert pair.scores.shape == (8, 4)
    assert np.all(pair.scores.data > 0) and np.all(pair.scores.data < 1)
    assert mod.conv1.weight.shape[1] == 2 * pair.query_features.shape[1] == 12
    np.testing.assert_array_equal(pair.targets.sum(axis=1), 1.0)


def test_relation_sum_aggregation():
    b, enc, mod = _relation_setup(k=3)
    pair = relation_forward(b, enc, mod)
    # train-mode batch norm: recompute over the same joint batch
    fmap = enc.features(Tensor(np.concatenate([b.support, b.query]))).data
    np.testing.assert_allclose(pair.support_class_features.data[1], fmap[3:6].sum(axis=0), atol=1e-10)


def test_relation_permutation_equivariance():
    rng = np.random.default_rng(9)
    s_map = Tensor(rng.standard_normal((8, 3, 2, 2)))
    q_map = Tensor(rng.standard_normal((3, 3, 2, 2)))
    mod = RelationModule(3, hidden=4, seed=1, dtype=F64)
    mod.train()
    labels = np.repeat(np.arange(4), 2)
    with no_grad():
        relation_scores(s_map, labels, q_map, 4, mod)  # populate running statistics
    mod.eval()
    _, a = relation_scores(s_map, labels, q_map, 4, mod)
    perm = np.array([1, 3, 0, 2])
    new_labels = perm[labels]
    order = np.argsort(new_labels, kind="stable")
    _, c = relation_scores(s_map[order], new_labels[order], q_map, 4, mod)
    np.testing.assert_allclose(c.data[:, perm], a.data, atol=1e-12)


def test_relation_uniform_scores_ln2():
    b, enc, mod = _relation_setup()
    mod.fc.weight.data[...] = 0.0
    mod.fc.bias.data[...] = 0.0
    assert abs(relation_loss(relation_forward(b, enc, mod)).data - math.log(2)) < 1e-12


def test_relation_perfect_scores_near_zero_loss():
    b, enc, mod = _relation_setup()
    pair = relation_forward(b, enc, mod)
    pair.scores = Tensor(pair.targets.copy())
    assert relation_loss(pair).data <= 1e-6


# --- siamese ----------------------------------------------------------------

def test_collapsed_triplet_loss_is_margin():
    enc = collapse(SiameseCNN(EncoderConfig("siamese_cnn", 16, 8, (4, 4)), dtype=F64))
    rng = np.random.default_rng(10)
    a, p, n = (rng.standard_normal((5, 3, 16, 16)) for _ in range(3))
    assert siamese_triplet_step(a, p, n, enc, margin=1.0).data == 1.0
    assert siamese_triplet_step(a, p, n, enc, margin=0.25).data == 0.25


def test_separated_triplets_zero_loss():
    enc = SiameseCNN(EncoderConfig("siamese_cnn", 8, 2, (2, 2)), dtype=F64)
    enc.fc.weight.data[...] = 0.0
    enc.fc.weight.data[0, :] = 1.0
    enc.fc.bias.data[...] = 0.0
    enc.eval()
    for bn in (enc.bn1, enc.bn2):
        bn.state.running_mean[...] = 0.0
        bn.state.running_var[...] = 1.0
        bn.state.initialized = True
    a = np.full((2, 3, 8, 8), 1.0)
    n = np.full((2, 3, 8, 8), -5.0)
    enc.conv1.weight.data[...] = 0.1
    enc.conv2.weight.data[...] = 0.1
    assert siamese_triplet_step(a, a.copy(), n, enc, margin=1.0).data == 0.0


def test_pair_eval_rule():
    ev = pair_eval_from_distances([0.1, 0.5, 0.3], [0.9, 0.5, 0.2])
    assert ev.correct.tolist() == [True, False, False]
    assert pair_eval_from_distances([0.0, 0.1], [1.0, 2.0]).accuracy == 1.0


def test_siamese_pair_eval_runs():
    model = FewShotModel("siamese", image_size=16, feature_dim=8, seed=0, channels=(4, 4))
    rng = np.random.default_rng(0)
    a, p, n = (rng.standard_normal((6, 3, 16, 16)).astype(np.float32) for _ in range(3))
    model.train()
    with no_grad():
        model.triplet_loss(a, p, n, 1.0)
    ev = siamese_pair_eval(a, a, n, model.encoder.eval())
    assert ev.correct.all()


# --- model wrapper ----------------------------------------------------------

@pytest.mark.parametrize("head", ["proto", "hybrid", "matching", "relation"])
def test_model_episode_loss_and_predict(head):
    model = FewShotModel(head, image_size=16, seed=0)
    b = episode(np.random.default_rng(11), k=2, q=2)
    loss, preds = model.episode_loss(b)
    assert loss.data >= 0 and preds.shape == (8,)
    assert model.predict_episode(b).shape == (8,)


def test_model_defaults():
    assert FewShotModel("hybrid", image_size=16).describe()["feature_dim"] == 512
    assert FewShotModel("proto", image_size=16).describe()["feature_dim"] == 64
    assert FewShotModel("siamese", image_size=16).describe()["feature_dim"] == 64


def test_relation_trainable_excludes_embedding_layer():
    model = FewShotModel("relation", image_size=16)
    names = {n for n, _ in model.named_parameters()}
    trainable = {p.name for p in model.trainable_parameters()}
    assert {n for n in names if n.startswith("encoder.fc.")} == names - trainable
