import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from fewshot.data import episode_batch, sample_episode, synth_generate
from fewshot.errors import CapabilityError
from fewshot.explain import (
    ALPHA,
    METHODS,
    CAMWrapper,
    CamRequest,
    Heatmap,
    blend,
    cam_class_score,
    eigen_cam,
    eigen_projection,
    explain,
    explain_episode,
    grad_cam,
    grad_cam_pp,
    gradcam_pp_weights,
    gradcam_weights,
    normalize_heatmap,
    render_overlay,
    weighted_map,
)
from fewshot.models import EncoderConfig, FewShotModel, PrototypeSet, ResidualEncoder, SiameseCNN, proto_classify
from fewshot.numcore import Tensor, finite_diff_check, no_grad

from oracles import top_singular_power_iteration

SIZE = 16


def calibrated_encoder(seed=0, fd=6):
    enc = ResidualEncoder(EncoderConfig("residual", SIZE, fd, (3, 4, 4, 5), seed), dtype=np.float64)
    enc.train()
    with no_grad():
        enc(Tensor(np.random.default_rng(seed).standard_normal((8, 3, SIZE, SIZE))))
    return enc.eval()


@pytest.fixture
def wrapper():
    enc = calibrated_encoder()
    protos = PrototypeSet(Tensor(np.random.default_rng(1).standard_normal((4, 6))), {i: f"c{i}" for i in range(4)})
    return CAMWrapper(enc, protos, SIZE)


@pytest.fixture
def query():
    return np.random.default_rng(2).standard_normal((3, SIZE, SIZE))


# --- class score --------------------------------------------------------------

def test_score_zero_at_prototype():
    e = Tensor(np.array([[1.0, -2.0, 0.5]]))
    protos = PrototypeSet(Tensor(np.array([[0.0, 0.0, 0.0], [1.0, -2.0, 0.5]])), {0: "a", 1: "b"})
    assert cam_class_score(e, protos, 1).data == 0.0
    assert cam_class_score(e, protos, 0).data < 0.0


def test_score_ordering_matches_logits(wrapper, query):
    with no_grad():
        emb = wrapper.encoder(Tensor(query[None])).embedding
    logits = proto_classify(emb, wrapper.prototypes).logits.data[0]
    np.testing.assert_allclose(wrapper.scores(query), logits, atol=1e-10)


def test_score_gradient_finite_difference(wrapper, query):
    acts, grads, _ = wrapper.activations_and_grads(query, 2)

    def fn(fmap):
        return cam_class_score(wrapper.encoder.head(fmap), wrapper.prototypes, 2)

    err = finite_diff_check(fn, Tensor(acts[None].copy(), requires_grad=True), h=1e-6)
    assert err < 1e-3
    with no_grad():
        fmap = wrapper.encoder.features(Tensor(query[None]))
    x = Tensor(fmap.data, requires_grad=True)
    fn(x).backward()
    np.testing.assert_allclose(x.grad[0], grads, atol=1e-12)


def test_request_validation(wrapper, query):
    with pytest.raises(ValueError):
        CamRequest("grad_cam", query, 4, wrapper)
    with pytest.raises(ValueError):
        CamRequest("lime", query, 0, wrapper)


# --- Grad-CAM -------------------------------------------------------------------

def test_nonnegative_weights_and_maps_skip_relu():
    rng = np.random.default_rng(0)
    alpha = rng.uniform(0, 1, 5)
    acts = rng.uniform(0, 2, (5, 4, 4))
    np.testing.assert_allclose(weighted_map(alpha, acts), np.einsum("r,rij->ij", alpha, acts), atol=1e-12)


def test_single_channel_argmax():
    acts = np.random.default_rng(1).uniform(0, 1, (1, 6, 6))
    raw = weighted_map(np.array([0.7]), acts)
    np.testing.assert_allclose(raw, 0.7 * acts[0])
    assert np.argmax(raw) == np.argmax(acts[0])


def test_gradcam_weights_are_spatial_means():
    g = np.random.default_rng(2).standard_normal((3, 4, 5))
    np.testing.assert_allclose(gradcam_weights(g), g.reshape(3, -1).mean(axis=1))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_gradcam_linear_in_score(seed, c):
    rng = np.random.default_rng(seed)
    acts = np.maximum(rng.standard_normal((4, 5, 5)), 0)
    g = rng.standard_normal((4, 5, 5))
    raw = weighted_map(gradcam_weights(g), acts)
    scaled = weighted_map(gradcam_weights(c * g), acts)
    np.testing.assert_allclose(scaled, c * raw, rtol=1e-10, atol=1e-12)
    n1, d1 = normalize_heatmap(raw, 10)
    n2, d2 = normalize_heatmap(scaled, 10)
    assert d1 == d2
    np.testing.assert_allclose(n1, n2, atol=1e-6)


def test_wrapper_grad_cam_properties(wrapper, query):
    for d in range(4):
        hm = grad_cam(CamRequest("grad_cam", query, d, wrapper))
        assert hm.raw.shape == (2, 2) and hm.normalized.shape == (SIZE, SIZE)
        assert np.all(hm.raw >= 0)
        assert np.all((hm.normalized >= 0) & (hm.normalized <= 1))
        if hm.degenerate:
            assert not hm.normalized.any()
        else:
            assert hm.normalized.max() == pytest.approx(1.0)


# --- Grad-CAM++ ---------------------------------------------------------------

def test_gradcampp_matches_gradcam_single_channel_constant_gradient():
    acts = np.random.default_rng(3).uniform(0, 1, (1, 4, 4))
    g = np.full((1, 4, 4), 0.8)
    a = weighted_map(gradcam_weights(g), acts)
    b = weighted_map(gradcam_pp_weights(g, acts), acts)
    np.testing.assert_allclose(normalize_heatmap(a, 8)[0], normalize_heatmap(b, 8)[0], atol=1e-12)


def test_gradcampp_proportional_when_channel_products_equal():
    # constant per-channel gradients with equal (spatial sum x gradient) across channels
    rng = np.random.default_rng(4)
    acts = rng.uniform(0.1, 1, (3, 4, 4))
    s = acts.sum(axis=(1, 2))
    g = (2.0 / s)[:, None, None] * np.ones((3, 4, 4))
    a = gradcam_weights(g)
    b = gradcam_pp_weights(g, acts)
    ratio = b / a
    np.testing.assert_allclose(ratio, ratio[0], rtol=1e-12)
    np.testing.assert_allclose(
        normalize_heatmap(weighted_map(a, acts), 8)[0], normalize_heatmap(weighted_map(b, acts), 8)[0], atol=1e-12
    )


def test_gradcampp_closed_form_scalar():
    acts = np.array([[[1.0, 2.0], [0.0, 1.0]]])
    g = np.array([[[0.5, -1.0], [2.0, 0.0]]])
    s = acts.sum()
    expect = 0.0
    for gij in g.ravel():
        if gij > 0:
            expect += gij * gij ** 2 / (2 * gij ** 2 + s * gij ** 3)
    assert gradcam_pp_weights(g, acts)[0] == pytest.approx(expect)


def test_gradcampp_nonnegative_and_deterministic(wrapper, query):
    for d in range(4):
        r = CamRequest("grad_cam_pp", query, d, wrapper)
        a, b = grad_cam_pp(r), grad_cam_pp(r)
        assert np.all(a.normalized >= 0) and np.all(a.raw >= 0)
        np.testing.assert_array_equal(a.normalized, b.normalized)


# --- Eigen-CAM ------------------------------------------------------------------

def test_eigen_rank_one():
    u = np.array([1.0, -2.0, 0.5])
    w = np.array([0.3, -1.0, 2.0, 0.0, 1.5, -0.7])
    raw = eigen_projection(np.outer(u, w).reshape(3, 2, 3))
    np.testing.assert_allclose(raw.ravel() / raw.max(), np.abs(w) / np.abs(w).max(), atol=1e-12)


def test_eigen_sign_flip_invariant():
    acts = np.random.default_rng(5).standard_normal((4, 3, 3))
    np.testing.assert_allclose(eigen_projection(acts), eigen_projection(-acts), atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_eigen_matches_power_iteration(seed):
    rng = np.random.default_rng(seed)
    acts = np.maximum(rng.standard_normal((6, 4, 4)), 0)
    _, sigma, v = top_singular_power_iteration(acts.reshape(6, -1))
    np.testing.assert_allclose(eigen_projection(acts).ravel(), sigma * np.abs(v), atol=1e-4)


def test_eigen_independent_of_target(wrapper, query):
    maps = [eigen_cam(CamRequest("eigen_cam", query, d, wrapper)).raw for d in range(4)]
    for m in maps[1:]:
        np.testing.assert_array_equal(m, maps[0])


def test_zero_activations_degenerate():
    raw = eigen_projection(np.zeros((3, 2, 2)))
    norm, degenerate = normalize_heatmap(raw, 8)
    assert degenerate and not norm.any()
    norm, degenerate = normalize_heatmap(weighted_map(np.ones(3), np.zeros((3, 2, 2))), 8)
    assert degenerate and not norm.any()


# --- overlay ----------------------------------------------------------------------

def _decode(png):
    return np.asarray(Image.open(io.BytesIO(png)).convert("RGB"))


def test_overlay_zero_heatmap_is_blue_tint():
    img = np.random.default_rng(6).uniform(0, 1, (3, 12, 12))
    out = _decode(render_overlay(np.zeros((12, 12)), img)).astype(np.float64) / 255
    expect = (1 - ALPHA) * img + ALPHA * np.array([0.0, 0.0, 1.0])[:, None, None]
    np.testing.assert_allclose(out.transpose(2, 0, 1), expect, atol=0.5 / 255 + 1e-9)
    np.testing.assert_allclose(blend(np.zeros((12, 12)), img), expect)


def test_overlay_dimensions_and_bytes_stable():
    img = np.random.default_rng(7).uniform(0, 1, (3, 10, 14))
    h = np.random.default_rng(8).uniform(0, 1, (10, 14))
    a, b = render_overlay(h, img), render_overlay(h, img)
    assert a == b
    assert _decode(a).shape == (10, 14, 3)


def test_overlay_shape_mismatch():
    with pytest.raises(ValueError):
        render_overlay(np.zeros((4, 4)), np.zeros((3, 5, 5)))


# --- capability and batch runs ------------------------------------------------------

def test_siamese_encoder_rejected():
    enc = SiameseCNN(EncoderConfig("siamese_cnn", SIZE, 8, (4, 4)))
    protos = PrototypeSet(Tensor(np.zeros((2, 8))), {0: "a", 1: "b"})
    with pytest.raises(CapabilityError):
        CAMWrapper(enc, protos, SIZE)


def test_explain_dispatch(wrapper, query):
    for m in METHODS:
        hm = explain(CamRequest(m, query, 1, wrapper))
        assert isinstance(hm, Heatmap) and hm.method == m and hm.class_index == 1
        assert (hm.alpha is None) == (m == "eigen_cam")


@pytest.fixture(scope="module")
def small_run():
    ds = synth_generate(per_class=40, image_size=SIZE, seed=0)
    model = FewShotModel("proto", image_size=SIZE, seed=0)
    b = episode_batch(sample_episode(ds, "train", 4, 3, 3, np.random.default_rng(0)))
    model.train()
    with no_grad():
        model.episode_loss(b)
    return ds, model.eval()


def test_explain_episode_enumeration(small_run, tmp_path):
    ds, model = small_run
    index = explain_episode(model, ds, tmp_path, METHODS, n_way=4, k_shot=3, q_query=2, seed=1)
    pngs = sorted(p.name for p in tmp_path.glob("*.png"))
    assert len(pngs) == len(index) == 2 * 4 * 3 * 4
    listed = json.loads((tmp_path / "index.json").read_text())
    assert sorted(r["file"] for r in listed) == pngs
    name = pngs[0]
    qid, method, cls = name[:-4].split("__")
    assert method in METHODS and cls.startswith("class_")


def test_explain_episode_byte_identical(small_run, tmp_path):
    ds, model = small_run
    for d in ("a", "b"):
        explain_episode(model, ds, tmp_path / d, ("grad_cam",), n_way=4, k_shot=3, q_query=1, seed=3)
    fa = sorted((tmp_path / "a").iterdir())
    assert [p.name for p in fa] == [p.name for p in sorted((tmp_path / "b").iterdir())]
    assert all(p.read_bytes() == (tmp_path / "b" / p.name).read_bytes() for p in fa)


def test_explain_episode_unknown_method(small_run, tmp_path):
    with pytest.raises(ValueError):
        explain_episode(small_run[1], small_run[0], tmp_path, ("saliency",))
