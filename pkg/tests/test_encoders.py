import numpy as np
import pytest

from msalign import tensor_core as tc
from msalign.encoders import (TextBatch, encode_image_multiscale, encode_text, init_image_params,
                              init_text_params, project_scales)
from msalign.errors import ConfigurationError, InputError
from msalign.model import forward, init_params

from conftest import random_text, tiny_config


@pytest.fixture
def params(cfg):
    return init_params(cfg.replace(init_std=0.3))


def test_zero_images_give_zero_features_without_bias(cfg, params):
    feats = encode_image_multiscale(np.zeros((2, 3, 8, 8)), params, 4, use_bias=False)
    for f in feats:
        np.testing.assert_array_equal(f.data, 0.0)


def test_feature_shapes_default_pyramid():
    cfg = tiny_config(channels=8, image_size=16, scale_dims=(16, 32, 64, 128))
    params = init_image_params(np.random.default_rng(0), cfg)
    feats = encode_image_multiscale(np.random.default_rng(1).normal(size=(2, 8, 16, 16)), params, 4)
    assert [f.shape for f in feats] == [(2, 16), (2, 32), (2, 64), (2, 128)]


def test_duplicated_images_give_identical_rows(params):
    img = np.random.default_rng(2).normal(size=(1, 3, 8, 8))
    feats = encode_image_multiscale(np.concatenate([img, img]), params, 4)
    for f in feats:
        np.testing.assert_array_equal(f.data[0], f.data[1])


def test_indivisible_spatial_extent_rejected(params):
    with pytest.raises(ConfigurationError, match="divisible"):
        encode_image_multiscale(np.zeros((1, 3, 12, 12)), params, 4)


def test_identity_projection_is_identity():
    raw = [tc.Tensor(np.random.default_rng(0).normal(size=(3, 4)))]
    params = {"img.proj1.weight": np.eye(4), "img.proj1.bias": np.zeros(4)}
    out = project_scales(raw, params)
    np.testing.assert_array_equal(out[0].data, raw[0].data)


def test_projection_hand_value():
    params = {"img.proj1.weight": np.array([[1.0, 0, 0], [0, 1.0, 0]]), "img.proj1.bias": np.zeros(2)}
    out = project_scales([tc.Tensor([[1.0, 2.0, 3.0]])], params)
    np.testing.assert_array_equal(out[0].data, [[1.0, 2.0]])


def test_projection_count_mismatch(params):
    raw = [tc.Tensor(np.zeros((1, d))) for d in (4, 6, 8)]
    with pytest.raises(ConfigurationError, match="3 raw scales but 4"):
        project_scales(raw, params)


def test_single_token_cls_is_transformed_embedding(cfg, params):
    text = TextBatch([[5]], [[True]])
    out = encode_text(text, params, cfg.heads)
    x0 = params["txt.embed"][5] + params["txt.pos"][0]
    # one token attends only to itself
    local = x0 + (x0 @ params["txt.attn.wv"].T) @ params["txt.attn.wo"].T
    cls = local @ params["txt.cls.weight"].T + params["txt.cls.bias"]
    np.testing.assert_allclose(out.cls.data[0], cls, rtol=1e-12, atol=1e-14)


def test_padding_content_is_ignored(cfg, params):
    rng = np.random.default_rng(4)
    text = random_text(rng, 5, cfg.text_len, cfg.vocab)
    scrambled = np.where(text.mask, text.ids, rng.integers(0, cfg.vocab, size=text.ids.shape))
    a = encode_text(text, params, cfg.heads)
    b = encode_text(TextBatch(scrambled, text.mask), params, cfg.heads)
    np.testing.assert_array_equal(a.cls.data, b.cls.data)
    np.testing.assert_array_equal(a.local.data[text.mask], b.local.data[text.mask])


def test_padding_content_never_reaches_the_loss(cfg, params):
    rng = np.random.default_rng(5)
    images = rng.normal(size=(4, 3, 8, 8))
    text = random_text(rng, 4, cfg.text_len, cfg.vocab)
    scrambled = TextBatch(np.where(text.mask, text.ids, rng.integers(0, cfg.vocab, size=(4, 6))),
                          text.mask)
    assert forward(params, images, text, cfg)["total"].item() == \
        forward(params, images, scrambled, cfg)["total"].item()


def test_text_encoding_is_deterministic(cfg):
    text = random_text(np.random.default_rng(6), 3, cfg.text_len, cfg.vocab)
    a = encode_text(text, init_text_params(np.random.default_rng(9), cfg), cfg.heads)
    b = encode_text(text, init_text_params(np.random.default_rng(9), cfg), cfg.heads)
    np.testing.assert_array_equal(a.cls.data, b.cls.data)


def test_out_of_vocab_id_rejected(cfg, params):
    with pytest.raises(InputError, match="token id"):
        encode_text(TextBatch([[cfg.vocab]], [[True]]), params, cfg.heads)


def test_empty_text_row_rejected():
    with pytest.raises(InputError, match="at least one valid token"):
        TextBatch([[1, 0]], [[False, False]])


def test_batch_permutation_equivariance(cfg, params):
    rng = np.random.default_rng(7)
    images = rng.normal(size=(5, 3, 8, 8))
    text = random_text(rng, 5, cfg.text_len, cfg.vocab)
    perm = rng.permutation(5)
    feats = encode_image_multiscale(images, params, 4)
    feats_p = encode_image_multiscale(images[perm], params, 4)
    for f, fp in zip(feats, feats_p):
        np.testing.assert_allclose(fp.data, f.data[perm], rtol=1e-13, atol=1e-15)
    t = encode_text(text, params, cfg.heads)
    tp = encode_text(TextBatch(text.ids[perm], text.mask[perm]), params, cfg.heads)
    np.testing.assert_allclose(tp.cls.data, t.cls.data[perm], rtol=1e-13, atol=1e-15)


def test_every_parameter_gets_gradient(cfg):
    from msalign.tensor_core import GradTape, backward

    params = init_params(cfg.replace(init_std=0.3))
    rng = np.random.default_rng(8)
    images = rng.normal(size=(4, 3, 8, 8))
    text = random_text(rng, 4, cfg.text_len, cfg.vocab)
    tape = GradTape()
    live = {k: tape.watch(v) for k, v in params.items()}
    grads = backward(forward(live, images, text, cfg.replace(**{"loss.teacher_detached": False}))["total"])
    dead = [k for k, t in live.items() if not np.any(grads[t.tape_id].data)]
    # only embedding rows of unused tokens may stay at zero, never a whole tensor
    assert dead == []
