"""Dual-encoder contracts: shapes, pooling asymmetry, masking, determinism."""

import numpy as np
import pytest

from kgfusion import autodiff as ad
from kgfusion.autodiff import ShapeError
from kgfusion.encoders import DualEncoders, EncoderConfig, patchify
from kgfusion.tokenizer import Tokenizer, default_vocab

CFG = EncoderConfig(d_o=32, width=32, n_layers=1, n_heads=2, l_text=8,
                    image_size=16, patch_size=8, vocab_size=512, drop_path_rate=0.1)


@pytest.fixture(scope="module")
def enc():
    tok = Tokenizer(default_vocab(CFG.vocab_size), CFG.l_text)
    return DualEncoders(CFG, tok, np.random.default_rng(5), np.float64)


@pytest.fixture(scope="module")
def images(rng):
    return [rng.random((16, 16, 3)).astype(np.float32) for _ in range(3)]


def test_patchify_layout():
    img = np.arange(2 * 4 * 4 * 1, dtype=np.float32).reshape(2, 4, 4, 1)
    patches = patchify(img, 2)
    assert patches.shape == (2, 4, 4)
    # first patch of the first image is its top-left 2x2 block, row-major
    np.testing.assert_array_equal(patches[0, 0], [0, 1, 4, 5])


def test_text_feature_map_shape(enc):
    fm = enc.encode_texts(["red fox", "a small blue square"])
    assert fm.features.shape == (2, CFG.l_text, CFG.d_o)
    assert fm.token_mask.shape == (2, CFG.l_text)
    assert fm.modality == "text"


def test_image_feature_map_shape(enc, images):
    fm = enc.encode_images(images)
    assert fm.features.shape == (3, CFG.l_image, CFG.d_o)
    assert fm.token_mask.all()
    assert fm.modality == "image"


def test_image_geometry_rejected(enc, rng):
    with pytest.raises(ShapeError, match="expected images"):
        enc.encode_images([rng.random((15, 16, 3))])


def test_one_patch_change_moves_every_position(enc, images):
    # attention mixes globally, so a single-patch edit reaches all positions
    edited = images[0].copy()
    edited[:8, :8] += 0.5
    a = enc.encode_images([images[0]]).features.data[0]
    b = enc.encode_images([edited]).features.data[0]
    assert (np.abs(a - b).max(axis=1) > 1e-9).all()


def test_eval_mode_is_deterministic(enc, images):
    a = enc.encode_images(images).features.data
    b = enc.encode_images(images).features.data
    np.testing.assert_array_equal(a, b)
    t1 = enc.encode_texts(["red fox"]).features.data
    t2 = enc.encode_texts(["red fox"]).features.data
    np.testing.assert_array_equal(t1, t2)


def test_training_mode_uses_the_rng(enc, images):
    # drop path active: same rng seed reproduces, different seeds diverge
    a = enc.encode_images(images, rng=np.random.default_rng(3), training=True).features.data
    b = enc.encode_images(images, rng=np.random.default_rng(3), training=True).features.data
    c = enc.encode_images(images, rng=np.random.default_rng(4), training=True).features.data
    np.testing.assert_array_equal(a, b)
    assert np.abs(a - c).max() > 0


def test_relation_vector_shape_and_padding_blindness(enc):
    vec = enc.encode_relations(["is a", "image of"])
    assert vec.shape == (2, CFG.d_o)
    # identical phrase, one with trailing noise beyond the mask: tokenization
    # pads both to l_text, so pooled outputs agree exactly
    a = enc.encode_relations(["is a"]).data
    b = enc.encode_relations(["is a "]).data
    np.testing.assert_array_equal(a, b)


def test_empty_relation_name_rejected(enc):
    with pytest.raises(ShapeError, match="empty"):
        enc.encode_relations(["is a", "  "])


def test_pooled_is_masked_mean(enc):
    fm = enc.encode_texts(["red fox jumps"])
    pooled = enc.pooled(fm).data[0]
    keep = fm.token_mask[0].astype(bool)
    np.testing.assert_allclose(pooled, fm.features.data[0][keep].mean(axis=0), atol=1e-12)


def test_gradient_reaches_every_parameter(enc, images):
    # no dead parameters: a loss over both towers' outputs touches everything
    ad.zero_grads(enc.params())
    fm_t = enc.encode_texts(["red fox", "blue car over there"])
    fm_i = enc.encode_images(images)
    rel = enc.encode_relations(["is a"])
    loss = ad.add(ad.add(ad.mean(ad.mul(fm_t.features, fm_t.features)),
                         ad.mean(ad.mul(fm_i.features, fm_i.features))),
                  ad.mean(ad.mul(rel, rel)))
    loss.backward()
    dead = [n for n, p in enc.named_params()
            if p.grad is None or not np.abs(p.grad).max() > 0]
    assert dead == []
