"""Frozen feature-pyramid encoder: shapes, freezing, determinism, embeddings."""

import numpy as np
import pytest
import torch

from metauas.encoder import (IMAGENET_MEAN, IMAGENET_STD, STRIDES,
                             EmbeddingVector, FeatureEncoder, embed_global,
                             embed_global_batch)
from metauas.errors import ConfigError


@pytest.fixture(scope="module")
def encoder():
    return FeatureEncoder("efficientnet_b4", weights="random", seed=0)


def test_pyramid_shapes_and_channels(encoder):
    x = torch.rand(2, 3, 256, 256)
    feats = encoder.extract_pyramid(x)
    assert len(feats) == 5
    assert encoder.channels == (24, 32, 56, 160, 448)
    for f, s, c in zip(feats, STRIDES, encoder.channels):
        assert f.shape == (2, c, 256 // s, 256 // s)


def test_alternate_backbones():
    shapes = {"mobilenet_v2": (16, 24, 32, 96, 320),
              "efficientnet_b6": (32, 40, 72, 200, 576)}
    for arch, channels in shapes.items():
        enc = FeatureEncoder(arch, weights="random", seed=0)
        assert enc.channels == channels
        feats = enc.extract_pyramid(torch.rand(1, 3, 64, 64))
        assert [f.shape[-1] for f in feats] == [32, 16, 8, 4, 2]


def test_unknown_arch_and_weights_rejected():
    with pytest.raises(ConfigError):
        FeatureEncoder("resnet50", weights="random")
    with pytest.raises(ConfigError):
        FeatureEncoder("efficientnet_b4", weights="/no/such/file.pt")


def test_input_validation(encoder):
    with pytest.raises(ConfigError):
        encoder.extract_pyramid(torch.rand(1, 3, 100, 100))   # not % 32
    with pytest.raises(ConfigError):
        encoder.extract_pyramid(torch.rand(3, 64, 64))        # missing batch dim


def test_encoder_is_frozen_and_eval_locked(encoder):
    assert all(not p.requires_grad for p in encoder.parameters())
    encoder.train(True)
    assert not encoder.training                  # train() is a no-op by contract
    x = torch.rand(1, 3, 64, 64)
    feats = encoder.extract_pyramid(x)
    assert all(not f.requires_grad for f in feats)


def test_random_weights_are_seed_deterministic():
    a = FeatureEncoder("efficientnet_b4", weights="random", seed=5)
    b = FeatureEncoder("efficientnet_b4", weights="random", seed=5)
    c = FeatureEncoder("efficientnet_b4", weights="random", seed=6)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert any(not torch.equal(sa[k], sc[k]) for k in sa)
    x = torch.rand(1, 3, 64, 64)
    fa, fb = a.extract_pyramid(x), b.extract_pyramid(x)
    assert all(torch.equal(u, v) for u, v in zip(fa, fb))


def test_random_weights_keep_deep_stages_alive(encoder):
    # image-like input: smooth, in [0, 1], then ImageNet-normalized
    rng = torch.Generator().manual_seed(3)
    coarse = torch.randn(2, 3, 8, 8, generator=rng)
    img = torch.sigmoid(2.0 * torch.nn.functional.interpolate(
        coarse, size=(64, 64), mode="bilinear", align_corners=False))
    feats = encoder.extract_pyramid(encoder.preprocess(img))
    for i, f in enumerate(feats):
        assert float(f.std()) > 1e-2, f"stage {i + 1} collapsed"
    # distinct images must stay distinguishable at the deepest stage
    assert not torch.allclose(feats[4][0], feats[4][1], atol=1e-3)


def test_preprocess_normalization(encoder):
    img = np.full((64, 64, 3), 0.5, np.float32)
    t = encoder.preprocess(img)
    assert t.shape == (1, 3, 64, 64)
    want = (0.5 - np.array(IMAGENET_MEAN)) / np.array(IMAGENET_STD)
    got = t.mean(dim=(0, 2, 3)).numpy()
    assert np.allclose(got, want, atol=1e-6)
    with pytest.raises(ConfigError):
        encoder.preprocess(np.zeros((64, 64), np.float32))    # not H x W x 3


def test_embed_global_examples():
    # constant map embeds to the constant; one-cell map embeds to its vector
    const = torch.full((7, 4, 4), 2.5)
    assert np.allclose(embed_global(const).values, 2.5)
    cell = torch.arange(6.0).reshape(6, 1, 1)
    assert np.allclose(embed_global(cell).values, np.arange(6.0))

    batch = torch.rand(3, 5, 2, 2)
    singles = [embed_global(batch[i]) for i in range(3)]
    for got, want in zip(embed_global_batch(batch), singles):
        assert np.allclose(got.values, want.values)

    with pytest.raises(ConfigError):
        embed_global(torch.rand(2, 5, 2, 2))     # batches need embed_global_batch
    with pytest.raises(ConfigError):
        embed_global_batch(torch.rand(5, 2, 2))


def test_cosine_similarity_contract():
    a = EmbeddingVector.from_array(np.array([1.0, 0.0]))
    b = EmbeddingVector.from_array(np.array([0.0, 1.0]))
    z = EmbeddingVector.from_array(np.zeros(2))
    assert a.cosine(a) == pytest.approx(1.0)
    assert a.cosine(b) == pytest.approx(0.0)
    assert a.cosine(EmbeddingVector.from_array(np.array([-2.0, 0.0]))) == pytest.approx(-1.0)
    assert a.cosine(z) == -1.0 and z.cosine(z) == -1.0
