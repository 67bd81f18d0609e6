"""Alignment, fusion, decoder, and full-network contracts."""

import numpy as np
import pytest
import torch

from metauas.config import ModelConfig
from metauas.errors import ConfigError, DataError
from metauas.segnet import (ALIGNED_STAGES, ChangeSegmenter, UNetDecoder,
                            align_hard, align_soft, fuse, load_checkpoint,
                            save_checkpoint)
from oracles import oracle_align_hard, oracle_align_soft


@pytest.fixture(scope="module")
def model():
    return ChangeSegmenter(ModelConfig(weights="random", input_size=64))


def _random_maps(rng, tie_free=False):
    b = int(rng.integers(1, 3))
    cr = int(rng.integers(2, 5))
    c = int(rng.integers(2, 7))
    hq, wq = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    hp, wp = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    q = rng.standard_normal((b, cr, hq, wq))
    p = rng.standard_normal((b, cr, hp, wp))
    pf = rng.standard_normal((b, c, hp, wp))
    if not tie_free:
        # inject exact duplicates and zero vectors to exercise tie/degenerate rules
        if hp * wp >= 2 and rng.random() < 0.5:
            p[:, :, 0, 0] = p.reshape(b, cr, -1)[:, :, -1].copy()
        if rng.random() < 0.3:
            q[0, :, 0, 0] = 0.0
        if rng.random() < 0.2:
            p[0, :, 0, 0] = 0.0
    return q, p, pf


def test_align_hard_matches_oracle_1000_trials():
    rng = np.random.default_rng(21)
    for _ in range(1000):
        q, p, pf = _random_maps(rng)
        got = align_hard(torch.from_numpy(q), torch.from_numpy(p),
                         torch.from_numpy(pf)).numpy()
        assert np.allclose(got, oracle_align_hard(q, p, pf), atol=1e-6)


def test_align_soft_matches_oracle_1000_trials():
    rng = np.random.default_rng(22)
    for _ in range(1000):
        q, p, pf = _random_maps(rng)
        temp = float(rng.choice([0.5, 1.0, 2.0]))
        got, got_w = align_soft(torch.from_numpy(q), torch.from_numpy(p),
                                torch.from_numpy(pf), temperature=temp)
        want, want_w = oracle_align_soft(q, p, pf, temperature=temp)
        assert np.allclose(got.numpy(), want, atol=1e-6)
        assert np.allclose(got_w.numpy(), want_w, atol=1e-6)


def test_soft_weights_sum_to_one_and_zero_query_is_uniform():
    rng = np.random.default_rng(23)
    q, p, pf = _random_maps(rng, tie_free=True)
    q[0, :, 0, 0] = 0.0
    _, w = align_soft(torch.from_numpy(q), torch.from_numpy(p), torch.from_numpy(pf))
    sums = w.flatten(3).sum(-1)
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)
    hp, wp = p.shape[2:]
    assert torch.allclose(w[0, 0, 0], torch.full((hp, wp), 1.0 / (hp * wp),
                                                 dtype=w.dtype), atol=1e-9)


def test_alignment_is_prompt_permutation_invariant():
    rng = np.random.default_rng(24)
    for _ in range(20):
        q, p, pf = _random_maps(rng, tie_free=True)
        b, cr, hp, wp = p.shape
        perm = rng.permutation(hp * wp)
        p_perm = p.reshape(b, cr, -1)[:, :, perm].reshape(b, cr, hp, wp)
        pf_perm = pf.reshape(b, pf.shape[1], -1)[:, :, perm].reshape(b, -1, hp, wp)
        args = (torch.from_numpy(q), torch.from_numpy(p), torch.from_numpy(pf))
        args_p = (torch.from_numpy(q), torch.from_numpy(p_perm), torch.from_numpy(pf_perm))
        assert torch.allclose(align_hard(*args), align_hard(*args_p), atol=1e-5)
        assert torch.allclose(align_soft(*args)[0], align_soft(*args_p)[0], atol=1e-5)


def test_align_validation():
    q = torch.rand(1, 4, 2, 2)
    with pytest.raises(ConfigError):
        align_hard(q, torch.rand(1, 3, 2, 2), torch.rand(1, 6, 2, 2))  # cr mismatch
    with pytest.raises(ConfigError):
        align_hard(q, torch.rand(1, 4, 2, 2), torch.rand(1, 6, 3, 3))  # spatial mismatch
    with pytest.raises(ConfigError):
        align_soft(q, torch.rand(1, 4, 2, 2), torch.rand(1, 6, 2, 2), temperature=0.0)


def test_fuse_modes():
    q = torch.rand(2, 5, 4, 4)
    p = torch.rand(2, 5, 4, 4)
    cat = fuse(q, p, "concat")
    assert cat.shape == (2, 10, 4, 4)
    assert torch.equal(cat[:, :5], q) and torch.equal(cat[:, 5:], p)
    assert torch.equal(fuse(q, p, "add"), q + p)
    assert torch.equal(fuse(q, p, "absdiff"), fuse(p, q, "absdiff"))
    assert torch.equal(fuse(q, p, "absdiff"), (q - p).abs())
    with pytest.raises(ConfigError):
        fuse(q, torch.rand(2, 4, 4, 4), "add")
    with pytest.raises(ConfigError):
        fuse(q, p, "mul")


def test_decoder_resolution_and_widths():
    dec = UNetDecoder((896, 320, 112, 32, 24), width=256)
    assert dec.widths == (256, 128, 64, 32, 16, 8)
    out = dec(torch.rand(2, 896, 2, 2), torch.rand(2, 320, 4, 4),
              torch.rand(2, 112, 8, 8), torch.rand(2, 32, 16, 16),
              torch.rand(2, 24, 32, 32))
    assert out.shape == (2, 1, 64, 64)
    with pytest.raises(ConfigError):
        UNetDecoder((896, 320, 112, 32, 24), width=100)
    with pytest.raises(ConfigError):
        UNetDecoder((896, 320, 112, 32, 24), width=16)


def test_decoder_is_input_pointwise():
    # identical batch elements must decode identically (no cross-batch mixing)
    dec = UNetDecoder((896, 320, 112, 32, 24), width=64)
    ins = [torch.rand(1, c, s, s).repeat(2, 1, 1, 1)
           for c, s in ((896, 2), (320, 4), (112, 8), (32, 16), (24, 32))]
    with torch.no_grad():
        out = dec(*ins)
    assert torch.equal(out[0], out[1])
    assert torch.isfinite(out).all()


def test_reducers_cover_aligned_stages(model):
    assert set(model.reducers) == {str(s) for s in ALIGNED_STAGES}
    reds = {int(k): (v.in_channels, v.out_channels) for k, v in model.reducers.items()}
    assert reds == {3: (56, 28), 4: (160, 80), 5: (448, 224)}
    feat = torch.rand(1, 448, 2, 2)
    assert model.reduce(5, feat).shape == (1, 224, 2, 2)
    with pytest.raises(ConfigError):
        model.reduce(2, torch.rand(1, 32, 16, 16))


def test_parameter_partition(model):
    train_n = sum(p.numel() for p in model.trainable_parameters())
    frozen_n = sum(p.numel() for p in model.parameters() if not p.requires_grad)
    assert train_n == 3_807_365
    assert frozen_n == 16_742_216
    sd = model.trainable_state_dict()
    assert sd and not any(k.startswith("encoder.") for k in sd)


def test_forward_probabilities(model):
    q = torch.rand(2, 3, 64, 64)
    p = torch.rand(2, 3, 64, 64)
    out = model(q, p)
    assert out.shape == (2, 64, 64)
    assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0
    with pytest.raises(ConfigError):
        model(q, torch.rand(2, 3, 32, 32))


def test_align_none_passes_prompt_through():
    m = ChangeSegmenter(ModelConfig(weights="random", input_size=64,
                                    align="none", fusion="absdiff"))
    f = torch.rand(1, 448, 2, 2)
    g = torch.rand(1, 448, 2, 2)
    assert torch.equal(m.align_stage(5, f, g), g)
    assert torch.equal(m.align_fuse(5, f, g), (f - g).abs())


def test_checkpoint_roundtrip(tmp_path, model):
    path = tmp_path / "ckpt.pt"
    save_checkpoint(model, path, extra={"note": "fixture", "epoch": 3})
    again, extra = load_checkpoint(path)
    assert extra["note"] == "fixture" and extra["epoch"] == 3
    assert again.cfg == model.cfg
    sd_a, sd_b = model.state_dict(), again.state_dict()
    assert sd_a.keys() == sd_b.keys()
    assert all(torch.equal(sd_a[k], sd_b[k]) for k in sd_a)
    # checkpoints carry no frozen-encoder tensors
    payload = torch.load(path, map_location="cpu", weights_only=True)
    assert not any(k.startswith("encoder.") for k in payload["state"])


def test_checkpoint_rejects_bad_payloads(tmp_path, model):
    path = save_checkpoint(model, tmp_path / "ok.pt")
    payload = torch.load(path, map_location="cpu", weights_only=True)

    bad_schema = dict(payload, schema_version=99)
    torch.save(bad_schema, tmp_path / "schema.pt")
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "schema.pt")

    state = dict(payload["state"])
    state.pop(sorted(state)[0])
    torch.save(dict(payload, state=state), tmp_path / "missing.pt")
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "missing.pt")
