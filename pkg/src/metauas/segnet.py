"""Prompt-conditioned change segmentation network.

Pieces:

* shared 1x1 channel reducers (stages 3-5) feeding the correlation;
* hard / soft feature alignment of prompt features onto query locations;
* query/prompt fusion (concat | add | absdiff) at stages 3-5;
* a UNet-style decoder over the fused deep stages plus the raw shallow query
  stages, with bilinear x2 upsampling (no transposed convolutions) and a
  1-channel sigmoid head.

Alignment functions are shape/dtype generic so they can be exercised directly
on small tensors.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import asdict
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .encoder import FeatureEncoder, _probe_images
from .errors import ConfigError, DataError

CHECKPOINT_SCHEMA_VERSION = 1
ALIGNED_STAGES = (3, 4, 5)


# ---------------------------------------------------------------------------
# Alignment
# ---------------------------------------------------------------------------


def _flatten_maps(query_red: torch.Tensor, prompt_red: torch.Tensor,
                  prompt_full: torch.Tensor):
    if query_red.ndim != 4 or prompt_red.ndim != 4 or prompt_full.ndim != 4:
        raise ConfigError("alignment expects (B, C, H, W) tensors")
    if query_red.shape[1] != prompt_red.shape[1]:
        raise ConfigError(f"reduced channel mismatch: query {query_red.shape[1]} "
                          f"vs prompt {prompt_red.shape[1]}")
    if prompt_red.shape[-2:] != prompt_full.shape[-2:]:
        raise ConfigError("prompt_red and prompt_full must share spatial dims")
    q = query_red.flatten(2).transpose(1, 2)       # B, Nq, Cr
    p = prompt_red.flatten(2).transpose(1, 2)      # B, Np, Cr
    pf = prompt_full.flatten(2).transpose(1, 2)    # B, Np, C
    return q, p, pf


def align_hard(query_red: torch.Tensor, prompt_red: torch.Tensor,
               prompt_full: torch.Tensor) -> torch.Tensor:
    """For each query location pick the most cosine-similar prompt location
    and return that location's original (pre-reduction) prompt vector.

    Ties resolve to the smallest row-major linear index; zero-norm vectors get
    similarity -inf (a query location that is itself all-zero, or a prompt map
    that is entirely zero, falls back to prompt index 0).
    """
    b, c, hp, wp = prompt_full.shape
    hq, wq = query_red.shape[-2:]
    q, p, pf = _flatten_maps(query_red, prompt_red, prompt_full)
    qn = q.norm(dim=-1, keepdim=True)
    pn = p.norm(dim=-1, keepdim=True)
    q_unit = torch.where(qn > 0, q / qn.clamp_min(torch.finfo(q.dtype).tiny), torch.zeros_like(q))
    p_unit = torch.where(pn > 0, p / pn.clamp_min(torch.finfo(p.dtype).tiny), torch.zeros_like(p))
    sims = q_unit @ p_unit.transpose(1, 2)                          # B, Nq, Np
    sims = sims.masked_fill((pn.squeeze(-1) == 0).unsqueeze(1), float("-inf"))
    sims = sims.masked_fill((qn.squeeze(-1) == 0).unsqueeze(-1), float("-inf"))
    idx = sims.argmax(dim=-1)                  # first occurrence = smallest linear index
    aligned = torch.gather(pf, 1, idx.unsqueeze(-1).expand(-1, -1, pf.shape[-1]))
    return aligned.transpose(1, 2).reshape(b, c, hq, wq)


def align_soft(query_red: torch.Tensor, prompt_red: torch.Tensor,
               prompt_full: torch.Tensor, temperature: float = 1.0
               ) -> tuple[torch.Tensor, torch.Tensor]:
    """Softmax attention over raw dot products of the reduced features.

    Returns (aligned prompt features (B, C, Hq, Wq), weights
    (B, Hq, Wq, Hp, Wp)). Weights sum to 1 over prompt locations; an all-zero
    query vector yields exactly uniform weights. Logits are unscaled dot
    products divided by `temperature` (default 1: no scaling).
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    b, c, hp, wp = prompt_full.shape
    hq, wq = query_red.shape[-2:]
    q, p, pf = _flatten_maps(query_red, prompt_red, prompt_full)
    logits = q @ p.transpose(1, 2)
    if temperature != 1.0:
        logits = logits / temperature
    weights = torch.softmax(logits, dim=-1)                        # B, Nq, Np
    aligned = weights @ pf
    return (aligned.transpose(1, 2).reshape(b, c, hq, wq),
            weights.reshape(b, hq, wq, hp, wp))


def fuse(query: torch.Tensor, prompt_aligned: torch.Tensor, mode: str) -> torch.Tensor:
    """Merge query and aligned-prompt features: concat (query channels first),
    add, or absdiff. Shapes must match exactly."""
    if query.shape != prompt_aligned.shape:
        raise ConfigError(f"fuse needs matching shapes, got {tuple(query.shape)} "
                          f"vs {tuple(prompt_aligned.shape)}")
    if mode == "concat":
        return torch.cat([query, prompt_aligned], dim=1)
    if mode == "add":
        return query + prompt_aligned
    if mode == "absdiff":
        return (query - prompt_aligned).abs()
    raise ConfigError(f"unknown fusion mode {mode!r}")


# ---------------------------------------------------------------------------
# Decoder
# ---------------------------------------------------------------------------


def _groups(ch: int) -> int:
    g = min(8, ch)
    while ch % g:
        g -= 1
    return g


class ConvBlock(nn.Module):
    """Two conv3x3 -> GroupNorm -> ReLU stages."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.GroupNorm(_groups(out_ch), out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.GroupNorm(_groups(out_ch), out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.body(x)


def _up2(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2.0, mode="bilinear", align_corners=False)


class UNetDecoder(nn.Module):
    """UNet-style decoder over (fused5, fused4, fused3, query2, query1).

    Starts at the deepest fused stage, upsamples x2 bilinearly, concatenates
    the next-shallower input, and applies a ConvBlock; widths halve from
    `width` down to width/16, with a final width/32 (>= 8) block at full
    resolution before the 1x1 head. Output logits match the input image dims.
    """

    def __init__(self, in_channels: tuple[int, int, int, int, int], width: int = 256):
        super().__init__()
        if width < 32 or width % 32:
            raise ConfigError(f"decoder width must be a multiple of 32 (>= 32), got {width}")
        c5, c4, c3, c2, c1 = in_channels
        w = [width, width // 2, width // 4, width // 8, width // 16]
        final = max(8, width // 32)
        self.widths = (*w, final)
        self.block5 = ConvBlock(c5, w[0])
        self.block4 = ConvBlock(w[0] + c4, w[1])
        self.block3 = ConvBlock(w[1] + c3, w[2])
        self.block2 = ConvBlock(w[2] + c2, w[3])
        self.block1 = ConvBlock(w[3] + c1, w[4])
        self.block0 = ConvBlock(w[4], final)
        self.head = nn.Conv2d(final, 1, 1)

    def forward(self, f5, f4, f3, q2, q1) -> torch.Tensor:
        x = self.block5(f5)
        x = self.block4(torch.cat([_up2(x), f4], dim=1))
        x = self.block3(torch.cat([_up2(x), f3], dim=1))
        x = self.block2(torch.cat([_up2(x), q2], dim=1))
        x = self.block1(torch.cat([_up2(x), q1], dim=1))
        x = self.block0(_up2(x))
        return self.head(x)


# ---------------------------------------------------------------------------
# Full network
# ---------------------------------------------------------------------------


class ChangeSegmenter(nn.Module):
    """Frozen encoder + channel reducers + alignment + fusion + UNet decoder."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.encoder = FeatureEncoder(cfg.arch, cfg.weights, cfg.encoder_seed)
        ch = self.encoder.channels
        self.reducers = nn.ModuleDict(
            {str(l): nn.Conv2d(ch[l - 1], ch[l - 1] // 2, kernel_size=1) for l in ALIGNED_STAGES})
        mult = 2 if cfg.fusion == "concat" else 1
        self.decoder = UNetDecoder(
            (ch[4] * mult, ch[3] * mult, ch[2] * mult, ch[1], ch[0]), cfg.decoder_width)
        self._calibrate_reducers()

    @torch.no_grad()
    def _calibrate_reducers(self) -> None:
        """Scale each freshly initialized reducer so attention logits (raw dot
        products of reduced features) start with roughly unit spread per query
        location. Unscaled, dots over wide feature maps land orders of
        magnitude too hot: the alignment softmax saturates to a wrong one-hot
        match and gradients stop flowing through it. Deterministic (seeded
        probe batch); trained checkpoints overwrite these weights on load."""
        feats = self.extract(_probe_images(self.cfg.encoder_seed + 2, size=128),
                             preprocessed=True)
        for stage in ALIGNED_STAGES:
            red = self.reduce(stage, feats[stage - 1])
            v = red.flatten(2).transpose(1, 2)
            spread = float((v @ v.transpose(1, 2)).std(dim=-1).mean())
            if spread > 1e-8:
                self.reducers[str(stage)].weight.data *= spread ** -0.5
                self.reducers[str(stage)].bias.data *= spread ** -0.5

    # -- plumbing -----------------------------------------------------------

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def trainable_state_dict(self) -> dict:
        return {k: v for k, v in self.state_dict().items() if not k.startswith("encoder.")}

    def reduce(self, stage: int, feat: torch.Tensor) -> torch.Tensor:
        """Shared per-stage 1x1 channel reduction (same weights for query and
        prompt features of that stage)."""
        if stage not in ALIGNED_STAGES:
            raise ConfigError(f"stage {stage} has no reducer (aligned stages: {ALIGNED_STAGES})")
        return self.reducers[str(stage)](feat)

    def align_stage(self, stage: int, query_feat: torch.Tensor,
                    prompt_feat: torch.Tensor) -> torch.Tensor:
        if self.cfg.align == "none":
            return prompt_feat
        qr = self.reduce(stage, query_feat)
        pr = self.reduce(stage, prompt_feat)
        if self.cfg.align == "hard":
            return align_hard(qr, pr, prompt_feat)
        aligned, _ = align_soft(qr, pr, prompt_feat, self.cfg.temperature)
        return aligned

    def extract(self, images: torch.Tensor, preprocessed: bool = False) -> list[torch.Tensor]:
        return self.encoder.extract_pyramid(images, preprocessed=preprocessed)

    def decode_features(self, query_feats: list[torch.Tensor],
                        prompt_feats: list[torch.Tensor]) -> torch.Tensor:
        """Logits from precomputed 5-stage pyramids (used by cached-feature
        training and prompt reuse at inference)."""
        fused = [self.align_fuse(l, query_feats[l - 1], prompt_feats[l - 1])
                 for l in ALIGNED_STAGES]
        return self.decoder(fused[2], fused[1], fused[0], query_feats[1], query_feats[0])

    def align_fuse(self, stage: int, query_feat: torch.Tensor,
                   prompt_feat: torch.Tensor) -> torch.Tensor:
        return fuse(query_feat, self.align_stage(stage, query_feat, prompt_feat), self.cfg.fusion)

    def forward_logits(self, query: torch.Tensor, prompt: torch.Tensor) -> torch.Tensor:
        if query.shape != prompt.shape:
            raise ConfigError(f"query/prompt batch shapes differ: {tuple(query.shape)} "
                              f"vs {tuple(prompt.shape)}")
        q_feats = self.extract(query)
        p_feats = self.extract(prompt)
        return self.decode_features(q_feats, p_feats)

    def forward(self, query: torch.Tensor, prompt: torch.Tensor) -> torch.Tensor:
        """Per-pixel change probabilities (B, H, W) for normalized-to-[0,1]
        RGB batches (B, 3, H, W) of identical dims."""
        return torch.sigmoid(self.forward_logits(query, prompt)).squeeze(1)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: ChangeSegmenter, path: str | Path, extra: dict | None = None) -> Path:
    """Atomic checkpoint write: trainable weights + model config, no encoder
    weights (the encoder is reconstructed from its source/seed at load)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "model_config": asdict(model.cfg),
        "state": model.trainable_state_dict(),
        "extra": dict(extra or {}),
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(payload, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path: str | Path, device: str = "cpu") -> tuple[ChangeSegmenter, dict]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location=device, weights_only=True)
    except Exception as exc:
        raise DataError(f"corrupt or unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "schema_version" not in payload:
        raise DataError(f"checkpoint {path} is missing its schema header")
    if payload["schema_version"] != CHECKPOINT_SCHEMA_VERSION:
        raise DataError(f"checkpoint {path} has schema {payload['schema_version']}, "
                        f"this build reads {CHECKPOINT_SCHEMA_VERSION}")
    try:
        cfg = ModelConfig(**payload["model_config"])
        cfg.validate()
        model = ChangeSegmenter(cfg)
    except (TypeError, KeyError) as exc:
        raise DataError(f"checkpoint {path} has a mismatched model config: {exc}") from exc
    state = payload["state"]
    expected = set(model.trainable_state_dict())
    got = set(state)
    if expected != got:
        missing = sorted(expected - got)[:5]
        extra_keys = sorted(got - expected)[:5]
        raise DataError(f"checkpoint {path} does not match the architecture "
                        f"(missing {missing}, unexpected {extra_keys})")
    model.load_state_dict(state, strict=False)
    model.to(device)
    return model, payload.get("extra", {})
