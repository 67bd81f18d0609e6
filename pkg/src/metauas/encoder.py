"""Frozen pretrained encoder exposing a 5-stage feature pyramid.

Stages halve resolution successively (strides 2, 4, 8, 16, 32 relative to the
input). The encoder is frozen: parameters never receive gradients, norm layers
stay in eval mode, and a training run leaves every parameter byte-identical.

Weight sources: "torchvision" (ImageNet-pretrained, downloaded/cached by
torchvision), "random" (deterministic seeded init; reconstructable from the
seed, used where pretrained weights are unavailable), or a filesystem path to
a state dict.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torchvision import models

from .errors import ConfigError, DataError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

STRIDES = (2, 4, 8, 16, 32)

# block index ranges of torchvision's .features that make up each stage
_ARCHES = {
    "efficientnet_b4": (models.efficientnet_b4, "EfficientNet_B4_Weights",
                        ((0, 2), (2, 3), (3, 4), (4, 6), (6, 8))),
    "efficientnet_b6": (models.efficientnet_b6, "EfficientNet_B6_Weights",
                        ((0, 2), (2, 3), (3, 4), (4, 6), (6, 8))),
    "mobilenet_v2": (models.mobilenet_v2, "MobileNet_V2_Weights",
                     ((0, 2), (2, 4), (4, 7), (7, 14), (14, 18))),
}


def available_architectures() -> tuple[str, ...]:
    return tuple(sorted(_ARCHES))


def _probe_images(seed: int, n: int = 8, size: int = 64) -> torch.Tensor:
    """Smooth image-like probe batch (coarse noise upsampled, ImageNet
    normalized). Convolutions amplify smooth inputs very differently from iid
    noise, so calibration must see realistic spatial statistics."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        coarse = torch.randn(n, 3, size // 8, size // 8)
    smooth = torch.sigmoid(2.0 * nn.functional.interpolate(
        coarse, size=(size, size), mode="bilinear", align_corners=False))
    mean = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(1, 3, 1, 1)
    return (smooth - mean) / std


def _calibrate_variance(model: nn.Module, probe: torch.Tensor, eps: float = 1e-8) -> None:
    """LSUV-style init for randomly initialized backbones: scale every conv so
    its output has unit variance on a probe batch. Without this, activations
    decay multiplicatively through dozens of random layers and the deep stages
    collapse to zero signal. Runs once at construction; deterministic given
    the probe."""
    handles = []

    def hook(mod, _inp, out):
        std = float(out.detach().std())
        if std > eps:
            mod.weight.data /= std
            if mod.bias is not None:
                mod.bias.data /= std
            return out / std
        return out

    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            handles.append(m.register_forward_hook(hook))
    was_training = model.training
    model.eval()
    with torch.no_grad():
        model(probe)
    for h in handles:
        h.remove()
    model.train(was_training)


def _build_backbone(arch: str, weights: str, seed: int) -> nn.Module:
    if arch not in _ARCHES:
        raise ConfigError(f"unknown encoder architecture {arch!r}; "
                          f"available: {', '.join(available_architectures())}")
    builder, weights_enum, _ = _ARCHES[arch]
    if weights == "torchvision":
        return builder(weights=getattr(models, weights_enum).IMAGENET1K_V1)
    if weights == "random":
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            model = builder(weights=None)
        _calibrate_variance(model, _probe_images(seed))
        return model
    path = Path(weights)
    if not path.is_file():
        raise ConfigError(f"encoder weights {weights!r} is neither 'torchvision', "
                          f"'random', nor an existing state-dict file")
    model = builder(weights=None)
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    except Exception as exc:
        raise DataError(f"cannot load encoder weights from {path}: {exc}") from exc
    return model


class FeatureEncoder(nn.Module):
    """5-stage frozen feature pyramid over a torchvision backbone."""

    def __init__(self, arch: str = "efficientnet_b4", weights: str = "torchvision",
                 seed: int = 0):
        super().__init__()
        backbone = _build_backbone(arch, weights, seed)
        _, _, slices = _ARCHES[arch]
        self.arch = arch
        self.stages = nn.ModuleList(
            nn.Sequential(*[backbone.features[i] for i in range(a, b)]) for a, b in slices)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self.register_buffer("_mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("_std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        self.register_buffer("_stage_gains", torch.ones(len(self.stages)))
        if weights == "random":
            self._calibrate_stage_gains(seed)
        self.channels = self._probe_channels()

    @torch.no_grad()
    def _calibrate_stage_gains(self, seed: int) -> None:
        """Residual blocks let variance grow across a stage even after conv
        calibration; fix a per-stage output gain so every stage emits
        unit-variance features on a seeded probe batch."""
        x = _probe_images(seed + 1)
        for i, stage in enumerate(self.stages):
            x = stage(x)
            std = float(x.std())
            if std > 1e-8:
                self._stage_gains[i] = 1.0 / std
                x = x * self._stage_gains[i]

    def train(self, mode: bool = True):
        """Frozen: norm statistics must not drift, so eval mode is permanent."""
        return super().train(False)

    @torch.no_grad()
    def _probe_channels(self) -> tuple[int, ...]:
        feats = self._forward_stages(torch.zeros(1, 3, 64, 64))
        for i, (f, s) in enumerate(zip(feats, STRIDES)):
            if f.shape[-1] != 64 // s:
                raise RuntimeError(f"stage {i + 1} of {self.arch} has stride "
                                   f"{64 // f.shape[-1]}, expected {s}")
        return tuple(int(f.shape[1]) for f in feats)

    def preprocess(self, image) -> torch.Tensor:
        """Accept float images in [0, 1] (numpy H x W x 3 or torch (B,)3,H,W)
        and return the ImageNet-normalized batch tensor."""
        if isinstance(image, np.ndarray):
            if image.ndim == 3 and image.shape[2] == 3:
                t = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).unsqueeze(0)
            elif image.ndim == 4 and image.shape[3] == 3:
                t = torch.from_numpy(np.ascontiguousarray(image)).permute(0, 3, 1, 2)
            else:
                raise ConfigError(f"expected H x W x 3 image(s), got shape {image.shape}")
        else:
            t = image if image.ndim == 4 else image.unsqueeze(0)
        t = t.to(self._mean.dtype)
        return (t - self._mean) / self._std

    def _forward_stages(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for stage, gain in zip(self.stages, self._stage_gains):
            x = stage(x) * gain
            feats.append(x)
        return feats

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        return self.extract_pyramid(x)

    def extract_pyramid(self, x: torch.Tensor, preprocessed: bool = True) -> list[torch.Tensor]:
        """Five feature maps for a (B, 3, H, W) batch; H and W must be
        divisible by 32 so every stage has integral dims."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise ConfigError(f"expected a (B, 3, H, W) batch, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ConfigError(f"input dims must be divisible by 32, got {h}x{w}")
        if not preprocessed:
            x = self.preprocess(x)
        with torch.no_grad():
            return self._forward_stages(x)


@dataclass(frozen=True)
class EmbeddingVector:
    """A global image embedding with its L2 norm cached for cosine similarity."""

    values: np.ndarray
    norm: float

    @staticmethod
    def from_array(values: np.ndarray) -> "EmbeddingVector":
        v = np.asarray(values, dtype=np.float64).ravel()
        return EmbeddingVector(values=v, norm=float(np.linalg.norm(v)))

    def cosine(self, other: "EmbeddingVector") -> float:
        """Cosine similarity; -1 when either side has zero norm."""
        if self.norm == 0.0 or other.norm == 0.0:
            return -1.0
        return float(self.values @ other.values / (self.norm * other.norm))


def embed_global(stage5: torch.Tensor) -> EmbeddingVector:
    """Global-average-pool the deepest feature map into one vector.

    A constant map embeds to that constant in every channel; a single spatial
    cell embeds to exactly its channel vector.
    """
    if stage5.ndim == 4:
        if stage5.shape[0] != 1:
            raise ConfigError("embed_global expects a single image (got a batch); "
                              "use embed_global_batch instead")
        stage5 = stage5[0]
    if stage5.ndim != 3:
        raise ConfigError(f"expected a (C, H, W) feature map, got {tuple(stage5.shape)}")
    return EmbeddingVector.from_array(stage5.mean(dim=(1, 2)).cpu().numpy())


def embed_global_batch(stage5: torch.Tensor) -> list[EmbeddingVector]:
    if stage5.ndim != 4:
        raise ConfigError(f"expected a (B, C, H, W) batch, got {tuple(stage5.shape)}")
    pooled = stage5.mean(dim=(2, 3)).cpu().numpy()
    return [EmbeddingVector.from_array(v) for v in pooled]
