"""Training loop: BCE on change masks, AdamW, frozen encoder.

Only the reducers, decoder and head are optimized. Supports on-the-fly paired
augmentation or, when augmentation is off, a precomputed frozen-encoder
feature cache (the encoder is frozen, so features of unaugmented pairs never
change across steps).
"""

from __future__ import annotations

import csv
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from .config import AugmentConfig, ModelConfig, TrainConfig
from .errors import ConfigError, DataError, TrainingDivergedError
from .metrics import auroc
from .segnet import ChangeSegmenter, save_checkpoint
from .synth.changes import ChangePair, augment_pair
from .synth.dataset import load_manifest, load_pair, pair_rng_seed


def bce_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """Mean binary cross-entropy over all pixels; predictions are clamped to
    [eps, 1 - eps] so the loss stays finite at saturated outputs."""
    if pred.shape != target.shape:
        raise ConfigError(f"prediction/target shapes differ: {tuple(pred.shape)} "
                          f"vs {tuple(target.shape)}")
    pred = pred.clamp(eps, 1.0 - eps)
    target = target.to(pred.dtype)
    return -(target * pred.log() + (1.0 - target) * (1.0 - pred).log()).mean()


def resolve_device(setting: str) -> torch.device:
    if setting == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    if setting == "cuda" and not torch.cuda.is_available():
        raise ConfigError("train.device is 'cuda' but no CUDA device is available")
    return torch.device(setting)


class PairDataset(Dataset):
    """Synthesized pairs from a dataset directory, with optional on-the-fly
    paired augmentation (deterministic per (seed, epoch, index))."""

    def __init__(self, root: str | Path, split: str, augment: AugmentConfig | None = None,
                 seed: int = 0):
        self.root = Path(root)
        manifest = load_manifest(self.root)
        self.records = [r for r in manifest["pairs"] if r["split"] == split]
        if not self.records:
            raise DataError(f"dataset {self.root} has no pairs in split {split!r}")
        self.augment = augment if (augment and augment.enabled) else None
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, idx: int):
        prompt, query, mask = load_pair(self.root, self.records[idx])
        if self.augment is not None:
            rng = np.random.default_rng(pair_rng_seed(self.seed, f"aug:{self.epoch}:{idx}"))
            pair = augment_pair(ChangePair(prompt, query, mask, "any"), self.augment, rng)
            prompt, query, mask = pair.prompt, pair.query, pair.mask
        return (torch.from_numpy(prompt.transpose(2, 0, 1).copy()),
                torch.from_numpy(query.transpose(2, 0, 1).copy()),
                torch.from_numpy(mask.astype(np.float32)))


class CachedFeatureDataset(Dataset):
    """Frozen-encoder features precomputed once per pair (augmentation off).

    Features are kept at full precision: rare activation spikes in random
    backbones overflow fp16 to inf and poison whole batches. Prompt features
    are kept only for the aligned stages (3-5); shallow prompt features never
    reach the decoder. Sized for reduced-resolution runs (about 0.2 GB per
    1,000 pairs at 64 px); at full 256 px inputs prefer cache_features=False.
    """

    def __init__(self, model: ChangeSegmenter, pairs: PairDataset, batch_size: int,
                 device: torch.device):
        if pairs.augment is not None:
            raise ConfigError("feature caching requires augmentation to be off")
        self.entries: list[dict] = []
        loader = DataLoader(pairs, batch_size=batch_size, shuffle=False)
        with torch.no_grad():
            for prompt, query, mask in loader:
                q_feats = model.extract(query.to(device))
                p_feats = model.extract(prompt.to(device))
                for i in range(mask.shape[0]):
                    self.entries.append({
                        "q": [f[i].cpu() for f in q_feats],
                        "p": [f[i].cpu() for f in p_feats[2:]],
                        "mask": mask[i],
                    })

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, idx: int):
        e = self.entries[idx]
        return (e["q"], e["p"], e["mask"])


def _collate_cached(items):
    qs = [torch.stack([it[0][l] for it in items]) for l in range(5)]
    ps = [torch.stack([it[1][l] for it in items]) for l in range(3)]
    masks = torch.stack([it[2] for it in items])
    return qs, ps, masks


@dataclass
class TrainResult:
    checkpoint: Path
    loss_csv: Path
    history: list[dict]          # one entry per epoch


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)


def fit(dataset_dir: str | Path, model_cfg: ModelConfig, train_cfg: TrainConfig,
        out_dir: str | Path, model: ChangeSegmenter | None = None) -> TrainResult:
    """Train on the 'train' split of a synthesized dataset directory.

    Writes checkpoints/epoch_<e>.pt every checkpoint_every epochs plus
    checkpoints/final.pt, and a loss CSV. Per-epoch validation pixel-AUROC is
    logged for visibility; the final checkpoint is the last epoch (no early
    selection). Raises TrainingDivergedError on NaN/Inf loss after writing a
    diagnostic snapshot.
    """
    model_cfg.validate()
    train_cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed_everything(train_cfg.seed)
    device = resolve_device(train_cfg.device)

    if model is None:
        model = ChangeSegmenter(model_cfg)
    model.to(device)
    encoder_before = {k: v.clone() for k, v in model.encoder.state_dict().items()}

    train_set = PairDataset(dataset_dir, "train", train_cfg.augment, seed=train_cfg.seed)
    try:
        val_set: PairDataset | None = PairDataset(dataset_dir, "val")
    except DataError:
        val_set = None

    if train_cfg.cache_features:
        cached = CachedFeatureDataset(model, train_set, train_cfg.batch_size, device)
        loader = DataLoader(cached, batch_size=train_cfg.batch_size, shuffle=True,
                            collate_fn=_collate_cached,
                            generator=torch.Generator().manual_seed(train_cfg.seed))
    else:
        loader = DataLoader(train_set, batch_size=train_cfg.batch_size, shuffle=True,
                            num_workers=train_cfg.num_workers,
                            generator=torch.Generator().manual_seed(train_cfg.seed))

    optimizer = torch.optim.AdamW(model.trainable_parameters(), lr=train_cfg.lr,
                                  weight_decay=train_cfg.weight_decay)

    loss_csv = out_dir / "loss.csv"
    history: list[dict] = []
    step = 0
    with loss_csv.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "epoch", "loss"])
        for epoch in range(train_cfg.epochs):
            train_set.set_epoch(epoch)
            model.train()
            epoch_losses = []
            for batch in loader:
                optimizer.zero_grad(set_to_none=True)
                if train_cfg.cache_features:
                    q_feats, p3to5, masks = batch
                    q_feats = [f.to(device) for f in q_feats]
                    p_feats = [None, None, *(f.to(device) for f in p3to5)]
                    logits = model.decode_features(q_feats, p_feats)
                    probs = torch.sigmoid(logits).squeeze(1)
                else:
                    prompt, query, masks = batch
                    probs = model(query.to(device), prompt.to(device))
                loss = bce_loss(probs, masks.to(device))
                if not torch.isfinite(loss):
                    snap = save_checkpoint(model, out_dir / "checkpoints" / "diverged.pt",
                                           {"epoch": epoch, "step": step})
                    raise TrainingDivergedError(
                        f"loss became non-finite at step {step} (epoch {epoch}); "
                        f"diagnostic snapshot: {snap}")
                loss.backward()
                torch.nn.utils.clip_grad_norm_(model.trainable_parameters(), train_cfg.grad_clip)
                optimizer.step()
                step += 1
                epoch_losses.append(float(loss.detach()))
                if step % train_cfg.log_every == 0 or step == 1:
                    writer.writerow([step, epoch, repr(epoch_losses[-1])])
            entry = {"epoch": epoch, "train_loss": float(np.mean(epoch_losses))}
            if val_set is not None:
                entry.update(validate(model, dataset_dir, batch_size=train_cfg.batch_size,
                                      device=device))
            history.append(entry)
            if (epoch + 1) % train_cfg.checkpoint_every == 0:
                save_checkpoint(model, out_dir / "checkpoints" / f"epoch_{epoch:03d}.pt",
                                {"epoch": epoch, "history": history})

    encoder_after = model.encoder.state_dict()
    for k, before in encoder_before.items():
        if not torch.equal(before, encoder_after[k].cpu()):
            raise RuntimeError(f"frozen-encoder contract violated: {k} changed during training")

    final = save_checkpoint(model, out_dir / "checkpoints" / "final.pt",
                            {"epoch": train_cfg.epochs - 1, "history": history,
                             "seed": train_cfg.seed})
    return TrainResult(checkpoint=final, loss_csv=loss_csv, history=history)


@torch.no_grad()
def predict_pairs(model: ChangeSegmenter, dataset_dir: str | Path, split: str = "val",
                  batch_size: int = 16, device: torch.device | str = "cpu",
                  augment: AugmentConfig | None = None, seed: int = 0):
    """Anomaly maps and ground-truth masks for every pair of a split."""
    device = torch.device(device)
    ds = PairDataset(dataset_dir, split, augment=augment, seed=seed)
    loader = DataLoader(ds, batch_size=batch_size, shuffle=False)
    model.eval()
    maps, masks = [], []
    for prompt, query, mask in loader:
        probs = model(query.to(device), prompt.to(device))
        maps.append(probs.cpu().numpy())
        masks.append(mask.numpy() > 0.5)
    return np.concatenate(maps), np.concatenate(masks)


@torch.no_grad()
def validate(model: ChangeSegmenter, dataset_dir: str | Path, split: str = "val",
             batch_size: int = 16, device: torch.device | str = "cpu") -> dict:
    """Pixel-AUROC and mean BCE on a held-out split (no augmentation)."""
    maps, masks = predict_pairs(model, dataset_dir, split, batch_size, device)
    flat_scores = maps.ravel()
    flat_labels = masks.ravel().astype(int)
    loss = bce_loss(torch.from_numpy(flat_scores), torch.from_numpy(flat_labels.astype(np.float32)))
    return {"val_pixel_auroc": auroc(flat_scores, flat_labels),
            "val_bce": float(loss), "val_pairs": int(masks.shape[0])}
