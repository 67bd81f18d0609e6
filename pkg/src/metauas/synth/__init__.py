"""Synthetic change-pair generation.

Pipeline: source corpus -> (local texture changes | object-level changes)
-> optional paired augmentation -> on-disk dataset with a manifest.
"""

from .perlin import fractal_perlin, perlin_mask
from .corpus import SourceRecord, FolderCorpus, CocoCorpus, open_corpus
from .inpaint import DiffusionInpainter, ExternalInpainter, PrecomputedInpainter, make_inpainter
from .changes import (ChangePair, CHANGE_TYPES, synth_local_change, synth_object_disappear,
                      synth_object_paste, augment_pair)
from .dataset import build_dataset, iter_pairs, load_manifest, load_pair, pair_rng_seed
from .toy import generate_toy_corpus, generate_toy_anomaly_dataset

__all__ = [
    "fractal_perlin", "perlin_mask",
    "SourceRecord", "FolderCorpus", "CocoCorpus", "open_corpus",
    "DiffusionInpainter", "ExternalInpainter", "PrecomputedInpainter", "make_inpainter",
    "ChangePair", "CHANGE_TYPES", "synth_local_change", "synth_object_disappear",
    "synth_object_paste", "augment_pair",
    "build_dataset", "iter_pairs", "load_manifest", "load_pair", "pair_rng_seed",
    "generate_toy_corpus", "generate_toy_anomaly_dataset",
]
