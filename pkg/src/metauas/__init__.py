"""One-prompt universal anomaly segmentation toolkit.

Synthesizes change-annotated image pairs from instance-segmentation corpora,
trains a prompt-conditioned change segmentation network over a frozen
pretrained encoder, and segments anomalies in unseen objects/textures from a
single normal prompt image, with no fine-tuning on the target data.
"""

__version__ = "0.1.0"
