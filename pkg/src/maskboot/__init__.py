"""Self-supervised contrastive pretraining with bootstrapped segmentation masks."""

__version__ = "0.1.0"
