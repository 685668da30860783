"""Structure-preserving Cycle-GAN domain adaptation for image segmentation."""

__version__ = "0.1.0"
