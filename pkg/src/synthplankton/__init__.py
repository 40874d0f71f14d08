"""Synthetic microscopy image generation toolkit.

Trains small GAN variants (baseline, FastGAN-style, StyleGAN2-style, projected
discriminator), scores them with FID/KID, flags mode collapse, and audits
generated images for memorized training samples.
"""

__version__ = "0.1.0"
