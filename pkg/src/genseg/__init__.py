"""End-to-end generative data augmentation for segmentation, desk scale.

A mask-to-image generator with a searchable architecture, a conditional
patch discriminator, and a small U-Net segmenter are trained jointly by a
trilevel gradient scheme: one-step adversarial updates, one-step segmenter
updates on synthetic plus real pairs, and architecture updates driven by
validation hypergradients chained through both inner steps.
"""

__version__ = "0.1.0"
