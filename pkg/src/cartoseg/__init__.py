"""cartoseg: few-shot semantic segmentation for map-like imagery.

Frozen/adapted ViT feature extraction, low-rank adaptation (LoRA, DoRA,
LoHa, LoKr), linear probing with feature-space upsampling, focal + dice
training, and pixel/panoptic evaluation, runnable end to end at desk
scale on synthetic data.
"""

__version__ = "0.1.0"
