"""Perceptual color difference for photographic images.

Classical CIE formulas (CIELAB, CIE94, CMC, CIEDE2000, S-CIELAB) and
CD-Net, a lightweight learned metric, with training, evaluation and
metric-property probes.
"""

__version__ = "0.1.0"
