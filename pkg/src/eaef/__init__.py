"""RGB-thermal feature fusion with explicit interaction and complement attention.

Submodules: ``tensor`` (arrays, ops, reverse-mode tape), ``io`` (dump format,
PGM/PPM), ``fusion`` (the fusion block), ``network`` (dual-encoder
segmentation model, losses, SGD, checkpoints), ``data`` (synthetic scenes and
metrics), ``config``/``experiment``/``cli`` (the command-line harness).
"""

__version__ = "0.1.0"
