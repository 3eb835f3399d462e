"""Patch-aware self-distillation for vision transformers, at desk scale.

Modules: ``numerics`` (reverse-mode autodiff on numpy), ``vit``, ``gpc``
(neighbour cohesion selection), ``fip`` (cross-attention projection head),
``distill`` (teacher/student streams and losses), ``trainer``,
``pipeline`` (PPM I/O, synthetic corpus, augmentation), ``analysis``
(feature dumps, PCA renders, linear probe) and ``cli``.
"""

from .config import TrainConfig
from .errors import PievitError

__all__ = ["TrainConfig", "PievitError"]
