"""Block mask plans over the patch grid."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError


def mask_count(ratio: float, num_patches: int) -> int:
    """round(ratio * L), halves rounded up."""
    if not 0.0 <= ratio <= 1.0:
        raise ParameterError(f"mask ratio must lie in [0, 1], got {ratio}")
    return int(math.floor(ratio * num_patches + 0.5))


@dataclass(frozen=True)
class MaskPlan:
    flags: np.ndarray
    ratio: float

    @property
    def count(self) -> int:
        return int(self.flags.sum())

    def __len__(self) -> int:
        return int(self.flags.shape[0])

    @classmethod
    def empty(cls, num_patches: int) -> MaskPlan:
        return cls(np.zeros(num_patches, dtype=bool), 0.0)

    @classmethod
    def full(cls, num_patches: int) -> MaskPlan:
        return cls(np.ones(num_patches, dtype=bool), 1.0)


def sample_block_mask(grid: int, ratio: float, rng: np.random.Generator,
                      min_aspect: float = 0.3) -> MaskPlan:
    """Blockwise mask with exactly ``mask_count(ratio, grid**2)`` patches.

    Rectangles with log-uniform aspect ratio in ``[min_aspect, 1/min_aspect]``
    and area no larger than the remaining budget are drawn until the budget
    is spent; the last rectangle is trimmed in row-major order.
    """
    num = grid * grid
    target = mask_count(ratio, num)
    flags = np.zeros((grid, grid), dtype=bool)
    remaining = target
    log_lo, log_hi = math.log(min_aspect), math.log(1.0 / min_aspect)
    attempts = 0
    while remaining > 0 and attempts < 100:
        attempts += 1
        area = rng.uniform(1.0, remaining + 1e-9)
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        h = min(grid, max(1, int(round(math.sqrt(area * aspect)))))
        w = min(grid, max(1, int(round(math.sqrt(area / aspect)))))
        top = int(rng.integers(0, grid - h + 1))
        left = int(rng.integers(0, grid - w + 1))
        block = flags[top:top + h, left:left + w]
        fresh = np.flatnonzero(~block)
        if fresh.size == 0:
            continue
        take = fresh[:remaining]
        sub = block.reshape(-1)
        sub[take] = True
        flags[top:top + h, left:left + w] = sub.reshape(h, w)
        remaining -= take.size
    if remaining > 0:
        # degenerate draws only; fill leftover cells in row-major order
        free = np.flatnonzero(~flags.reshape(-1))[:remaining]
        flags.reshape(-1)[free] = True
    return MaskPlan(flags.reshape(-1), float(ratio))
