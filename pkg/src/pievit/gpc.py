"""Geospatial pattern cohesion: cosine scoring of a patch against its spatial
neighbours and top-k selection of the most cohesive ones.

Selection runs on plain numpy arrays; indices it returns are constants for
the autodiff tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, DimensionError, ParameterError

RANGES = (3, 5, 7)
TOP_KS = (2, 3, 4)


@dataclass(frozen=True)
class NeighborSpec:
    range: int = 3
    k: int = 3

    def __post_init__(self):
        if self.range < 1 or self.range % 2 == 0:
            raise ParameterError(f"neighbourhood range must be a positive odd integer, got {self.range}")
        if not 1 <= self.k <= self.range ** 2 - 1:
            raise ParameterError(f"top-k {self.k} incompatible with range {self.range}")


@dataclass(frozen=True)
class CohesionSelection:
    indices: np.ndarray   # (L, k) int
    scores: np.ndarray    # (L, k) float, each row non-increasing

    @property
    def k(self) -> int:
        return self.indices.shape[1]


def _norms(x: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(x * x, axis=-1))


def cohesion_score(xi, xj, eps: float = 0.0) -> float:
    """Cosine similarity of two embeddings.

    With ``eps == 0`` a zero-norm input raises; a positive ``eps`` is added
    to the denominator instead (the in-training fallback).
    """
    xi = np.asarray(xi, dtype=np.float64)
    xj = np.asarray(xj, dtype=np.float64)
    if xi.shape != xj.shape:
        raise DimensionError(f"embedding shapes differ: {xi.shape} vs {xj.shape}")
    ni, nj = _norms(xi), _norms(xj)
    if eps == 0.0 and (ni == 0.0 or nj == 0.0):
        raise DegenerateInputError("cohesion score undefined for a zero-norm embedding")
    return float(np.sum(xi * xj, axis=-1) / (ni * nj + eps))


def _window_offsets(radius: int, inner: int = -1) -> list[tuple[int, int]]:
    """Offsets with Chebyshev distance in (inner, radius], row-major order."""
    return [(dr, dc) for dr in range(-radius, radius + 1) for dc in range(-radius, radius + 1)
            if inner < max(abs(dr), abs(dc)) <= radius and (dr, dc) != (0, 0)]


def neighbors_of(i: int, range_: int, grid: int) -> list[int]:
    """In-bounds indices of the centred ``range_ x range_`` window around ``i``."""
    if not 0 <= i < grid * grid:
        raise IndexError(f"patch index {i} outside a {grid}x{grid} grid")
    r, c = divmod(i, grid)
    out = []
    for dr, dc in _window_offsets(range_ // 2):
        rr, cc = r + dr, c + dc
        if 0 <= rr < grid and 0 <= cc < grid:
            out.append(rr * grid + cc)
    return out


def _candidate_table(grid: int, offsets) -> np.ndarray:
    """(L, len(offsets)) neighbour indices, -1 where out of bounds."""
    rows, cols = np.divmod(np.arange(grid * grid), grid)
    table = np.full((grid * grid, len(offsets)), -1, dtype=np.intp)
    for m, (dr, dc) in enumerate(offsets):
        rr, cc = rows + dr, cols + dc
        ok = (rr >= 0) & (rr < grid) & (cc >= 0) & (cc < grid)
        table[ok, m] = rr[ok] * grid + cc[ok]
    return table


def _scores_for(emb: np.ndarray, norms: np.ndarray, table: np.ndarray, eps: float) -> np.ndarray:
    valid = table >= 0
    safe = np.where(valid, table, 0)
    dots = np.sum(emb[:, None, :] * emb[safe], axis=-1)
    s = dots / (norms[:, None] * norms[safe] + eps)
    return np.where(valid, s, -np.inf)


def _top(scores: np.ndarray, table: np.ndarray, count: int):
    # candidates are in increasing index order per row, so a stable sort on
    # -score breaks ties towards the lower index
    order = np.argsort(-scores, axis=1, kind="stable")[:, :count]
    return np.take_along_axis(table, order, 1), np.take_along_axis(scores, order, 1)


def select_topk(embeddings, grid: int, spec: NeighborSpec, eps: float = 0.0) -> CohesionSelection:
    """Top-k most cohesive neighbours of every patch.

    Patches whose window holds fewer than k neighbours are topped up from
    successive enclosing rings (next window size minus the current one),
    then from the whole grid; if the grid itself runs out, the best
    neighbour is repeated. Every row is finally ordered by descending score
    with ties to the lower index.
    """
    emb = np.asarray(embeddings.data if hasattr(embeddings, "data") else embeddings, dtype=np.float64)
    num = grid * grid
    if emb.ndim != 2 or emb.shape[0] != num:
        raise DimensionError(f"expected ({num}, d) embeddings, got {emb.shape}")
    norms = _norms(emb)
    if eps == 0.0 and np.any(norms == 0.0):
        raise DegenerateInputError("zero-norm patch embedding; pass eps > 0 to score it anyway")
    k = spec.k

    table = _candidate_table(grid, _window_offsets(spec.range // 2))
    scores = _scores_for(emb, norms, table, eps)
    idx, sc = _top(scores, table, min(k, table.shape[1]))
    idx = np.concatenate([idx, np.full((num, k - idx.shape[1]), -1, dtype=np.intp)], axis=1)
    sc = np.concatenate([sc, np.full((num, k - sc.shape[1]), -np.inf)], axis=1)
    have = np.isfinite(sc).sum(axis=1)
    short = np.flatnonzero(have < k)
    for i in short:
        idx[i], sc[i] = _fill_row(emb, norms, i, grid, spec, idx[i], sc[i], int(have[i]), eps)
    return CohesionSelection(idx, sc)


def _fill_row(emb, norms, i, grid, spec, idx, sc, have, eps):
    k = spec.k
    chosen = [int(j) for j in idx[:have]]
    vals = [float(s) for s in sc[:have]]
    radius = spec.range // 2
    r, c = divmod(i, grid)

    def score(j):
        return float(np.sum(emb[i] * emb[j], axis=-1) / (norms[i] * norms[j] + eps))

    # enclosing rings first
    while len(chosen) < k and radius < grid:
        ring = []
        for dr, dc in _window_offsets(radius + 1, inner=radius):
            rr, cc = r + dr, c + dc
            if 0 <= rr < grid and 0 <= cc < grid:
                ring.append(rr * grid + cc)
        ring.sort()
        ranked = sorted(((-score(j), j) for j in ring if j not in chosen))
        for neg, j in ranked[:k - len(chosen)]:
            chosen.append(j)
            vals.append(-neg)
        radius += 1
    # rings exhaust the grid, so anything still missing is a true deficit
    if len(chosen) < k:
        others = sorted((-score(j), j) for j in range(grid * grid) if j != i and j not in chosen)
        for neg, j in others[:k - len(chosen)]:
            chosen.append(j)
            vals.append(-neg)
    if not chosen:
        raise DegenerateInputError("a 1x1 grid has no neighbours to select")
    while len(chosen) < k:
        best = max(range(len(chosen)), key=lambda m: (vals[m], -chosen[m]))
        chosen.append(chosen[best])
        vals.append(vals[best])
    order = sorted(range(k), key=lambda m: (-vals[m], chosen[m]))
    return np.array([chosen[m] for m in order], dtype=np.intp), np.array([vals[m] for m in order])


def fourth_patch_fallback(i: int, embeddings, grid: int, selected=None, eps: float = 0.0) -> int | None:
    """Best patch of the 5x5-minus-3x3 ring around a corner patch.

    Falls back to the best patch anywhere on the grid outside ``selected``
    when the ring is empty; returns None when nothing is left.
    """
    emb = np.asarray(embeddings.data if hasattr(embeddings, "data") else embeddings, dtype=np.float64)
    r, c = divmod(i, grid)
    if r not in (0, grid - 1) or c not in (0, grid - 1):
        raise ParameterError(f"patch {i} is not a corner of a {grid}x{grid} grid")
    taken = set(neighbors_of(i, 3, grid) if selected is None else selected) | {i}
    ring = sorted(set(neighbors_of(i, 5, grid)) - set(neighbors_of(i, 3, grid)) - taken)
    pool = ring or [j for j in range(grid * grid) if j not in taken]
    if not pool:
        return None
    return min(pool, key=lambda j: (-cohesion_score(emb[i], emb[j], eps), j))
