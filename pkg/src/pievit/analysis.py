"""Frozen-feature extraction, two-stage PCA patch visualisation and a
linear probe on CLS features."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .checkpoint import Checkpoint
from .config import TrainConfig
from .distill import ModelConfig
from .errors import DataError, DegenerateInputError, DimensionError, ParameterError
from .numerics import Tensor
from . import vit

log = logging.getLogger(__name__)

STREAMS = ("student", "teacher")


# --------------------------------------------------------------------------
# features

@dataclass
class FeatureDump:
    cls: np.ndarray                       # (N, d)
    patches: np.ndarray                   # (N, L, d)
    grid: int
    extractor: str = "student"
    sources: list[str] = field(default_factory=list)
    labels: np.ndarray | None = None      # (N,) int, -1 when unknown

    def __len__(self) -> int:
        return self.cls.shape[0]

    def to_checkpoint(self) -> Checkpoint:
        meta = [f"extractor = {self.extractor}", f"grid = {self.grid}"]
        meta += [f"source.{n} = {s}" for n, s in enumerate(self.sources)]
        rec = {"cls": self.cls, "patches": self.patches}
        if self.labels is not None:
            rec["labels"] = np.asarray(self.labels, dtype=np.float64)
        return Checkpoint(0, "\n".join(meta) + "\n", rec)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> FeatureDump:
        meta = {}
        for line in ckpt.config_text.splitlines():
            if "=" in line:
                k, v = (s.strip() for s in line.split("=", 1))
                meta[k] = v
        if "cls" not in ckpt.records or "grid" not in meta:
            raise DataError("file is not a feature dump")
        n = ckpt.records["cls"].shape[0]
        labels = ckpt.records.get("labels")
        return cls(ckpt.records["cls"], ckpt.records["patches"], int(meta["grid"]),
                   meta.get("extractor", "student"),
                   [meta.get(f"source.{i}", "") for i in range(n)],
                   None if labels is None else labels.astype(int))


def stream_params(ckpt: Checkpoint, stream: str) -> tuple[TrainConfig, dict[str, Tensor]]:
    if stream not in STREAMS:
        raise ParameterError(f"stream must be one of {STREAMS}, got {stream!r}")
    cfg = TrainConfig.from_text(ckpt.config_text)
    params = {k: Tensor(v) for k, v in ckpt.group(stream).items()}
    return cfg, params


def extract_features(params: dict[str, Tensor], images, model: ModelConfig,
                     stream: str = "student", batch_size: int = 32,
                     sources=None, labels=None) -> FeatureDump:
    """Unmasked, unaugmented encoder pass; no tape is recorded."""
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim == 3:
        imgs = imgs[None]
    size = model.vit.image_size
    if imgs.shape[1:] != (size, size, model.vit.channels):
        raise DimensionError(f"images {imgs.shape[1:]} do not match model input ({size}, {size}, 3)")
    cls_rows, patch_rows = [], []
    with nx.no_grad():
        for start in range(0, len(imgs), batch_size):
            rows = vit.patchify(imgs[start:start + batch_size], model.vit.patch_size, size)
            tokens = vit.forward(rows, params, model.vit)
            cls_rows.append(tokens.cls.data[:, 0, :])
            patch_rows.append(tokens.patches.data)
    lab = None if labels is None else np.array([-1 if x is None else int(x) for x in labels])
    return FeatureDump(np.concatenate(cls_rows), np.concatenate(patch_rows), model.vit.grid,
                       stream, list(sources or []), lab)


# --------------------------------------------------------------------------
# PCA

@dataclass
class PCAResult:
    mean: np.ndarray          # (d,)
    basis: np.ndarray         # (c, d), orthonormal rows
    eigenvalues: np.ndarray   # (c,), descending

    def project(self, rows: np.ndarray) -> np.ndarray:
        return (np.asarray(rows) - self.mean) @ self.basis.T

    def reconstruct(self, coords: np.ndarray) -> np.ndarray:
        return coords @ self.basis + self.mean


def pca_fit(rows, components: int, rank_tol: float = 1e-10) -> PCAResult:
    """Principal components by eigendecomposition of the covariance.

    Each basis row is signed so its largest-magnitude coordinate is
    positive. Components with (relative) zero variance are dropped with a
    warning, so fewer than ``components`` rows may come back.
    """
    x = np.asarray(rows, dtype=np.float64)
    n, d = x.shape
    if n <= components and components > 1:
        raise ParameterError(f"need more rows ({n}) than components ({components})")
    if components > d:
        raise ParameterError(f"cannot extract {components} components from {d} dimensions")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(n - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(-vals, kind="stable")[:components]
    vals, basis = vals[order], vecs[:, order].T.copy()
    top = max(float(vals[0]) if vals.size else 0.0, 0.0)
    keep = vals > rank_tol * max(top, 1e-300) if top > 0 else np.zeros_like(vals, dtype=bool)
    if not keep.all():
        log.warning("rank deficient: %d of %d requested components have variance",
                    int(keep.sum()), components)
        vals, basis = vals[keep], basis[keep]
    for r in range(basis.shape[0]):
        j = int(np.argmax(np.abs(basis[r])))
        if basis[r, j] < 0:
            basis[r] = -basis[r]
    return PCAResult(mean, basis, np.maximum(vals, 0.0))


def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(axis=0), x.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return (x - lo) / span


@dataclass
class PCAViz:
    fg_mask: np.ndarray      # (grid, grid) bool
    rgb: np.ndarray          # (grid, grid, 3) uint8, black where not foreground
    degenerate: bool = False


def foreground_split(rows: np.ndarray, threshold: float = 0.5, flip_fg: bool = False):
    """First-component threshold; foreground is the smaller side unless flipped.

    Returns (mask, degenerate).
    """
    first = pca_fit(rows, 1)
    if first.basis.shape[0] == 0:
        log.warning("patch features have no variance; treating every patch as foreground")
        return np.ones(len(rows), dtype=bool), True
    score = _minmax(first.project(rows)[:, 0])
    fg = score > threshold
    if fg.sum() > (~fg).sum():
        fg = score < threshold
    if flip_fg:
        fg = ~fg
    if not fg.any():
        raise DegenerateInputError("foreground is empty after thresholding; try flipping polarity (--flip-fg)")
    return fg, False


def pca_visualize(patch_sets, grid: int, threshold: float = 0.5, flip_fg: bool = False,
                  pooled: bool = True) -> list[PCAViz]:
    """Two-stage PCA rendering of patch features.

    Stage one splits foreground from background on the first component
    (pooled across all images, or per image); stage two fits three fresh
    components on foreground rows and maps them to RGB.
    """
    sets = [np.asarray(p, dtype=np.float64) for p in patch_sets]
    if not sets:
        raise DataError("no patch features to visualise")
    for p in sets:
        if p.shape[0] != grid * grid:
            raise DimensionError(f"patch set of {p.shape[0]} rows does not fill a {grid}x{grid} grid")
    rows = np.concatenate(sets)
    if pooled:
        fg, degenerate = foreground_split(rows, threshold, flip_fg)
    else:
        parts = [foreground_split(p, threshold, flip_fg) for p in sets]
        fg = np.concatenate([m for m, _ in parts])
        degenerate = any(dg for _, dg in parts)

    fg_rows = rows[fg]
    colors = np.zeros((len(rows), 3))
    ncomp = min(3, fg_rows.shape[1], max(fg_rows.shape[0] - 1, 1))
    if fg_rows.shape[0] > 1:
        second = pca_fit(fg_rows, ncomp)
        if second.basis.shape[0] < 3:
            degenerate = degenerate or second.basis.shape[0] == 0
        coords = second.project(fg_rows)
        colors[fg, :coords.shape[1]] = _minmax(coords) if len(coords) else coords
    rgb_all = np.clip(np.round(colors * 255.0), 0, 255).astype(np.uint8)
    rgb_all[~fg] = 0

    out = []
    num = grid * grid
    for n in range(len(sets)):
        sl = slice(n * num, (n + 1) * num)
        out.append(PCAViz(fg[sl].reshape(grid, grid), rgb_all[sl].reshape(grid, grid, 3), degenerate))
    return out


def upscale(rgb: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(rgb, factor, axis=0), factor, axis=1)


# --------------------------------------------------------------------------
# linear probe

@dataclass
class ProbeResult:
    accuracy: float
    degenerate: bool = False
    train_accuracy: float = float("nan")


def linear_probe(train_x, train_y, test_x, test_y, epochs: int = 300, lr: float = 0.5,
                 l2: float = 1e-4, standardize: bool = True) -> ProbeResult:
    """Multinomial logistic regression by full-batch gradient descent.

    Features are z-scored with training statistics when ``standardize``.
    Deterministic: weights start at zero.
    """
    xtr = np.asarray(train_x, dtype=np.float64)
    xte = np.asarray(test_x, dtype=np.float64)
    ytr = np.asarray(train_y, dtype=int)
    yte = np.asarray(test_y, dtype=int)
    classes = np.unique(ytr)
    missing = np.setdiff1d(np.unique(yte), classes)
    if missing.size:
        raise DataError(f"test labels {missing.tolist()} never appear in the training set")
    if classes.size == 1:
        log.warning("probe is degenerate: a single class in the training labels")
        return ProbeResult(float(np.mean(yte == classes[0])), True, 1.0)
    if standardize:
        mu, sd = xtr.mean(axis=0), xtr.std(axis=0)
        sd = np.where(sd > 1e-12, sd, 1.0)
        xtr, xte = (xtr - mu) / sd, (xte - mu) / sd
    lookup = {c: n for n, c in enumerate(classes)}
    yi = np.array([lookup[c] for c in ytr])
    onehot = np.eye(classes.size)[yi]
    w = np.zeros((xtr.shape[1], classes.size))
    b = np.zeros(classes.size)
    n = len(xtr)
    for _ in range(epochs):
        logits = xtr @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        w -= lr * (xtr.T @ g + l2 * w)
        b -= lr * g.sum(axis=0)
    pred_tr = classes[np.argmax(xtr @ w + b, axis=1)]
    pred = classes[np.argmax(xte @ w + b, axis=1)]
    return ProbeResult(float(np.mean(pred == yte)), False, float(np.mean(pred_tr == ytr)))


def split_train_test(labels, test_fraction: float = 0.25, seed: int = 0):
    """Stratified index split."""
    labels = np.asarray(labels)
    rng = np.random.default_rng([seed, 7])
    train, test = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        cut = int(round(idx.size * test_fraction))
        test.extend(idx[:cut])
        train.extend(idx[cut:])
    return np.sort(np.array(train, dtype=int)), np.sort(np.array(test, dtype=int))
