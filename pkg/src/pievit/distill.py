"""Dual-stream self-distillation: teacher/student forwards, the CLS and
masked-image-modeling losses, stop-gradient, EMA and teacher centering."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import fip, gpc, vit
from . import numerics as nx
from .errors import DimensionError, ParameterError
from .fip import FIPConfig
from .gpc import CohesionSelection, NeighborSpec
from .masking import MaskPlan, mask_count, sample_block_mask
from .numerics import Tensor
from .pipeline import AugConfig, augment
from .vit import ViTConfig

log = logging.getLogger(__name__)

__all__ = [
    "DistillConfig", "ModelConfig", "DualStreamState", "ViewPair", "TeacherOutput",
    "StudentOutput", "Losses", "MaskPlan", "mask_count", "sample_block_mask",
    "init_state", "make_view_pair", "teacher_forward", "student_forward",
    "teacher_distribution", "compute_losses", "ema_update", "center_update",
]


@dataclass(frozen=True)
class ModelConfig:
    vit: ViTConfig = field(default_factory=ViTConfig)
    fip: FIPConfig = field(default_factory=FIPConfig)

    def __post_init__(self):
        if self.vit.dim != self.fip.dim:
            raise DimensionError(f"encoder width {self.vit.dim} != head width {self.fip.dim}")


@dataclass(frozen=True)
class DistillConfig:
    neighborhood: int = 3
    top_k: int = 3
    use_gpc: bool = True
    aggregate: str = "mean"          # x_ap: mean of selected neighbours, or "center"
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    center_momentum: float = 0.9
    mim_normalize: bool = True
    teacher_sees_masked: bool = False
    mask_ratio_range: tuple[float, float] = (0.1, 0.5)
    gpc_eps: float = 1e-12

    def __post_init__(self):
        lo, hi = self.mask_ratio_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ParameterError(f"mask ratio range {self.mask_ratio_range} invalid")
        if self.use_gpc:
            NeighborSpec(self.neighborhood, self.top_k)
        for name in ("student_temp", "teacher_temp"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive")
        if not 0.0 <= self.center_momentum <= 1.0:
            raise ParameterError("center_momentum must lie in [0, 1]")

    @property
    def neighbor_spec(self) -> NeighborSpec:
        return NeighborSpec(self.neighborhood, self.top_k)


@dataclass
class DualStreamState:
    student: dict[str, Tensor]
    teacher: dict[str, Tensor]
    center: np.ndarray            # (1, K), CLS-level teacher centre
    center_patch: np.ndarray      # (1, K), patch-level teacher centre
    step: int = 0


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {**vit.param_shapes(cfg.vit), **fip.param_shapes(cfg.fip)}


def init_state(cfg: ModelConfig, seed: int) -> DualStreamState:
    """Student initialised from ``seed``; teacher is an exact copy."""
    rng = np.random.default_rng([seed, 0xC0FFEE])
    student = {**vit.init_params(cfg.vit, rng), **fip.init_params(cfg.fip, rng)}
    teacher = {k: Tensor(v.data.copy()) for k, v in student.items()}
    k = cfg.fip.out_dim
    return DualStreamState(student, teacher, np.zeros((1, k)), np.zeros((1, k)), 0)


# --------------------------------------------------------------------------
# views

@dataclass
class ViewPair:
    u: np.ndarray
    v: np.ndarray
    mask_u: MaskPlan
    mask_v: MaskPlan

    @property
    def u_hat(self) -> tuple[np.ndarray, MaskPlan]:
        return self.u, self.mask_u

    @property
    def v_hat(self) -> tuple[np.ndarray, MaskPlan]:
        return self.v, self.mask_v


def make_view_pair(image, aug: AugConfig, rng: np.random.Generator, grid: int,
                   ratio_range: tuple[float, float] = (0.1, 0.5),
                   ratio: float | None = None) -> ViewPair:
    """Two augmented global views, each with its own block mask.

    ``ratio`` forces the mask ratio; otherwise it is drawn uniformly from
    ``ratio_range`` per view.
    """
    u = augment(image, aug, rng).pixels
    v = augment(image, aug, rng).pixels
    ru = rng.uniform(*ratio_range) if ratio is None else ratio
    mu = sample_block_mask(grid, ru, rng)
    rv = rng.uniform(*ratio_range) if ratio is None else ratio
    mv = sample_block_mask(grid, rv, rng)
    return ViewPair(u, v, mu, mv)


# --------------------------------------------------------------------------
# forwards

@dataclass
class TeacherOutput:
    cls_logits: np.ndarray        # (B, K), raw
    patch_logits: np.ndarray      # (B, L, K), raw
    cls_dist: np.ndarray          # (B, K), centred and sharpened
    patch_dists: np.ndarray       # (B, L, K)
    patch_embeddings: np.ndarray  # (B, L, d)
    selection: list[CohesionSelection] | None


@dataclass
class StudentOutput:
    cls_logp: Tensor              # (B, K) log-probabilities
    patch_logp: Tensor            # (B, L, K)

    @property
    def cls_dist(self) -> np.ndarray:
        return np.exp(self.cls_logp.data)

    @property
    def patch_dists(self) -> np.ndarray:
        return np.exp(self.patch_logp.data)


def _rows(pixels, cfg: ViTConfig) -> Tensor:
    if isinstance(pixels, Tensor):
        return pixels
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    return vit.patchify(arr, cfg.patch_size, cfg.image_size)


def _flags(plans, batch: int, num: int) -> np.ndarray | None:
    if plans is None:
        return None
    if isinstance(plans, MaskPlan):
        plans = [plans]
    if isinstance(plans, (list, tuple)):
        flags = np.stack([p.flags if isinstance(p, MaskPlan) else np.asarray(p, bool) for p in plans])
    else:
        flags = np.asarray(plans, dtype=bool).reshape(-1, num)
    if flags.shape != (batch, num):
        raise DimensionError(f"mask plans {flags.shape} do not match batch ({batch}, {num})")
    return flags


def teacher_distribution(logits: np.ndarray, center: np.ndarray, temperature: float) -> np.ndarray:
    """softmax((logits - center) / temperature) over the last axis."""
    return nx.softmax(Tensor(np.asarray(logits) - center), temperature).data


def encoder_heads(params, pixels, model: ModelConfig, plans=None):
    """Encoder tokens plus CLS-level logits; shared by both streams."""
    rows = _rows(pixels, model.vit)
    flags = _flags(plans, rows.shape[0], model.vit.num_patches)
    tokens = vit.forward(rows, params, model.vit, flags)
    batch = rows.shape[0]
    cls_logits = fip.fip_logits(tokens.cls, tokens.patches, params, model.fip, "cls")
    return tokens, cls_logits.reshape(batch, model.fip.out_dim)


def teacher_forward(state: DualStreamState, pixels, model: ModelConfig, dcfg: DistillConfig,
                    plans=None) -> TeacherOutput:
    """Detached teacher pass: encode, select neighbours, FIP at both levels."""
    params = state.teacher
    with nx.no_grad():
        tokens, cls_logits = encoder_heads(params, pixels, model, plans)
        patches = tokens.patches
        if dcfg.use_gpc:
            spec = dcfg.neighbor_spec
            sels = [gpc.select_topk(patches.data[b], model.vit.grid, spec, dcfg.gpc_eps)
                    for b in range(patches.shape[0])]
            bundle = fip.build_patch_bundle(patches, sels, dcfg.aggregate)
        else:
            sels = None
            bundle = fip.build_patch_bundle(patches, None)
        patch_logits = fip.patch_logits(bundle, params, model.fip)
    cls_dist = teacher_distribution(cls_logits.data, state.center, dcfg.teacher_temp)
    patch_dists = teacher_distribution(patch_logits.data, state.center_patch, dcfg.teacher_temp)
    return TeacherOutput(cls_logits.data, patch_logits.data, cls_dist, patch_dists,
                         patches.data, sels)


def student_forward(state: DualStreamState, pixels, plans, model: ModelConfig,
                    dcfg: DistillConfig) -> StudentOutput:
    """Student pass on masked views.

    The CLS token goes through the FIP blocks as a query over all patch
    tokens; patch tokens go straight into the patch-level MLP head.
    """
    params = state.student
    tokens, cls_logits = encoder_heads(params, pixels, model, plans)
    patch_logits = fip.mlp_head(tokens.patches, params, "fip.head_patch.")
    return StudentOutput(nx.log_softmax(cls_logits, dcfg.student_temp),
                         nx.log_softmax(patch_logits, dcfg.student_temp))


# --------------------------------------------------------------------------
# losses

@dataclass
class Losses:
    cls_v_u: Tensor     # teacher(v) -> student(u_hat)
    cls_u_v: Tensor     # teacher(u) -> student(v_hat)
    mim_u: Tensor
    mim_v: Tensor

    @property
    def cls(self) -> Tensor:
        return self.cls_v_u + self.cls_u_v

    @property
    def mim(self) -> Tensor:
        return self.mim_u + self.mim_v

    @property
    def total(self) -> Tensor:
        return self.cls_v_u + self.cls_u_v + self.mim_u + self.mim_v

    def values(self) -> dict[str, float]:
        return {"L_cls": self.cls.item(), "L_mim": self.mim.item(), "L_total": self.total.item()}


def cls_loss(teacher_dist: np.ndarray, student_logp: Tensor) -> Tensor:
    """Batch-mean cross entropy between teacher and student CLS distributions."""
    if teacher_dist.shape != student_logp.shape:
        raise DimensionError(f"CLS distributions differ: {teacher_dist.shape} vs {student_logp.shape}")
    return nx.mean(nx.cross_entropy_rows(Tensor(teacher_dist), student_logp))


def mim_loss(teacher_dists: np.ndarray, student_logp: Tensor, flags: np.ndarray,
             normalize: bool = True) -> Tensor:
    """Masked-position cross entropy, batch-averaged.

    Each sample's masked sum is divided by its own mask count when
    ``normalize``; samples without masked patches contribute zero.
    """
    if teacher_dists.shape != student_logp.shape:
        raise DimensionError(f"patch distributions differ: {teacher_dists.shape} vs {student_logp.shape}")
    flags = np.asarray(flags, dtype=bool).reshape(teacher_dists.shape[:-1])
    weights = flags.astype(np.float64)
    if normalize:
        counts = weights.sum(axis=-1, keepdims=True)
        weights = np.divide(weights, counts, out=np.zeros_like(weights), where=counts > 0)
    ce = nx.cross_entropy_rows(Tensor(teacher_dists), student_logp)
    return nx.tsum(ce * weights) * (1.0 / flags.shape[0])


def compute_losses(t_u: TeacherOutput, t_v: TeacherOutput, s_u: StudentOutput, s_v: StudentOutput,
                   mask_u, mask_v, normalize: bool = True,
                   t_cls_u: np.ndarray | None = None, t_cls_v: np.ndarray | None = None) -> Losses:
    """The four loss terms.

    ``s_u``/``s_v`` are the student outputs on the masked views. CLS targets
    default to the teacher's unmasked-view distributions; pass ``t_cls_u`` /
    ``t_cls_v`` to substitute others (e.g. masked-view teacher passes).
    """
    batch, num = t_u.patch_dists.shape[:2]
    fu, fv = _flags(mask_u, batch, num), _flags(mask_v, batch, num)
    if not fu.any() and not fv.any():
        log.warning("no masked patches in either view; MIM loss is zero")
    cu = t_u.cls_dist if t_cls_u is None else t_cls_u
    cv = t_v.cls_dist if t_cls_v is None else t_cls_v
    return Losses(
        cls_v_u=cls_loss(cv, s_u.cls_logp),
        cls_u_v=cls_loss(cu, s_v.cls_logp),
        mim_u=mim_loss(t_u.patch_dists, s_u.patch_logp, fu, normalize),
        mim_v=mim_loss(t_v.patch_dists, s_v.patch_logp, fv, normalize),
    )


# --------------------------------------------------------------------------
# teacher updates

def ema_update(state: DualStreamState, lam: float) -> None:
    """teacher <- lam * teacher + (1 - lam) * student, for every parameter."""
    if not 0.0 <= lam <= 1.0:
        raise ParameterError(f"EMA decay must lie in [0, 1], got {lam}")
    if lam == 1.0:
        return
    for name, t in state.teacher.items():
        t.data = lam * t.data + (1.0 - lam) * state.student[name].data


def center_update(center: np.ndarray, logits: np.ndarray, momentum: float) -> np.ndarray:
    """center <- m * center + (1 - m) * mean over rows of ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    batch_mean = logits.reshape(-1, logits.shape[-1]).mean(axis=0, keepdims=True)
    return momentum * center + (1.0 - momentum) * batch_mean


def update_centers(state: DualStreamState, teacher_outs, momentum: float) -> None:
    cls = np.concatenate([t.cls_logits for t in teacher_outs])
    patch = np.concatenate([t.patch_logits.reshape(-1, t.patch_logits.shape[-1]) for t in teacher_outs])
    state.center = center_update(state.center, cls, momentum)
    state.center_patch = center_update(state.center_patch, patch, momentum)
