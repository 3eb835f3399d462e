"""AdamW, schedules, the training loop and checkpoint persistence."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import distill
from . import numerics as nx
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig
from .distill import DualStreamState
from .errors import DataError, IncompatibleCheckpointError, NonFiniteError, ParameterError
from .numerics import Tensor

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "L_cls", "L_mim", "L_total", "lr", "wd", "momentum")
METRICS_HEADER = "# pievit metrics v1"

_NO_DECAY_LEAVES = ("gain", "ls1", "ls2", "cls_token", "mask_token", "pos_embed")


def decays(name: str) -> bool:
    """Whether weight decay applies to parameter ``name``."""
    leaf = name.rsplit(".", 1)[-1]
    if leaf in _NO_DECAY_LEAVES:
        return False
    # LayerNorm biases
    return not (leaf == "bias" and ".norm" in name)


# --------------------------------------------------------------------------
# schedules

def _half_cosine(start: float, end: float, frac: float) -> float:
    return end + (start - end) * 0.5 * (1.0 + math.cos(math.pi * frac))


def schedule_value(kind: str, step: int, cfg: TrainConfig, total_steps: int,
                   warmup_steps: int = 0) -> float:
    """Scheduled value of ``lr``, ``wd`` or ``momentum`` at ``step``."""
    if not 0 <= step <= total_steps:
        raise ParameterError(f"step {step} outside [0, {total_steps}]")
    if kind == "lr":
        if step < warmup_steps:
            return cfg.base_lr * step / warmup_steps
        span = total_steps - warmup_steps
        frac = (step - warmup_steps) / span if span > 0 else 1.0
        return _half_cosine(cfg.base_lr, cfg.min_lr, frac)
    frac = step / total_steps if total_steps > 0 else 1.0
    if kind == "wd":
        return _half_cosine(cfg.wd_start, cfg.wd_end, frac)
    if kind == "momentum":
        const = cfg.constant_momentum()
        return const if const is not None else _half_cosine(cfg.momentum_start, cfg.momentum_end, frac)
    raise ParameterError(f"unknown schedule {kind!r}")


# --------------------------------------------------------------------------
# optimiser

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(params: dict[str, Tensor], state: AdamState, lr: float, wd: float,
               betas: tuple[float, float] = (0.9, 0.99), eps: float = 1e-8,
               decay_filter=decays) -> None:
    """Decoupled weight decay followed by a bias-corrected Adam update.

    Parameters without a gradient are left alone. Any non-finite gradient
    aborts the whole step before anything is modified.
    """
    bad = [n for n, p in params.items() if p.grad is not None and not np.isfinite(p.grad).all()]
    if bad:
        raise NonFiniteError(f"non-finite gradients in {len(bad)} parameter(s), e.g. {bad[:3]}")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if wd and decay_filter(name):
            p.data = p.data - lr * wd * p.data
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> None:
    """Rescale each gradient tensor whose L2 norm exceeds ``max_norm``."""
    for p in params.values():
        if p.grad is None:
            continue
        norm = float(np.sqrt(np.sum(p.grad * p.grad)))
        if norm > max_norm:
            p.grad = p.grad * (max_norm / (norm + 1e-6))


# --------------------------------------------------------------------------
# checkpoint <-> state

def state_to_checkpoint(state: DualStreamState, opt: AdamState, cfg: TrainConfig) -> Checkpoint:
    rec = {}
    for name, p in state.student.items():
        rec[f"student/{name}"] = p.data
    for name, p in state.teacher.items():
        rec[f"teacher/{name}"] = p.data
    for name in state.student:
        if name in opt.m:
            rec[f"adam.m/{name}"] = opt.m[name]
            rec[f"adam.v/{name}"] = opt.v[name]
    rec["adam/t"] = np.array([float(opt.t)])
    rec["center"] = state.center
    rec["center_patch"] = state.center_patch
    # batches and views are drawn from generators keyed by (seed, step)
    rec["rng"] = np.array([float(cfg.seed), float(state.step)])
    return Checkpoint(state.step, cfg.to_text(), rec)


def state_from_checkpoint(ckpt: Checkpoint) -> tuple[TrainConfig, DualStreamState, AdamState]:
    cfg = TrainConfig.from_text(ckpt.config_text)
    student = {k: Tensor(v.copy(), requires_grad=True) for k, v in ckpt.group("student").items()}
    teacher = {k: Tensor(v.copy()) for k, v in ckpt.group("teacher").items()}
    k = cfg.out_dim
    center = ckpt.records.get("center", np.zeros((1, k))).copy()
    center_patch = ckpt.records.get("center_patch", np.zeros((1, k))).copy()
    opt = AdamState({n: v.copy() for n, v in ckpt.group("adam.m").items()},
                    {n: v.copy() for n, v in ckpt.group("adam.v").items()},
                    int(ckpt.records.get("adam/t", np.zeros(1))[0]))
    return cfg, DualStreamState(student, teacher, center, center_patch, ckpt.step), opt


# --------------------------------------------------------------------------
# metrics log

class MetricsLog:
    """Tab-separated metrics, one line per step, behind a comment header."""

    def __init__(self, path=None, append: bool = False):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        self._fh = None
        if self.path is not None:
            self._fh = open(self.path, "a" if append else "w")
            if not append or self.path.stat().st_size == 0:
                self._fh.write(METRICS_HEADER + "\n" + "\t".join(METRIC_COLUMNS) + "\n")
                self._fh.flush()

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self._fh is not None:
            self._fh.write("\t".join(_fmt_metric(record[c]) for c in METRIC_COLUMNS) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def _fmt_metric(x) -> str:
    return str(x) if isinstance(x, int) else repr(float(x))


def read_metrics(path) -> list[dict]:
    rows = []
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0] != METRICS_HEADER:
        raise DataError(f"{path} is not a pievit metrics log")
    cols = lines[1].split("\t")
    for line in lines[2:]:
        vals = line.split("\t")
        rows.append({c: (int(v) if c == "step" else float(v)) for c, v in zip(cols, vals)})
    return rows


# --------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    config: TrainConfig
    state: DualStreamState
    optimizer: AdamState
    metrics: list[dict]

    def checkpoint(self) -> Checkpoint:
        return state_to_checkpoint(self.state, self.optimizer, self.config)


def batch_indices(cfg: TrainConfig, step: int, corpus_size: int) -> np.ndarray:
    spe = cfg.steps_per_epoch(corpus_size)
    epoch, pos = divmod(step, spe)
    perm = np.random.default_rng([cfg.seed, 1, epoch]).permutation(corpus_size)
    b = min(cfg.batch_size, corpus_size)
    return perm[pos * b:(pos + 1) * b]


def train_step(state: DualStreamState, opt: AdamState, cfg: TrainConfig, corpus,
               total_steps: int, warmup_steps: int) -> dict:
    """One optimisation step on the student followed by the teacher updates."""
    model, dcfg, aug = cfg.model_config(), cfg.distill_config(), cfg.aug_config()
    step = state.step
    idx = batch_indices(cfg, step, len(corpus))
    views = [distill.make_view_pair(corpus[j], aug, np.random.default_rng([cfg.seed, 2, step, n]),
                                    model.vit.grid, dcfg.mask_ratio_range)
             for n, j in enumerate(idx)]
    u = np.stack([vp.u for vp in views])
    v = np.stack([vp.v for vp in views])
    mu = [vp.mask_u for vp in views]
    mv = [vp.mask_v for vp in views]

    t_u = distill.teacher_forward(state, u, model, dcfg)
    t_v = distill.teacher_forward(state, v, model, dcfg)
    t_cls_u = t_cls_v = None
    if dcfg.teacher_sees_masked:
        t_cls_u = distill.teacher_forward(state, u, model, dcfg, mu).cls_dist
        t_cls_v = distill.teacher_forward(state, v, model, dcfg, mv).cls_dist

    for p in state.student.values():
        p.grad = None
    with nx.Tape() as tape:
        s_u = distill.student_forward(state, u, mu, model, dcfg)
        s_v = distill.student_forward(state, v, mv, model, dcfg)
        losses = distill.compute_losses(t_u, t_v, s_u, s_v, mu, mv, dcfg.mim_normalize,
                                        t_cls_u, t_cls_v)
        total = losses.total
    if not np.isfinite(total.data).all():
        raise NonFiniteError(f"non-finite loss at step {step}")
    tape.backward(total)

    lr = schedule_value("lr", step, cfg, total_steps, warmup_steps)
    wd = schedule_value("wd", step, cfg, total_steps, warmup_steps)
    mom = schedule_value("momentum", step, cfg, total_steps, warmup_steps)
    if cfg.clip_grad > 0:
        clip_gradients(state.student, cfg.clip_grad)
    adamw_step(state.student, opt, lr, wd, (cfg.beta1, cfg.beta2), cfg.adam_eps)
    for p in state.student.values():
        p.grad = None
    distill.ema_update(state, mom)
    distill.update_centers(state, [t_u, t_v], dcfg.center_momentum)
    state.step += 1
    return {"step": state.step, **losses.values(), "lr": lr, "wd": wd, "momentum": mom}


def train(cfg: TrainConfig, corpus, out_dir=None, resume: Checkpoint | None = None,
          steps: int | None = None, checkpoint_name: str = "checkpoint.piev",
          progress=None) -> TrainResult:
    """Run (or resume) pretraining.

    ``steps`` limits how many steps this call executes; the schedules always
    span the configured run length. With ``out_dir`` the checkpoint and the
    metrics log are written there; on a non-finite loss the last good state
    is saved before the error propagates.
    """
    if not corpus:
        raise DataError("training corpus is empty")
    total = cfg.total_steps(len(corpus))
    warmup = cfg.warmup_steps(len(corpus))
    if resume is not None:
        loaded_cfg, state, opt = state_from_checkpoint(resume)
        if loaded_cfg.hash() != cfg.hash():
            raise IncompatibleCheckpointError("resume checkpoint was written under a different config")
    else:
        state = distill.init_state(cfg.model_config(), cfg.seed)
        opt = AdamState()
    end = total if steps is None else min(total, state.step + steps)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    metrics = MetricsLog(out / "metrics.tsv" if out else None, append=resume is not None)
    try:
        while state.step < end:
            try:
                rec = train_step(state, opt, cfg, corpus, total, warmup)
            except NonFiniteError:
                if out is not None:
                    save_checkpoint(state_to_checkpoint(state, opt, cfg), out / checkpoint_name)
                log.error("aborting at step %d: non-finite loss; last good state kept", state.step)
                raise
            metrics.write(rec)
            if progress is not None:
                progress(rec)
    finally:
        metrics.close()
    result = TrainResult(cfg, state, opt, metrics.records)
    if out is not None:
        save_checkpoint(result.checkpoint(), out / checkpoint_name)
    return result


def resume_from(path, cfg: TrainConfig | None = None) -> Checkpoint:
    ckpt = load_checkpoint(path)
    if cfg is not None and ckpt.config_text != cfg.to_text():
        raise IncompatibleCheckpointError("checkpoint config differs from the requested run")
    return ckpt
