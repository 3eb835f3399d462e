"""Feature integration projection head.

Two cross-attention + FFN blocks, shared between the CLS level and the patch
level, followed by a level-specific 3-layer MLP head with an L2-normalised
bottleneck. The cross-attention has a single query per position and, as in
the defining equations, the query itself is prepended to the key/value set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import DimensionError, ParameterError
from .gpc import CohesionSelection
from .numerics import Tensor
from .vit import init_value

LEVELS = ("cls", "patch")
NUM_BLOCKS = 2


@dataclass(frozen=True)
class FIPConfig:
    dim: int = 96
    heads: int = 4
    out_dim: int = 1024          # K, number of prototypes
    head_hidden: int = 256
    bottleneck: int = 64
    mlp_ratio: int = 4
    mode: str = "fip"            # "fip" or "avg"

    def __post_init__(self):
        if self.dim % self.heads:
            raise ParameterError("dim must be divisible by heads")
        if self.mode not in ("fip", "avg"):
            raise ParameterError(f"unknown head mode {self.mode!r}")


@dataclass
class PatchQueryBundle:
    x_ap: Tensor   # (..., L, d) one aggregated query per patch
    x_sp: Tensor   # (..., L, k, d) selected neighbour embeddings

    @property
    def k(self) -> int:
        return self.x_sp.shape[-2]


def block_param_shapes(dim: int, mlp_ratio: int = 4, prefix: str = "") -> dict[str, tuple[int, ...]]:
    hid = dim * mlp_ratio
    shapes = {}
    for proj in ("q", "k", "v"):
        shapes[f"{prefix}attn.{proj}.weight"] = (dim, dim)
        shapes[f"{prefix}attn.{proj}.bias"] = (dim,)
    shapes.update({
        f"{prefix}ffn.fc1.weight": (dim, hid), f"{prefix}ffn.fc1.bias": (hid,),
        f"{prefix}ffn.fc2.weight": (hid, dim), f"{prefix}ffn.fc2.bias": (dim,),
    })
    return shapes


def head_param_shapes(cfg: FIPConfig, prefix: str) -> dict[str, tuple[int, ...]]:
    d, h, b = cfg.dim, cfg.head_hidden, cfg.bottleneck
    return {
        prefix + "fc1.weight": (d, h), prefix + "fc1.bias": (h,),
        prefix + "fc2.weight": (h, h), prefix + "fc2.bias": (h,),
        prefix + "fc3.weight": (h, b), prefix + "fc3.bias": (b,),
        prefix + "last.weight": (b, cfg.out_dim),
    }


def param_shapes(cfg: FIPConfig, prefix: str = "fip.") -> dict[str, tuple[int, ...]]:
    shapes = {}
    for b in range(NUM_BLOCKS):
        shapes.update(block_param_shapes(cfg.dim, cfg.mlp_ratio, f"{prefix}blocks.{b}."))
    shapes.update(head_param_shapes(cfg, f"{prefix}head_cls."))
    shapes.update(head_param_shapes(cfg, f"{prefix}head_patch."))
    return shapes


def init_params(cfg: FIPConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    return {name: Tensor(init_value(name, shape, rng, 1.0), requires_grad=True)
            for name, shape in param_shapes(cfg).items()}


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    return x.reshape(*lead, n, heads, d // heads).swapaxes(-2, -3)


def cross_attention(query: Tensor, static: Tensor, params, p: str, heads: int) -> Tensor:
    """Residual single-query attention over ``[query; static]``.

    query: (..., 1, d); static: (..., m, d). Returns (..., 1, d).
    """
    d = query.shape[-1]
    if static.shape[-1] != d or query.shape[-2] != 1:
        raise DimensionError(f"cross attention expects (...,1,{d}) query and (...,m,{d}) keys; "
                             f"got {query.shape} and {static.shape}")
    keys = nx.concat([query, static], axis=-2)
    q = _split_heads(nx.linear(query, params[p + "q.weight"], params[p + "q.bias"]), heads)
    k = _split_heads(nx.linear(keys, params[p + "k.weight"], params[p + "k.bias"]), heads)
    v = _split_heads(nx.linear(keys, params[p + "v.weight"], params[p + "v.bias"]), heads)
    scale = 1.0 / np.sqrt(d / heads)
    att = nx.softmax(nx.matmul(q, k.swapaxes(-1, -2)) * scale)
    out = nx.matmul(att, v).swapaxes(-2, -3)
    return query + out.reshape(query.shape)


def ffn(x: Tensor, params, p: str) -> Tensor:
    h = nx.gelu(nx.linear(x, params[p + "fc1.weight"], params[p + "fc1.bias"]))
    return x + nx.linear(h, params[p + "fc2.weight"], params[p + "fc2.bias"])


def cross_attention_cls(x_cls: Tensor, x_patch: Tensor, params, cfg: FIPConfig,
                        block: int = 0, prefix: str = "fip.") -> Tensor:
    return cross_attention(x_cls, x_patch, params, f"{prefix}blocks.{block}.attn.", cfg.heads)


def _check_bundle(bundle: PatchQueryBundle) -> None:
    ap, sp = bundle.x_ap.shape, bundle.x_sp.shape
    if sp[:-2] != ap[:-1] or sp[-1] != ap[-1]:
        raise DimensionError(f"inconsistent bundle: x_ap {ap}, x_sp {sp}")


def cross_attention_patch(bundle: PatchQueryBundle, params, cfg: FIPConfig,
                          block: int = 0, prefix: str = "fip.", k: int | None = None) -> Tensor:
    """Per-patch attention; patch i only sees ``[x_ap[i]; x_sp[i]]``."""
    _check_bundle(bundle)
    if k is not None and bundle.k != k:
        raise DimensionError(f"bundle holds {bundle.k} neighbours, expected {k}")
    q = bundle.x_ap.reshape(*bundle.x_ap.shape[:-1], 1, bundle.x_ap.shape[-1])
    out = cross_attention(q, bundle.x_sp, params, f"{prefix}blocks.{block}.attn.", cfg.heads)
    return out.reshape(bundle.x_ap.shape)


def blocks(query: Tensor, static: Tensor, params, cfg: FIPConfig, prefix: str = "fip.") -> Tensor:
    x = query
    for b in range(NUM_BLOCKS):
        p = f"{prefix}blocks.{b}."
        x = ffn(cross_attention(x, static, params, p + "attn.", cfg.heads), params, p + "ffn.")
    return x


def mlp_head(x: Tensor, params, p: str) -> Tensor:
    h = nx.gelu(nx.linear(x, params[p + "fc1.weight"], params[p + "fc1.bias"]))
    h = nx.gelu(nx.linear(h, params[p + "fc2.weight"], params[p + "fc2.bias"]))
    h = nx.l2_normalize(nx.linear(h, params[p + "fc3.weight"], params[p + "fc3.bias"]))
    # weight-normalised prototypes: each logit is a cosine in [-1, 1]
    protos = nx.l2_normalize(nx.transpose(params[p + "last.weight"]))
    return nx.matmul(h, nx.transpose(protos))


def average(query: Tensor, static: Tensor) -> Tensor:
    return nx.mean(nx.concat([query, static], axis=-2), axis=-2, keepdims=True)


def avg_head(bundle: PatchQueryBundle) -> Tensor:
    """Mean of the 1+k vectors ``[x_ap[i]; x_sp[i]]`` per patch."""
    _check_bundle(bundle)
    q = bundle.x_ap.reshape(*bundle.x_ap.shape[:-1], 1, bundle.x_ap.shape[-1])
    return average(q, bundle.x_sp).reshape(bundle.x_ap.shape)


def integrate(query: Tensor, static: Tensor, params, cfg: FIPConfig, prefix: str = "fip.") -> Tensor:
    """Pre-head activations: the shared blocks, or the average in AVG mode."""
    if cfg.mode == "avg":
        return average(query, static)
    return blocks(query, static, params, cfg, prefix)


def fip_logits(query: Tensor, static: Tensor, params, cfg: FIPConfig, level: str,
               prefix: str = "fip.") -> Tensor:
    """Logits over K prototypes.

    level "cls": query (..., 1, d), static (..., L, d) -> (..., 1, K).
    level "patch": query (..., L, 1, d), static (..., L, k, d) -> (..., L, 1, K).
    """
    if level not in LEVELS:
        raise ParameterError(f"unknown FIP level {level!r}")
    z = integrate(query, static, params, cfg, prefix)
    return mlp_head(z, params, f"{prefix}head_{level}.")


def fip_forward(query: Tensor, static: Tensor, params, cfg: FIPConfig, level: str,
                temperature: float = 1.0, prefix: str = "fip.") -> Tensor:
    return nx.softmax(fip_logits(query, static, params, cfg, level, prefix), temperature)


def patch_logits(bundle: PatchQueryBundle, params, cfg: FIPConfig, prefix: str = "fip.") -> Tensor:
    """(..., L, K) patch-level logits from a bundle."""
    _check_bundle(bundle)
    q = bundle.x_ap.reshape(*bundle.x_ap.shape[:-1], 1, bundle.x_ap.shape[-1])
    out = fip_logits(q, bundle.x_sp, params, cfg, "patch", prefix)
    return out.reshape(*bundle.x_ap.shape[:-1], cfg.out_dim)


def build_patch_bundle(patches, selection: CohesionSelection | None,
                       aggregate: str = "mean") -> PatchQueryBundle:
    """Gather the selected neighbours of every patch.

    ``patches`` is (L, d) or (B, L, d); ``selection`` one CohesionSelection
    or a list of them matching B. With no selection (GPC disabled) each
    patch is its own query and has no neighbours.
    """
    x = patches if isinstance(patches, Tensor) else Tensor(patches)
    if selection is None:
        empty = Tensor(np.zeros((*x.shape[:-1], 0, x.shape[-1])))
        return PatchQueryBundle(x, empty)
    if x.ndim == 2:
        idx = selection.indices
        x_sp = nx.gather(x, idx, axis=0)
    else:
        sels = selection if isinstance(selection, (list, tuple)) else [selection]
        if len(sels) != x.shape[0]:
            raise DimensionError(f"{len(sels)} selections for a batch of {x.shape[0]}")
        idx = np.stack([s.indices for s in sels])
        if idx.size and (idx.min() < 0 or idx.max() >= x.shape[-2]):
            raise DimensionError("selection index out of range")
        batch = np.arange(x.shape[0])[:, None, None]
        x_sp = nx.getitem(x, (batch, idx))
    if aggregate == "mean":
        x_ap = nx.mean(x_sp, axis=-2)
    elif aggregate == "center":
        x_ap = x
    else:
        raise ParameterError(f"unknown aggregate {aggregate!r}")
    return PatchQueryBundle(x_ap, x_sp)


def block_param_count(dim: int, mlp_ratio: int = 4) -> int:
    return sum(int(np.prod(s)) for s in block_param_shapes(dim, mlp_ratio).values())
