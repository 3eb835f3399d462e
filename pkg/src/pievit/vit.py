"""Minimal ViT encoder with LayerScale.

Parameters live in a flat ``dict[str, Tensor]``; every function here is a
pure function of (inputs, parameters, config).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import DimensionError, ParameterError
from .masking import MaskPlan
from .numerics import Tensor


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 64
    patch_size: int = 8
    dim: int = 96
    depth: int = 4
    heads: int = 4
    layerscale_init: float = 1e-5
    mlp_ratio: int = 4
    channels: int = 3
    ln_eps: float = 1e-6
    # pixels in [0, 1] are standardised as (x - pixel_mean) / pixel_std
    pixel_mean: float = 0.5
    pixel_std: float = 0.25

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ParameterError("image_size must be divisible by patch_size")
        if self.dim % self.heads:
            raise ParameterError("dim must be divisible by heads")
        if not self.layerscale_init > 0:
            raise ParameterError("layerscale_init must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2

    @classmethod
    def vit_b16(cls) -> ViTConfig:
        return cls(image_size=224, patch_size=16, dim=768, depth=12, heads=12)


@dataclass
class TokenSequence:
    """CLS and patch tokens; leading batch axes are allowed."""

    cls: Tensor        # (..., 1, d)
    patches: Tensor    # (..., L, d)

    def joined(self) -> Tensor:
        return nx.concat([self.cls, self.patches], axis=-2)

    @classmethod
    def split(cls, x: Tensor) -> TokenSequence:
        return cls(x[..., :1, :], x[..., 1:, :])


def param_shapes(cfg: ViTConfig, prefix: str = "encoder.") -> dict[str, tuple[int, ...]]:
    d, hid = cfg.dim, cfg.dim * cfg.mlp_ratio
    shapes = {
        "patch_embed.weight": (cfg.patch_dim, d),
        "patch_embed.bias": (d,),
        "cls_token": (1, d),
        "mask_token": (1, d),
        "pos_embed": (1 + cfg.num_patches, d),
    }
    for b in range(cfg.depth):
        p = f"blocks.{b}."
        shapes.update({
            p + "norm1.gain": (d,), p + "norm1.bias": (d,),
            p + "attn.qkv.weight": (d, 3 * d), p + "attn.qkv.bias": (3 * d,),
            p + "attn.proj.weight": (d, d), p + "attn.proj.bias": (d,),
            p + "ls1": (d,),
            p + "norm2.gain": (d,), p + "norm2.bias": (d,),
            p + "mlp.fc1.weight": (d, hid), p + "mlp.fc1.bias": (hid,),
            p + "mlp.fc2.weight": (hid, d), p + "mlp.fc2.bias": (d,),
            p + "ls2": (d,),
        })
    return {prefix + k: v for k, v in shapes.items()}


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal samples redrawn until they fall within two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_value(name: str, shape, rng: np.random.Generator, layerscale_init: float) -> np.ndarray:
    """Initial value by naming convention shared by all modules."""
    leaf = name.rsplit(".", 1)[-1]
    if leaf in ("ls1", "ls2"):
        return np.full(shape, layerscale_init)
    if leaf == "gain":
        return np.ones(shape)
    if leaf == "bias":
        return np.zeros(shape)
    return trunc_normal(rng, shape)


def init_params(cfg: ViTConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    return {name: Tensor(init_value(name, shape, rng, cfg.layerscale_init), requires_grad=True)
            for name, shape in param_shapes(cfg).items()}


def patchify(image, patch_size: int, image_size: int | None = None) -> Tensor:
    """(..., H, W, C) image -> (..., L, C*p*p) rows in row-major grid order.

    Each row flattens its patch as (row, col, channel).
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim < 3:
        raise DimensionError(f"expected (..., H, W, C) image, got shape {img.shape}")
    *lead, h, w, c = img.shape
    if h != w or (image_size is not None and h != image_size) or h % patch_size:
        raise DimensionError(f"image of shape {h}x{w} incompatible with "
                             f"image_size={image_size}, patch_size={patch_size}")
    g = h // patch_size
    x = img.reshape(*lead, g, patch_size, g, patch_size, c)
    n = len(lead)
    x = np.moveaxis(x, n + 2, n + 1)   # (..., g, g, p, p, c)
    return Tensor(x.reshape(*lead, g * g, patch_size * patch_size * c))


def unpatchify(rows, patch_size: int, channels: int = 3) -> np.ndarray:
    rows = rows.data if isinstance(rows, Tensor) else np.asarray(rows)
    *lead, num, _ = rows.shape
    g = int(round(np.sqrt(num)))
    n = len(lead)
    x = rows.reshape(*lead, g, g, patch_size, patch_size, channels)
    x = np.moveaxis(x, n + 1, n + 2)
    return x.reshape(*lead, g * patch_size, g * patch_size, channels)


def _plan_flags(plan, num_patches: int) -> np.ndarray:
    flags = plan.flags if isinstance(plan, MaskPlan) else np.asarray(plan, dtype=bool)
    if flags.shape[-1] != num_patches:
        raise DimensionError(f"mask plan length {flags.shape[-1]} != L={num_patches}")
    return flags


def apply_mask(tokens: TokenSequence, plan, mask_embedding: Tensor) -> TokenSequence:
    """Replace patch rows flagged in ``plan`` with ``mask_embedding``.

    ``plan`` is a MaskPlan or boolean array of shape (L,) or (B, L).
    """
    flags = _plan_flags(plan, tokens.patches.shape[-2])
    if not flags.any():
        return tokens
    patches = nx.where(flags[..., None], mask_embedding, tokens.patches)
    return TokenSequence(tokens.cls, patches)


def embed(pixels, params: dict[str, Tensor], cfg: ViTConfig, plan=None,
          prefix: str = "encoder.") -> TokenSequence:
    """Patch projection, optional mask substitution, then positional embeddings."""
    rows = pixels if isinstance(pixels, Tensor) else Tensor(pixels)
    if rows.shape[-2:] != (cfg.num_patches, cfg.patch_dim):
        raise DimensionError(f"patch rows {rows.shape} do not match config "
                             f"({cfg.num_patches}, {cfg.patch_dim})")
    rows = (rows - cfg.pixel_mean) * (1.0 / cfg.pixel_std)
    x = nx.linear(rows, params[prefix + "patch_embed.weight"], params[prefix + "patch_embed.bias"])
    lead = rows.shape[:-2]
    cls = nx.broadcast_to(params[prefix + "cls_token"], (*lead, 1, cfg.dim))
    tokens = TokenSequence(cls, x)
    if plan is not None:
        tokens = apply_mask(tokens, plan, params[prefix + "mask_token"])
    pos = params[prefix + "pos_embed"]
    return TokenSequence(tokens.cls + pos[:1], tokens.patches + pos[1:])


def attention(x: Tensor, params, p: str, heads: int) -> Tensor:
    *lead, n, d = x.shape
    dh = d // heads
    qkv = nx.linear(x, params[p + "qkv.weight"], params[p + "qkv.bias"])
    qkv = qkv.reshape(*lead, n, 3, heads, dh)
    nl = len(lead)
    qkv = qkv.transpose(nl + 1, *range(nl), nl + 2, nl, nl + 3)   # (3, ..., h, n, dh)
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = nx.softmax(nx.matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh)))
    out = nx.matmul(att, v)                                            # (..., h, n, dh)
    out = out.swapaxes(-2, -3).reshape(*lead, n, d)
    return nx.linear(out, params[p + "proj.weight"], params[p + "proj.bias"])


def block(x: Tensor, params, p: str, cfg: ViTConfig) -> Tensor:
    h = nx.layer_norm(x, params[p + "norm1.gain"], params[p + "norm1.bias"], cfg.ln_eps)
    x = x + attention(h, params, p + "attn.", cfg.heads) * params[p + "ls1"]
    h = nx.layer_norm(x, params[p + "norm2.gain"], params[p + "norm2.bias"], cfg.ln_eps)
    h = nx.linear(nx.gelu(nx.linear(h, params[p + "mlp.fc1.weight"], params[p + "mlp.fc1.bias"])),
                  params[p + "mlp.fc2.weight"], params[p + "mlp.fc2.bias"])
    return x + h * params[p + "ls2"]


def encode(tokens: TokenSequence, params: dict[str, Tensor], cfg: ViTConfig,
           prefix: str = "encoder.") -> TokenSequence:
    x = tokens.joined()
    if x.shape[-1] != cfg.dim:
        raise DimensionError(f"token width {x.shape[-1]} != dim {cfg.dim}")
    for b in range(cfg.depth):
        name = f"{prefix}blocks.{b}."
        if name + "ls1" not in params:
            raise DimensionError(f"missing parameters for encoder block {b}")
        x = block(x, params, name, cfg)
    return TokenSequence.split(x)


def forward(pixels, params: dict[str, Tensor], cfg: ViTConfig, plan=None) -> TokenSequence:
    return encode(embed(pixels, params, cfg, plan), params, cfg)
