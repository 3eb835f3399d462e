import numpy as np
import pytest

from pievit import numerics as nx
from pievit import vit
from pievit.errors import DimensionError, ParameterError
from pievit.masking import MaskPlan
from pievit.numerics import Tensor
from pievit.vit import ViTConfig

from conftest import check_grads


def small_cfg(**kw):
    base = dict(image_size=8, patch_size=2, dim=8, depth=2, heads=2, layerscale_init=0.5)
    base.update(kw)
    return ViTConfig(**base)


def perturbed_params(cfg, rng, scale=0.1):
    params = vit.init_params(cfg, rng)
    for p in params.values():
        p.data = p.data + rng.normal(0, scale, p.shape)
    return params


def naive_layer_norm(x, g, b, eps):
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    return (x - mu) / np.sqrt(var + eps) * g + b


def naive_gelu(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))


def naive_block(x, P, p, cfg):
    """Token-by-token, head-by-head reference of one encoder block."""
    n, d = x.shape
    dh = d // cfg.heads
    get = lambda k: P[p + k].data
    h = np.stack([naive_layer_norm(t, get("norm1.gain"), get("norm1.bias"), cfg.ln_eps) for t in x])
    qkv = h @ get("attn.qkv.weight") + get("attn.qkv.bias")
    q, k, v = qkv[:, :d], qkv[:, d:2 * d], qkv[:, 2 * d:]
    out = np.zeros((n, d))
    for head in range(cfg.heads):
        sl = slice(head * dh, (head + 1) * dh)
        for i in range(n):
            scores = np.array([q[i, sl] @ k[j, sl] / np.sqrt(dh) for j in range(n)])
            w = np.exp(scores - scores.max())
            w /= w.sum()
            out[i, sl] = sum(w[j] * v[j, sl] for j in range(n))
    att = out @ get("attn.proj.weight") + get("attn.proj.bias")
    x = x + att * get("ls1")
    h = np.stack([naive_layer_norm(t, get("norm2.gain"), get("norm2.bias"), cfg.ln_eps) for t in x])
    m = naive_gelu(h @ get("mlp.fc1.weight") + get("mlp.fc1.bias")) @ get("mlp.fc2.weight") + get("mlp.fc2.bias")
    return x + m * get("ls2")


@pytest.mark.parametrize("heads", [1, 2, 4])
def test_encoder_matches_naive_loops(rng, heads):
    cfg = small_cfg(heads=heads)
    P = perturbed_params(cfg, rng)
    img = rng.uniform(0, 1, (8, 8, 3))
    out = vit.forward(vit.patchify(img[None], 2, 8), P, cfg)
    rows = vit.patchify(img, 2).data
    x = (rows - cfg.pixel_mean) / cfg.pixel_std @ P["encoder.patch_embed.weight"].data + P["encoder.patch_embed.bias"].data
    x = np.concatenate([P["encoder.cls_token"].data, x]) + P["encoder.pos_embed"].data
    for b in range(cfg.depth):
        x = naive_block(x, P, f"encoder.blocks.{b}.", cfg)
    np.testing.assert_allclose(out.cls.data[0, 0], x[0], atol=1e-10)
    np.testing.assert_allclose(out.patches.data[0], x[1:], atol=1e-10)


def test_zero_layerscale_is_identity(rng):
    cfg = small_cfg()
    P = perturbed_params(cfg, rng)
    for name, p in P.items():
        if name.endswith(("ls1", "ls2")):
            p.data = np.zeros_like(p.data)
    x = Tensor(rng.normal(size=(2, 17, 8)))
    out = vit.encode(vit.TokenSequence.split(x), P, cfg)
    np.testing.assert_array_equal(out.joined().data, x.data)


def test_depth_zero_is_identity(rng):
    cfg = small_cfg(depth=0)
    x = Tensor(rng.normal(size=(17, 8)))
    out = vit.encode(vit.TokenSequence.split(x), vit.init_params(cfg, rng), cfg)
    np.testing.assert_array_equal(out.joined().data, x.data)


def test_encoder_gradients_match_finite_differences(rng):
    cfg = small_cfg(depth=1)
    P = perturbed_params(cfg, rng)
    rows = vit.patchify(rng.uniform(0, 1, (2, 8, 8, 3)), 2, 8)
    R = Tensor(rng.normal(size=(2, 17, 8)))
    plan = MaskPlan(np.arange(16) % 3 == 0, 0.3)
    used = [p for n, p in P.items() if n != "encoder.mask_token"] + [P["encoder.mask_token"]]
    check_grads(lambda: nx.tsum(vit.forward(rows, P, cfg, plan).joined() * R), used, h=1e-5, rtol=1e-5)


def test_mask_substitutes_before_position(rng):
    cfg = small_cfg(depth=0)
    P = perturbed_params(cfg, rng)
    flags = np.zeros(16, bool)
    flags[[0, 5]] = True
    rows = vit.patchify(rng.uniform(0, 1, (8, 8, 3))[None], 2, 8)
    out = vit.forward(rows, P, cfg, MaskPlan(flags, 2 / 16)).patches.data[0]
    pos = P["encoder.pos_embed"].data[1:]
    for i in (0, 5):
        np.testing.assert_allclose(out[i], P["encoder.mask_token"].data[0] + pos[i])
    unmasked = vit.forward(rows, P, cfg).patches.data[0]
    np.testing.assert_array_equal(out[~flags], unmasked[~flags])


def test_patchify_roundtrip_and_order(rng):
    img = rng.uniform(0, 1, (2, 8, 8, 3))
    rows = vit.patchify(img, 4, 8)
    assert rows.shape == (2, 4, 48)
    np.testing.assert_array_equal(vit.unpatchify(rows, 4), img)
    # second patch is the top-right tile, flattened (row, col, channel)
    np.testing.assert_array_equal(rows.data[0, 1], img[0, :4, 4:].reshape(-1))


def test_shape_errors(rng):
    with pytest.raises(DimensionError):
        vit.patchify(np.zeros((8, 6, 3)), 2)
    with pytest.raises(DimensionError):
        vit.patchify(np.zeros((8, 8, 3)), 2, image_size=16)
    cfg = small_cfg()
    with pytest.raises(DimensionError):
        vit.encode(vit.TokenSequence.split(Tensor(np.zeros((17, 6)))), vit.init_params(cfg, rng), cfg)


def test_config_validation():
    with pytest.raises(ParameterError):
        ViTConfig(image_size=10, patch_size=4)
    with pytest.raises(ParameterError):
        ViTConfig(dim=10, heads=4)
    with pytest.raises(ParameterError):
        ViTConfig(layerscale_init=0.0)


def analytic_encoder_params(cfg: ViTConfig) -> int:
    d, L, pd = cfg.dim, cfg.num_patches, cfg.patch_dim
    per_block = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + 2 * cfg.mlp_ratio * d * d + cfg.mlp_ratio * d + d
    return pd * d + d + 2 * d + (1 + L) * d + cfg.depth * per_block


@pytest.mark.parametrize("cfg", [ViTConfig(), ViTConfig.vit_b16(), small_cfg()])
def test_parameter_count_closed_form(cfg):
    assert sum(int(np.prod(s)) for s in vit.param_shapes(cfg).values()) == analytic_encoder_params(cfg)


def test_vit_b16_preset_is_about_86m():
    n = analytic_encoder_params(ViTConfig.vit_b16())
    assert abs(n - 86e6) / 86e6 < 0.03


def test_init_conventions(rng):
    cfg = ViTConfig()
    P = vit.init_params(cfg, rng)
    assert np.all(P["encoder.blocks.0.ls1"].data == 1e-5)
    assert np.all(P["encoder.blocks.0.norm1.gain"].data == 1.0)
    assert np.all(P["encoder.blocks.0.attn.qkv.bias"].data == 0.0)
    w = P["encoder.blocks.0.attn.qkv.weight"].data
    assert np.abs(w).max() <= 0.04 and abs(w.std() - 0.0176) < 0.002


def test_patch_permutation_equivariance(rng):
    cfg = small_cfg()
    P = perturbed_params(cfg, rng)
    x = rng.normal(size=(17, 8))
    perm = np.concatenate([[0], 1 + rng.permutation(16)])
    out = vit.encode(vit.TokenSequence.split(Tensor(x)), P, cfg).joined().data
    out_p = vit.encode(vit.TokenSequence.split(Tensor(x[perm])), P, cfg).joined().data
    np.testing.assert_allclose(out_p, out[perm], atol=1e-12)
