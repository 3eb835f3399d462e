import math

import numpy as np
import pytest

from pievit import distill
from pievit import numerics as nx
from pievit.distill import DistillConfig
from pievit.errors import DimensionError, ParameterError
from pievit.masking import MaskPlan
from pievit.numerics import Tensor
from pievit.pipeline import AugConfig

from conftest import tiny_config, tiny_corpus


def test_uniform_distributions_give_two_log_k():
    K, B = 8, 3
    uni = np.full((B, K), 1.0 / K)
    logp = Tensor(np.full((B, K), -math.log(K)))
    loss = distill.cls_loss(uni, logp) + distill.cls_loss(uni, logp)
    assert loss.item() == pytest.approx(2 * math.log(K), abs=1e-15)


def test_cls_loss_matches_loop():
    rng = np.random.default_rng(0)
    t = rng.dirichlet(np.ones(5), size=4)
    z = rng.normal(size=(4, 5))
    logp = z - np.log(np.exp(z).sum(1, keepdims=True))
    ref = np.mean([-sum(t[b, k] * logp[b, k] for k in range(5)) for b in range(4)])
    assert distill.cls_loss(t, Tensor(logp)).item() == pytest.approx(ref, abs=1e-12)


def test_mim_loss_matches_loop_and_ignores_unmasked():
    rng = np.random.default_rng(1)
    B, L, K = 2, 9, 4
    t = rng.dirichlet(np.ones(K), size=(B, L))
    z = Tensor(rng.normal(size=(B, L, K)), requires_grad=True)
    flags = rng.uniform(size=(B, L)) < 0.4
    flags[:, 0] = True
    with nx.Tape() as tape:
        loss = distill.mim_loss(t, nx.log_softmax(z), flags)
    tape.backward(loss)
    logp = z.data - np.log(np.exp(z.data).sum(-1, keepdims=True))
    ref = np.mean([sum(-(t[b, i] * logp[b, i]).sum() for i in range(L) if flags[b, i]) / flags[b].sum()
                   for b in range(B)])
    assert loss.item() == pytest.approx(ref, abs=1e-12)
    assert np.all(z.grad[~flags] == 0.0)
    z2 = z.data.copy()
    z2[~flags] = rng.normal(size=z2[~flags].shape) * 50
    assert distill.mim_loss(t, nx.log_softmax(Tensor(z2)), flags).item() == pytest.approx(loss.item(), abs=1e-12)


def test_mim_loss_unnormalised_and_empty_mask():
    t = np.full((1, 4, 2), 0.5)
    logp = Tensor(np.log(np.full((1, 4, 2), 0.5)))
    flags = np.array([[True, True, False, False]])
    assert distill.mim_loss(t, logp, flags, normalize=False).item() == pytest.approx(2 * math.log(2))
    assert distill.mim_loss(t, logp, np.zeros((1, 4), bool)).item() == 0.0
    with pytest.raises(DimensionError):
        distill.mim_loss(t, Tensor(np.zeros((1, 4, 3))), flags)


def test_teacher_distribution_centres_and_sharpens():
    logits = np.array([[1.0, 2.0, 3.0]])
    center = np.array([[0.5, 0.5, 0.5]])
    p = distill.teacher_distribution(logits, center, 0.04)
    z = (logits - center) / 0.04
    np.testing.assert_allclose(p, np.exp(z - z.max()) / np.exp(z - z.max()).sum(), atol=1e-15)


def test_center_update():
    c = np.zeros((1, 3))
    logits = np.array([[1.0, 2.0, 3.0], [3.0, 2.0, 1.0]])
    np.testing.assert_allclose(distill.center_update(c, logits, 0.9), [[0.2, 0.2, 0.2]])


def test_ema_update_and_bounds():
    cfg = tiny_config()
    state = distill.init_state(cfg.model_config(), 0)
    for p in state.student.values():
        p.data = p.data + 1.0
    before = {k: v.data.copy() for k, v in state.teacher.items()}
    distill.ema_update(state, 0.75)
    for k, t in state.teacher.items():
        np.testing.assert_allclose(t.data, 0.75 * before[k] + 0.25 * state.student[k].data, atol=1e-15)
    with pytest.raises(ParameterError):
        distill.ema_update(state, 1.5)


def test_init_state_teacher_copies_student():
    state = distill.init_state(tiny_config().model_config(), 3)
    for k, p in state.student.items():
        np.testing.assert_array_equal(state.teacher[k].data, p.data)
        assert state.teacher[k].data is not p.data
        assert not state.teacher[k].requires_grad


def test_teacher_forward_records_no_tape():
    cfg = tiny_config()
    model, dcfg = cfg.model_config(), cfg.distill_config()
    state = distill.init_state(model, 0)
    imgs = np.stack([s.pixels for s in tiny_corpus()[:2]])
    with nx.Tape() as tape:
        out = distill.teacher_forward(state, imgs, model, dcfg)
    assert len(tape.nodes) == 0
    assert out.cls_dist.shape == (2, 8) and out.patch_dists.shape == (2, 16, 8)
    np.testing.assert_allclose(out.patch_dists.sum(-1), 1.0, atol=1e-12)
    assert len(out.selection) == 2 and out.selection[0].k == 3
    off = distill.teacher_forward(state, imgs, model, DistillConfig(use_gpc=False))
    assert off.selection is None


def test_view_pair_masks_in_range():
    rng = np.random.default_rng(0)
    img = tiny_corpus()[0]
    for _ in range(20):
        vp = distill.make_view_pair(img, AugConfig(output_size=16), rng, 4)
        for plan in (vp.mask_u, vp.mask_v):
            assert 0.1 <= plan.ratio <= 0.5
            assert plan.count == distill.mask_count(plan.ratio, 16)
        assert vp.u.shape == (16, 16, 3)
    forced = distill.make_view_pair(img, AugConfig(output_size=16), rng, 4, ratio=0.25)
    assert forced.mask_u.count == 4


def test_student_masked_view_differs_only_at_masked_tokens():
    cfg = tiny_config()
    model, dcfg = cfg.model_config(), cfg.distill_config()
    state = distill.init_state(model, 0)
    img = tiny_corpus()[0].pixels[None]
    plan = MaskPlan(np.arange(16) < 3, 3 / 16)
    from pievit import vit
    rows = vit.patchify(img, 4, 16)
    plain = vit.embed(rows, state.student, model.vit)
    masked = vit.embed(rows, state.student, model.vit, plan)
    diff = np.any(plain.patches.data[0] != masked.patches.data[0], axis=-1)
    assert diff.tolist() == [i < 3 for i in range(16)]


def test_losses_total_is_sum():
    cfg = tiny_config()
    model, dcfg = cfg.model_config(), cfg.distill_config()
    state = distill.init_state(model, 0)
    imgs = np.stack([s.pixels for s in tiny_corpus()[:2]])
    rng = np.random.default_rng(0)
    plans = [MaskPlan(rng.uniform(size=16) < 0.3, 0.3) for _ in range(2)]
    t = distill.teacher_forward(state, imgs, model, dcfg)
    s = distill.student_forward(state, imgs, plans, model, dcfg)
    losses = distill.compute_losses(t, t, s, s, plans, plans)
    v = losses.values()
    assert v["L_total"] == pytest.approx(v["L_cls"] + v["L_mim"], abs=1e-12)


def test_view_swap_symmetry_and_nonnegativity():
    cfg = tiny_config()
    model, dcfg = cfg.model_config(), cfg.distill_config()
    state = distill.init_state(model, 0)
    rng = np.random.default_rng(2)
    for p in state.student.values():
        p.data = p.data + rng.normal(0, 0.1, p.shape)
    u, v = rng.uniform(size=(2, 16, 16, 3)), rng.uniform(size=(2, 16, 16, 3))
    mu = [MaskPlan(rng.uniform(size=16) < 0.3, 0.3) for _ in range(2)]
    mv = [MaskPlan(rng.uniform(size=16) < 0.4, 0.4) for _ in range(2)]
    t_u, t_v = (distill.teacher_forward(state, x, model, dcfg) for x in (u, v))
    s_u = distill.student_forward(state, u, mu, model, dcfg)
    s_v = distill.student_forward(state, v, mv, model, dcfg)
    a = distill.compute_losses(t_u, t_v, s_u, s_v, mu, mv)
    b = distill.compute_losses(t_v, t_u, s_v, s_u, mv, mu)
    assert a.total.item() == pytest.approx(b.total.item(), abs=1e-12)
    for term in (a.cls_v_u, a.cls_u_v, a.mim_u, a.mim_v):
        assert term.item() >= 0


def test_ema_contracts_distance():
    state = distill.init_state(tiny_config().model_config(), 0)
    rng = np.random.default_rng(0)
    for p in state.student.values():
        p.data = p.data + rng.normal(size=p.shape)
    before = {k: np.linalg.norm(state.teacher[k].data - p.data) for k, p in state.student.items()}
    distill.ema_update(state, 0.9)
    for k, p in state.student.items():
        assert np.linalg.norm(state.teacher[k].data - p.data) <= 0.9 * before[k] + 1e-12
