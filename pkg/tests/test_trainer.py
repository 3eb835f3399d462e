import math

import numpy as np
import pytest

from pievit import trainer
from pievit.checkpoint import load_checkpoint
from pievit.errors import DataError, IncompatibleCheckpointError, NonFiniteError, ParameterError
from pievit.numerics import Tensor
from pievit.trainer import AdamState, adamw_step, schedule_value

from conftest import tiny_config, tiny_corpus


def test_lr_schedule_warmup_then_cosine():
    cfg = tiny_config(base_lr=1.0, min_lr=0.1)
    assert schedule_value("lr", 0, cfg, 100, 10) == 0.0
    assert schedule_value("lr", 5, cfg, 100, 10) == pytest.approx(0.5)
    assert schedule_value("lr", 10, cfg, 100, 10) == pytest.approx(1.0)
    assert schedule_value("lr", 55, cfg, 100, 10) == pytest.approx(0.55)
    assert schedule_value("lr", 100, cfg, 100, 10) == pytest.approx(0.1)


def test_wd_and_momentum_schedules():
    cfg = tiny_config()
    assert schedule_value("wd", 0, cfg, 50) == pytest.approx(0.04)
    assert schedule_value("wd", 50, cfg, 50) == pytest.approx(0.4)
    assert schedule_value("wd", 25, cfg, 50) == pytest.approx(0.22)
    assert schedule_value("momentum", 0, cfg, 50) == pytest.approx(0.994)
    assert schedule_value("momentum", 50, cfg, 50) == pytest.approx(1.0)
    const = tiny_config(teacher_momentum="const:0.5")
    assert schedule_value("momentum", 17, const, 50) == 0.5
    with pytest.raises(ParameterError):
        schedule_value("lr", 51, cfg, 50)
    with pytest.raises(ParameterError):
        schedule_value("beta", 0, cfg, 50)


def test_decay_filter():
    assert trainer.decays("encoder.blocks.0.attn.qkv.weight")
    assert trainer.decays("fip.head_cls.fc1.bias")
    for name in ("encoder.blocks.0.norm1.gain", "encoder.blocks.0.norm1.bias", "encoder.norm.bias",
                 "encoder.blocks.1.ls1", "encoder.cls_token", "encoder.mask_token", "encoder.pos_embed"):
        assert not trainer.decays(name), name


def test_adamw_first_step_matches_hand_computation():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([0.5, -0.1])
    adamw_step({"w.weight": p}, AdamState(), lr=0.1, wd=0.5)
    # decay first, then a bias-corrected step of exactly lr * sign(g)
    expected = np.array([1.0, -2.0]) * (1 - 0.05) - 0.1 * np.sign([0.5, -0.1]) * (1 / (1 + 1e-8 / np.abs([0.5, 0.1])))
    np.testing.assert_allclose(p.data, expected, rtol=1e-12)


def test_adamw_converges_on_quadratic():
    target = np.array([3.0, -1.0, 0.5])
    p = Tensor(np.zeros(3), requires_grad=True)
    st = AdamState()
    for _ in range(2000):
        p.grad = 2 * (p.data - target)
        adamw_step({"x": p}, st, lr=0.01, wd=0.0)
    np.testing.assert_allclose(p.data, target, atol=1e-3)


def test_adamw_rejects_nonfinite_without_touching_params():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    a.grad = np.ones(2)
    b.grad = np.array([np.nan, 1.0])
    st = AdamState()
    with pytest.raises(NonFiniteError):
        adamw_step({"a": a, "b": b}, st, 0.1, 0.0)
    np.testing.assert_array_equal(a.data, 1.0)
    assert st.t == 0


def test_clip_gradients_per_tensor():
    a = Tensor(np.zeros(2), requires_grad=True)
    a.grad = np.array([3.0, 4.0])
    b = Tensor(np.zeros(2), requires_grad=True)
    b.grad = np.array([0.3, 0.4])
    trainer.clip_gradients({"a": a, "b": b}, 1.0)
    assert np.linalg.norm(a.grad) == pytest.approx(1.0, abs=1e-6)
    np.testing.assert_array_equal(b.grad, [0.3, 0.4])


def test_batches_cover_epoch_without_repeats():
    cfg = tiny_config()
    seen = np.concatenate([trainer.batch_indices(cfg, s, 8) for s in range(2)])
    assert sorted(seen) == list(range(8))
    assert not np.array_equal(trainer.batch_indices(cfg, 0, 8), trainer.batch_indices(cfg, 2, 8))


def test_training_writes_metrics_and_checkpoint(tmp_path):
    cfg = tiny_config(max_steps=4)
    res = trainer.train(cfg, tiny_corpus(), out_dir=tmp_path)
    rows = trainer.read_metrics(tmp_path / "metrics.tsv")
    assert [r["step"] for r in rows] == [1, 2, 3, 4]
    assert set(trainer.METRIC_COLUMNS) == set(rows[0])
    assert all(math.isfinite(r["L_total"]) for r in rows)
    assert rows[0] == res.metrics[0]
    ck = load_checkpoint(tmp_path / "checkpoint.piev")
    assert ck.step == 4
    assert ck.config_text == cfg.to_text()


def test_training_is_deterministic():
    cfg = tiny_config(max_steps=3)
    a = trainer.train(cfg, tiny_corpus())
    b = trainer.train(cfg, tiny_corpus())
    for k, p in a.state.student.items():
        np.testing.assert_array_equal(p.data, b.state.student[k].data)
    assert a.metrics == b.metrics


def test_resume_matches_unbroken_run(tmp_path):
    cfg = tiny_config(max_steps=6)
    full = trainer.train(cfg, tiny_corpus())
    trainer.train(cfg, tiny_corpus(), out_dir=tmp_path, steps=3)
    resumed = trainer.train(cfg, tiny_corpus(), out_dir=tmp_path,
                            resume=trainer.resume_from(tmp_path / "checkpoint.piev", cfg))
    for k, p in full.state.student.items():
        np.testing.assert_array_equal(p.data, resumed.state.student[k].data)
        np.testing.assert_array_equal(full.state.teacher[k].data, resumed.state.teacher[k].data)
    np.testing.assert_array_equal(full.state.center, resumed.state.center)
    assert [r["step"] for r in trainer.read_metrics(tmp_path / "metrics.tsv")] == list(range(1, 7))


def test_resume_rejects_other_config(tmp_path):
    cfg = tiny_config(max_steps=2)
    trainer.train(cfg, tiny_corpus(), out_dir=tmp_path)
    with pytest.raises(IncompatibleCheckpointError):
        trainer.resume_from(tmp_path / "checkpoint.piev", cfg.replace(seed=1))
    ck = load_checkpoint(tmp_path / "checkpoint.piev")
    with pytest.raises(IncompatibleCheckpointError):
        trainer.train(cfg.replace(seed=1), tiny_corpus(), resume=ck)


def test_nonfinite_loss_aborts_and_keeps_last_state(tmp_path, monkeypatch):
    cfg = tiny_config(max_steps=4)
    corpus = tiny_corpus()
    real = trainer.distill.compute_losses
    calls = {"n": 0}

    def poisoned(*a, **kw):
        calls["n"] += 1
        losses = real(*a, **kw)
        if calls["n"] == 3:
            losses.mim_u = losses.mim_u * np.nan
        return losses

    monkeypatch.setattr(trainer.distill, "compute_losses", poisoned)
    with pytest.raises(NonFiniteError):
        trainer.train(cfg, corpus, out_dir=tmp_path)
    assert load_checkpoint(tmp_path / "checkpoint.piev").step == 2


def test_empty_corpus():
    with pytest.raises(DataError):
        trainer.train(tiny_config(), [])


def test_metrics_log_rejects_foreign_file(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text("step\tloss\n1\t2\n")
    with pytest.raises(DataError):
        trainer.read_metrics(p)
