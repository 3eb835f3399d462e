import numpy as np
import pytest

from pievit import numerics as nx
from pievit.numerics import Tensor


def numeric_grad(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = arr[i]
        arr[i] = orig + h
        up = f()
        arr[i] = orig - h
        down = f()
        arr[i] = orig
        g[i] = (up - down) / (2 * h)
    return g


def check_grads(build, tensors, h: float = 1e-6, rtol: float = 1e-6, atol: float = 1e-8):
    """Compare tape gradients of ``build()`` (a scalar Tensor) with central differences."""
    for t in tensors:
        t.grad = None
    with nx.Tape() as tape:
        loss = build()
    tape.backward(loss)
    for t in tensors:
        num = numeric_grad(lambda: build().item(), t.data, h)
        assert t.grad is not None
        np.testing.assert_allclose(t.grad, num, rtol=rtol, atol=atol)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0, scale, shape), requires_grad=True)


def tiny_config(**kw):
    """A 16x16-pixel, 4x4-grid model small enough for per-test training runs."""
    from pievit.config import TrainConfig
    base = dict(image_size=16, patch_size=4, dim=16, depth=2, heads=2, out_dim=8,
                head_hidden=16, bottleneck=8, batch_size=4, max_steps=6,
                warmup_epochs=1.0, total_epochs=3.0, base_lr=1e-3, layerscale_init=0.1)
    base.update(kw)
    return TrainConfig(**base)


def tiny_corpus(classes=2, per_class=4, resolution=16, seed=0):
    from pievit.pipeline import SyntheticCorpusSpec, synth_corpus
    return synth_corpus(SyntheticCorpusSpec(classes=classes, samples_per_class=per_class,
                                            resolution=resolution, seed=seed))


ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def record_criterion(number: int, title: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE[number] = (title, passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}"
                                    + (f"  [{detail}]" if detail else ""))
