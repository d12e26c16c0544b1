import numpy as np
import pytest

from bioage import _kernels_py
from bioage._backend import BACKEND
from bioage.hetreg import TrainConfig, init_params

try:
    from bioage import _kernels as compiled
except ImportError:  # pure-Python install
    compiled = None

needs_compiled = pytest.mark.skipif(compiled is None, reason="compiled extension not built")


def case(seed, hidden=(7, 5), fusion=4, d=6, n=33):
    rng = np.random.default_rng(seed)
    p = init_params(d, TrainConfig(hidden_sizes=list(hidden), fusion_width=fusion), rng)
    p.flat[:] += 0.2 * rng.normal(size=p.flat.size)
    X = rng.normal(size=(n, d))
    sex = rng.integers(0, 2, n).astype(float)
    ca = rng.uniform(48, 97, n)
    return p, X, sex, ca


def run(mod, p, X, sex, ca, lvshift=3.0):
    g = np.empty_like(p.flat)
    loss = mod.loss_grad(p.flat, p.dims, p.fusion_index, X, sex, ca, 70.0, 10.0, lvshift, g)
    return loss, g


def adam_reference(p, g, m, v, lr, b1, b2, eps, t):
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mhat = m / (1 - b1**t)
    vhat = v / (1 - b2**t)
    return p - lr * mhat / (np.sqrt(vhat) + eps), m, v


def test_backend_reported():
    assert BACKEND in ("compiled", "python")


@needs_compiled
@pytest.mark.parametrize("seed, hidden, n", [(0, (7, 5), 33), (1, (), 1), (2, (3,), 32), (3, (9, 8, 7), 5)])
def test_compiled_matches_python(seed, hidden, n):
    p, X, sex, ca = case(seed, hidden=hidden, n=n)
    l1, g1 = run(compiled, p, X, sex, ca)
    l2, g2 = run(_kernels_py, p, X, sex, ca)
    assert l1 == pytest.approx(l2, rel=1e-12)
    np.testing.assert_allclose(g1, g2, rtol=1e-10, atol=1e-13)


@needs_compiled
@pytest.mark.parametrize("lvshift", [-40.0, 40.0])
def test_compiled_matches_python_when_clamped(lvshift):
    p, X, sex, ca = case(4)
    l1, g1 = run(compiled, p, X, sex, ca, lvshift)
    l2, g2 = run(_kernels_py, p, X, sex, ca, lvshift)
    assert l1 == pytest.approx(l2, rel=1e-12)
    np.testing.assert_allclose(g1, g2, rtol=1e-10, atol=1e-13)


@pytest.mark.parametrize("mod", [_kernels_py, pytest.param(compiled, marks=needs_compiled)], ids=["python", "compiled"])
def test_adam_matches_reference(mod):
    rng = np.random.default_rng(5)
    p = rng.normal(size=50)
    m = np.zeros(50)
    v = np.zeros(50)
    ref_p, ref_m, ref_v = p.copy(), m.copy(), v.copy()
    for t in range(1, 6):
        g = rng.normal(size=50)
        mod.adam_update(p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, t)
        ref_p, ref_m, ref_v = adam_reference(ref_p, g, ref_m, ref_v, 1e-3, 0.9, 0.999, 1e-8, t)
    np.testing.assert_allclose(p, ref_p, rtol=1e-13)
    np.testing.assert_allclose(m, ref_m, rtol=1e-13)
    np.testing.assert_allclose(v, ref_v, rtol=1e-13)


def test_first_adam_step_is_lr_sized():
    # bias-corrected first step moves every coordinate by ~lr against its gradient sign
    p = np.zeros(4)
    g = np.array([3.0, -0.01, 200.0, -7.0])
    _kernels_py.adam_update(p, g, np.zeros(4), np.zeros(4), 0.01, 0.9, 0.999, 1e-8, 1)
    np.testing.assert_allclose(p, -0.01 * np.sign(g), rtol=1e-5)
