import numpy as np
import pytest

from caap import tensor as T

FD_STEP = 1e-3


def numeric_grad(f, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x`` (x is not modified)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + step
        hi = f(x)
        x[i] = orig - step
        lo = f(x)
        x[i] = orig
        g[i] = (hi - lo) / (2 * step)
    return g


def assert_grad_close(analytic, numeric, rel=1e-4, abs_=1e-6):
    """Elementwise |a - n| <= max(abs_, rel * max(|a|, |n|))."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    assert a.shape == n.shape
    tol = np.maximum(abs_, rel * np.maximum(np.abs(a), np.abs(n)))
    bad = np.abs(a - n) > tol
    assert not bad.any(), f"max err {np.abs(a - n)[bad].max():.3g} at {np.argwhere(bad)[:3].tolist()}"


def check_op_grad(fn, arrays, rel=1e-4, abs_=1e-6, step=FD_STEP):
    """Compare autodiff gradients of sum(w * fn(*tensors)) against finite differences."""
    gen = np.random.default_rng(123)
    tensors = [T.Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    w = gen.standard_normal(out.shape)
    loss = (out * T.Tensor(w)).sum()
    grads = T.grad(loss, tensors)
    for k, a in enumerate(arrays):
        def scalar(v, k=k):
            args = [T.Tensor(v if j == k else arrays[j]) for j in range(len(arrays))]
            return float((fn(*args).data * w).sum())

        assert_grad_close(grads[k], numeric_grad(scalar, a, step), rel, abs_)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
