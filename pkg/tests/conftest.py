import numpy as np
import pytest

from attentrack import numcore as nc

FD_EPS = 1e-5
FD_RTOL = 1e-4
FD_FLOOR = 1e-6
GRAD_SEEDS = range(20)


def fd_mismatch(loss_fn, tensors):
    """Largest violation of |autodiff - fd| <= max(rtol * max(|a|, |fd|), floor), over ``tensors``.

    ``loss_fn`` builds a fresh scalar loss each call. A non-positive return value means pass.
    """
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    nc.backward(loss_fn())
    worst = -np.inf
    for t in tensors:
        auto = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        num = nc.numerical_grad(lambda: loss_fn().item(), t, FD_EPS)
        tol = np.maximum(FD_RTOL * np.maximum(np.abs(auto), np.abs(num)), FD_FLOOR)
        worst = max(worst, float(np.max(np.abs(auto - num) - tol)))
    return worst


def assert_grads_match(loss_fn, tensors):
    bad = fd_mismatch(loss_fn, tensors)
    assert bad <= 0, f"finite-difference mismatch exceeds tolerance by {bad:.3e}"


def weighted_sum(out, rng):
    """A scalar that depends on every entry of ``out`` with distinct weights."""
    w = nc.Tensor(rng.normal(size=out.shape))
    return nc.tensor_sum(nc.mul(out, w))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
