import numpy as np
import pytest

from unihema import tensor as T


def numeric_gradient(loss_fn, param, h=1e-6):
    """Central finite differences of a scalar loss w.r.t. one parameter tensor."""
    base = param.data
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(loss_fn().data)
        flat[i] = old - h
        fm = float(loss_fn().data)
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def assert_close_grads(analytic, numeric, rel=1e-4, abs_floor=1e-9):
    analytic = np.asarray(analytic, dtype=np.float64)
    err = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    ok = (err <= rel * scale) | (err <= abs_floor)
    assert ok.all(), f"gradient mismatch: max rel {np.max(err / np.maximum(scale, 1e-300)):.3e}"


def gradcheck(loss_fn, params, rel=1e-4, h=1e-6):
    """Compare backward() gradients of loss_fn() against central differences.

    The absolute floor tracks the round-off noise of the central difference
    itself (eps * |loss| / h), so exactly-zero gradients are not rejected
    for failing a relative test against pure measurement noise.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    T.backward(loss)
    floor = max(2e-8, 1e-15 * abs(float(loss.data)) / h)
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numeric_gradient(loss_fn, p, h=h)
        assert_close_grads(analytic, numeric, rel=rel, abs_floor=floor)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def default_corpus(tmp_path_factory):
    """The default synthetic corpus: 256 train / 64 eval per task, canvas 48."""
    from unihema.dataset import read_dataset, write_dataset

    root = tmp_path_factory.mktemp("default-corpus")
    write_dataset(root, seed=0, per_task=256, canvas=48)
    return read_dataset(root)
