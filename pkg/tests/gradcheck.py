"""Central finite-difference gradient checking shared by the test modules."""

import numpy as np

TOL_REL = 1e-4
TOL_ABS = 1e-7


def numeric_grad(f, arr, h=1e-5):
    """Central-difference gradient of scalar f() w.r.t. every entry of arr."""
    g = np.zeros_like(arr)
    flat = arr.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = f()
        flat[i] = orig - h
        minus = f()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * h)
    return g


def assert_grads_close(analytic, numeric, label=""):
    a = np.asarray(analytic).ravel()
    n = np.asarray(numeric).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
    err = np.abs(a - n)
    bad = (err > TOL_ABS) & (err / denom > TOL_REL)
    assert not bad.any(), (
        f"{label}: {bad.sum()}/{a.size} gradient entries off; "
        f"worst rel {np.max(err / denom):.3e}, worst abs {err.max():.3e}"
    )


def check_network_gradients(net, loss_fn, arrays=None, h=1e-5, label=""):
    """loss_fn() must return (loss, flat_grads aligned with arrays).

    arrays defaults to the network's parameters. Every entry is perturbed.
    """
    if arrays is None:
        arrays = net.param_arrays()
    loss, grads = loss_fn()
    assert len(grads) == len(arrays)
    for k, (arr, g) in enumerate(zip(arrays, grads)):
        num = numeric_grad(lambda: loss_fn()[0], arr, h=h)
        assert_grads_close(g, num, label=f"{label} array {k}")
