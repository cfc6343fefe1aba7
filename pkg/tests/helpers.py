"""Shared test utilities: the finite-difference gradient oracle."""

import numpy as np

from prunetune import autodiff as ad
from prunetune.autodiff import Tape, Tensor

REL_TOL = 1e-4
FD_STEP = 1e-5


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(1e-8, abs(a), abs(b))


def fd_gradcheck(fn, params, rng, h=FD_STEP, tol=REL_TOL):
    """Compare tape gradients of ``fn()`` against central finite differences.

    ``fn`` rebuilds the graph from the float64 ``params`` on every call. The
    output is probed with a fixed random linear functional so that outputs
    with constant sums (softmax rows) still get a well-conditioned check.
    Returns the worst relative error over all parameter entries.
    """
    for p in params:
        assert p.data.dtype == np.float64, "gradient checks run in float64"
    probe = None

    def loss_value() -> float:
        nonlocal probe
        out = fn()
        if probe is None:
            probe = rng.uniform(-1.0, 1.0, size=out.shape)
        return float((out.data * probe).sum())

    def loss_tensor():
        out = fn()
        return ad.sum_all(ad.mul(out, Tensor(probe, dtype=np.float64)))

    loss_value()  # fix the probe
    for p in params:
        p.grad = None
    with Tape() as tape:
        tape.backward(loss_tensor())

    worst = 0.0
    for p in params:
        assert p.grad is not None, "parameter received no gradient"
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_value()
            flat[i] = orig - h
            down = loss_value()
            flat[i] = orig
            worst = max(worst, rel_err(gflat[i], (up - down) / (2 * h)))
    assert worst <= tol, f"gradient check failed: max relative error {worst:.3e} > {tol}"
    return worst
