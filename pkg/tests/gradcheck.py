"""Central finite-difference gradient checks shared by the test modules."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from jdcodec import autodiff as ad
from jdcodec.autodiff import Tape, Tensor

EPS = 1e-3
RTOL = 1e-3
# gradients smaller than this are compared on an absolute scale
FLOOR = 1e-3


def scalarize(out: Tensor, rng: np.random.Generator) -> Tensor:
    """Random linear functional of ``out`` so every output element matters."""
    if out.size == 1:
        return out
    w = Tensor(rng.standard_normal(out.shape))
    return ad.sum(ad.mul(out, w))


def check(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], seed: int = 0, eps: float = EPS) -> float:
    """Return the worst relative error between tape and numeric gradients.

    ``fn`` maps tensors to a tensor; a fixed random projection turns it into
    a scalar.  Every element of every input is perturbed.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    proj_seed = np.random.SeedSequence(seed).generate_state(1)[0]

    def loss(vals, grad=False):
        ts = [Tensor(v.copy(), requires_grad=grad) for v in vals]
        with Tape() as tape:
            out = scalarize(fn(*ts), np.random.default_rng(proj_seed))
        if grad:
            ad.backward(out, tape)
            return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]
        return float(out.data)

    analytic = loss(arrays, grad=True)
    worst = 0.0
    for i, a in enumerate(arrays):
        for idx in np.ndindex(a.shape):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[i][idx] += eps
            minus[i][idx] -= eps
            num = (loss(plus) - loss(minus)) / (2 * eps)
            ana = float(analytic[i][idx])
            err = abs(num - ana) / max(abs(num), abs(ana), FLOOR)
            worst = max(worst, err)
    return worst
