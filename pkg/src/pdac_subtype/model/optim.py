"""AdamW with decoupled weight decay over :class:`ModelParams`."""

from dataclasses import dataclass, field

import numba
import numpy as np

from ..exceptions import InputValidationError


@dataclass
class OptState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


@numba.njit(cache=True)
def _adamw_kernel(theta, g, m, v, lr, beta1, beta2, bc1, bc2, eps, decay):
    # single pass over flat, contiguous views; the fusion matrix is the bulk of the cost.
    # lr * m_hat / (sqrt(v_hat) + eps) with the bias corrections folded into constants
    c1 = 1.0 - beta1
    c2 = 1.0 - beta2
    step = lr / bc1
    inv_sqrt_bc2 = 1.0 / np.sqrt(bc2)
    for i in range(theta.size):
        gi = g[i]
        mi = beta1 * m[i] + c1 * gi
        vi = beta2 * v[i] + c2 * (gi * gi)
        m[i] = mi
        v[i] = vi
        theta[i] = theta[i] * decay - step * mi / (np.sqrt(vi) * inv_sqrt_bc2 + eps)


def _flat(a, name):
    if not a.flags.c_contiguous or not a.flags.writeable:
        raise InputValidationError(f"{name}: parameter must be a writable contiguous array")
    return a.reshape(-1)


def adamw_step(
    params,
    grads,
    state,
    lr=5e-5,
    wd=1e-5,
    beta1=0.9,
    beta2=0.999,
    eps=1e-8,
    names=None,
):
    """One AdamW update, in place on ``params`` and ``state``.

    theta <- theta * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)

    ``names`` restricts the update to a subset of parameters; the others
    are left untouched (no decay either).
    """
    names = tuple(params.names()) if names is None else tuple(names)
    for name in names:
        if getattr(params, name).shape != getattr(grads, name).shape:
            raise InputValidationError(
                f"{name}: gradient shape {getattr(grads, name).shape} != parameter {getattr(params, name).shape}"
            )
    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    decay = 1.0 - lr * wd
    for name in names:
        theta = getattr(params, name)
        g = np.ascontiguousarray(getattr(grads, name), dtype=np.float64).reshape(-1)
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        _adamw_kernel(
            _flat(theta, name),
            g,
            state.m[name].reshape(-1),
            state.v[name].reshape(-1),
            lr, beta1, beta2, bc1, bc2, eps, decay,
        )
    return params, state
