"""Adam with L2 weight decay, plus the finite-difference gradient check."""

from __future__ import annotations

import numpy as np

from .tape import Parameter, backward

__all__ = ["AdamState", "init_adam_states", "adam_step", "finite_diff_check"]


class AdamState:
    """First/second moment accumulators for one parameter."""

    __slots__ = ("m", "v", "t", "beta1", "beta2", "eps")

    def __init__(self, param: Parameter, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros_like(param.value)
        self.v = np.zeros_like(param.value)
        self.t = 0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


def init_adam_states(params) -> list[AdamState]:
    return [AdamState(p) for p in params]


def adam_step(params, states, lr: float, weight_decay: float = 0.0) -> None:
    """One Adam update over a parameter group; grads are zeroed after.

    The L2 term weight_decay * value is added to the gradient before the
    moment updates.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for p, st in zip(params, states):
        g = p.grad if p.grad is not None else np.zeros_like(p.value)
        if weight_decay:
            g = g + weight_decay * p.value
        st.t += 1
        st.m = st.beta1 * st.m + (1.0 - st.beta1) * g
        st.v = st.beta2 * st.v + (1.0 - st.beta2) * (g * g)
        m_hat = st.m / (1.0 - st.beta1**st.t)
        v_hat = st.v / (1.0 - st.beta2**st.t)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + st.eps)
        p.zero_grad()


# relative error uses a floor so near-zero entries compare absolutely at
# this scale instead of amplifying finite-difference rounding noise
_REL_FLOOR = 1e-4
_ZERO_ATOL = 1e-7


def finite_diff_check(loss_fn, params, h: float = 1e-5, tolerance: float = 1e-4) -> dict:
    """Compare analytic gradients against central differences.

    loss_fn must be deterministic (dropout off, fixed operators) and
    rebuild the tape from the current parameter values on every call.
    Returns {param name: {"max_rel_err", "passed", "status"}}.
    """
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    analytic = {id(p): (None if p.grad is None else p.grad.copy()) for p in params}

    report = {}
    for p in params:
        an = analytic[id(p)]
        if an is None:
            report[p.name] = {"max_rel_err": 0.0, "passed": True, "status": "no-grad, skipped"}
            continue
        flat_v = p.value.ravel()
        flat_a = an.ravel()
        worst = 0.0
        for k in range(flat_v.size):
            orig = flat_v[k]
            flat_v[k] = orig + h
            lp = float(loss_fn().value)
            flat_v[k] = orig - h
            lm = float(loss_fn().value)
            flat_v[k] = orig
            fd = (lp - lm) / (2.0 * h)
            a = flat_a[k]
            scale = max(abs(a), abs(fd))
            if scale < _ZERO_ATOL:
                continue
            worst = max(worst, abs(a - fd) / max(scale, _REL_FLOOR))
        report[p.name] = {
            "max_rel_err": worst,
            "passed": worst <= tolerance,
            "status": "checked",
        }
        p.zero_grad()
    return report
