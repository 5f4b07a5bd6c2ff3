"""Central-difference gradient oracle."""

import numpy as np

from .tensor import NonFiniteError


def _evaluate(f):
    value = f()
    v = float(value.data.reshape(-1)[0])
    if not np.isfinite(v):
        raise NonFiniteError("objective evaluated to a non-finite value")
    return value, v


def numeric_grad(f, param, eps=1e-5):
    flat = param.data.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        _, fp = _evaluate(f)
        flat[i] = orig - eps
        _, fm = _evaluate(f)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * eps)
    return out.reshape(param.shape)


def fd_report(f, params, eps=1e-5, floor=1e-10):
    """Per-parameter relative error between analytic and central-difference
    gradients of the scalar-valued ``f()``.

    The error for one parameter tensor is ``|g_a - g_n| / max(|g_a|, |g_n|,
    floor)`` using Euclidean norms, so tensors whose entries are all tiny do
    not blow up from round-off. Both gradients zero gives error 0.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    named = list(params.items()) if isinstance(params, dict) else list(enumerate(params))
    params = [p for _, p in named]
    for p in params:
        p.zero_grad()
    value, _ = _evaluate(f)
    value.backward()
    report = {}
    for name, p in named:
        analytic = p.grad.copy()
        numeric = numeric_grad(f, p, eps)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
        report[name] = float(np.linalg.norm(analytic - numeric) / scale)
    for p in params:
        p.zero_grad()
    return report


def fd_check(f, params, eps=1e-5):
    """Worst relative gradient error over ``params`` (see :func:`fd_report`)."""
    report = fd_report(f, params, eps)
    return max(report.values()) if report else 0.0
