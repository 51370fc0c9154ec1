"""Central finite-difference gradient checking."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, _topological, no_grad


class NonDeterministicError(ValueError):
    pass


def _has_stochastic(root: Tensor) -> bool:
    return any(n._ctx is not None and type(n._ctx).stochastic for n in _topological(root))


def gradient_errors(f, params, eps: float = 1e-5, max_coords: int | None = 64, seed: int = 0):
    """Per-parameter max relative error between backprop and central differences.

    ``f`` is a zero-argument callable returning a scalar :class:`Tensor`;
    ``params`` is a mapping name -> Tensor or a sequence of Tensors. Up to
    ``max_coords`` coordinates per tensor are sampled (all if ``None``).
    """
    if not hasattr(params, "items"):
        params = {f"p{i}": p for i, p in enumerate(params)}
    params = dict(params.items())
    for p in params.values():
        p.grad = None
    loss = f()
    if _has_stochastic(loss):
        raise NonDeterministicError("function contains stochastic operations (dropout in training mode?)")
    loss.backward()
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}

    rng = np.random.default_rng(seed)
    errors = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        if max_coords is None or flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            with no_grad():
                flat[c] = orig + eps
                fp = float(f().data)
                flat[c] = orig - eps
                fm = float(f().data)
            flat[c] = orig
            num = (fp - fm) / (2 * eps)
            a = float(analytic[name].reshape(-1)[c])
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
        errors[name] = worst
    return errors


def grad_check(f, params, eps: float = 1e-5, max_coords: int | None = 64, seed: int = 0) -> float:
    """Max relative error over sampled coordinates of all ``params``."""
    errs = gradient_errors(f, params, eps=eps, max_coords=max_coords, seed=seed)
    return max(errs.values()) if errs else 0.0
