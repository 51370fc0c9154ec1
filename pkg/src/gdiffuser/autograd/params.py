"""Named parameter collections and deterministic initialisation."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterable

import numpy as np

from .tensor import DEFAULT_DTYPE, BatchNormState, Tensor

ROLES = ("linear_weight", "bias", "bn_gamma", "bn_beta")


class ModelParams:
    """Ordered ``name -> Tensor`` map plus batch-norm running statistics.

    Names are hierarchical (``layers.0.attn.wq``). Running statistics are
    exposed in :meth:`state_dict` as ``<site>.running_mean`` and
    ``<site>.running_var``.
    """

    def __init__(self, entries=None, rng_seed: int = 0):
        self.entries: OrderedDict[str, Tensor] = OrderedDict(entries or ())
        self.norms: OrderedDict[str, BatchNormState] = OrderedDict()
        self.rng_seed = rng_seed

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self.entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        tensor.name = name
        self.entries[name] = tensor
        return tensor

    def add_norm(self, name: str, num_channels: int, dtype=DEFAULT_DTYPE) -> BatchNormState:
        if name in self.norms:
            raise KeyError(f"duplicate norm site {name!r}")
        state = BatchNormState(num_channels, dtype=dtype)
        self.norms[name] = state
        return state

    def items(self):
        return self.entries.items()

    def values(self):
        return self.entries.values()

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.entries.values()))

    def zero_grad(self) -> None:
        for t in self.entries.values():
            t.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict((k, t.data.copy()) for k, t in self.entries.items())
        for k, s in self.norms.items():
            out[f"{k}.running_mean"] = s.running_mean.copy()
            out[f"{k}.running_var"] = s.running_var.copy()
        return out

    def load_state_dict(self, state, strict: bool = True) -> None:
        expected = set(self.entries) | {f"{k}.{s}" for k in self.norms for s in ("running_mean", "running_var")}
        if strict:
            missing = expected - set(state)
            unexpected = set(state) - expected
            if missing or unexpected:
                raise ValueError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, t in self.entries.items():
            if k in state:
                arr = np.asarray(state[k], dtype=t.dtype)
                if arr.shape != t.shape:
                    raise ValueError(f"{k}: shape {arr.shape} does not match {t.shape}")
                t.data = arr.copy()
        for k, s in self.norms.items():
            if f"{k}.running_mean" in state:
                s.running_mean = np.asarray(state[f"{k}.running_mean"], dtype=s.running_mean.dtype).copy()
                s.running_var = np.asarray(state[f"{k}.running_var"], dtype=s.running_var.dtype).copy()


def glorot_bound(shape) -> float:
    fan_in, fan_out = shape[-2], shape[-1]
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(spec: Iterable, seed: int, dtype=DEFAULT_DTYPE) -> ModelParams:
    """Build parameters from ``(name, shape, role)`` triples.

    Linear weights are Glorot-uniform, biases and batch-norm shifts zero,
    batch-norm scales one. Draws happen in spec order from a single
    ``numpy`` PCG64 stream seeded by ``seed``.
    """
    rng = np.random.default_rng(seed)
    params = ModelParams(rng_seed=seed)
    for name, shape, role in spec:
        shape = tuple(int(s) for s in shape)
        if role == "linear_weight":
            if len(shape) < 2:
                raise ValueError(f"{name}: linear weights need >= 2 dims, got {shape}")
            a = glorot_bound(shape)
            data = rng.uniform(-a, a, size=shape)
        elif role in ("bias", "bn_beta"):
            data = np.zeros(shape)
        elif role == "bn_gamma":
            data = np.ones(shape)
        else:
            raise ValueError(f"{name}: unknown role {role!r}; expected one of {ROLES}")
        params.add(name, Tensor(data.astype(dtype), requires_grad=True))
    return params
