"""Parameter containers shared by every model in the package."""

import numpy as np

from .numerics import Tensor


class Module:
    """Owns an ordered ``params`` dict of leaf tensors."""

    def __init__(self):
        self.params = {}
        self.frozen = False

    def add_param(self, name, value):
        self.params[name] = Tensor(value, requires_grad=not self.frozen)
        return self.params[name]

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self, prefix=""):
        return {prefix + k: v for k, v in self.params.items()}

    def freeze(self):
        """Detach every parameter from gradient tracking for good."""
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        self.frozen = True
        return self

    def state(self):
        return [(k, p.data.copy()) for k, p in self.params.items()]

    def load_state(self, entries):
        entries = list(entries)
        if [k for k, _ in entries] != list(self.params):
            raise ValueError("parameter names do not match this module")
        for k, arr in entries:
            p = self.params[k]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()
        return self


def dense_init(rng, fan_in, fan_out, gain=1.0):
    return rng.normal((fan_in, fan_out), scale=gain / np.sqrt(fan_in))


def one_hot(ids, n):
    ids = np.asarray(ids, dtype=np.int64)
    out = np.zeros(ids.shape + (n,))
    np.put_along_axis(out, ids[..., None], 1.0, axis=-1)
    return out
