import numpy as np

from .tensor import NonFiniteError


class Optimizer:
    def __init__(self, params, lr):
        if not lr > 0:
            raise ValueError("learning rate must be positive")
        self.params = [p for p in params if p.requires_grad]
        self.lr = float(lr)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def _grads(self):
        grads = [p.grad for p in self.params]
        for g in grads:
            if not np.isfinite(g).all():
                raise NonFiniteError("non-finite gradient")
        return grads


class SGD(Optimizer):
    def step(self):
        for p, g in zip(self.params, self._grads()):
            p.data -= self.lr * g


class Adam(Optimizer):
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        super().__init__(params, lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        grads = self._grads()
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(kind, params, lr, **hyper):
    if kind == "sgd":
        return SGD(params, lr)
    if kind == "adam":
        return Adam(params, lr, **hyper)
    raise ValueError(f"unknown optimizer {kind!r}")


def optimizer_step(kind, params, lr, state=None, **hyper):
    """One update of ``params`` from their current ``.grad``. Pass the
    returned optimizer back as ``state`` to carry Adam moments."""
    opt = state if state is not None else make_optimizer(kind, params, lr, **hyper)
    opt.step()
    return opt
