"""Parameter-holding building blocks: 2-D convolutions and linear maps.

Weights are fan-in-scaled uniform by default; passing zero_init=True
gives an all-zero layer (used for the final layer of every regression
head so an untrained model starts at the identity alignment).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d:
    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1,
                 padding: int = 0, rng: np.random.Generator | None = None,
                 zero_init: bool = False):
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.stride, self.padding = stride, padding
        if zero_init:
            w = np.zeros((c_out, c_in, k, k))
        else:
            w = _uniform(rng, (c_out, c_in, k, k), c_in * k * k)
        self.w = T.Var(w, requires_grad=True, op="param")
        self.b = T.Var(np.zeros(c_out), requires_grad=True, op="param")

    def __call__(self, x: T.Var) -> T.Var:
        return T.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.padding - self.k) // self.stride + 1
        ow = (w + 2 * self.padding - self.k) // self.stride + 1
        return oh, ow

    def named_params(self, prefix: str):
        yield prefix + ".w", self.w
        yield prefix + ".b", self.b


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None,
                 zero_init: bool = False):
        self.n_in, self.n_out = n_in, n_out
        w = np.zeros((n_out, n_in)) if zero_init else _uniform(rng, (n_out, n_in), n_in)
        self.w = T.Var(w, requires_grad=True, op="param")
        self.b = T.Var(np.zeros(n_out), requires_grad=True, op="param")

    def __call__(self, x: T.Var) -> T.Var:
        return T.linear(x, self.w, self.b)

    def named_params(self, prefix: str):
        yield prefix + ".w", self.w
        yield prefix + ".b", self.b
