"""LSTM cell, sequence unrolling, softmax classifier heads and cross-entropy."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

LOG_FLOOR = 1e-12


@dataclass
class LstmParams:
    """Gate weights stacked row-wise in the order input, forget, output, candidate.

    ``w_x`` is (4h, input_dim), ``w_h`` is (4h, h), ``b`` is (4h,).
    """

    w_x: Tensor
    w_h: Tensor
    b: Tensor

    def __post_init__(self):
        self.w_x, self.w_h, self.b = map(ad.as_tensor, (self.w_x, self.w_h, self.b))
        rows = self.w_x.shape[0]
        if rows % 4 or self.w_h.shape != (rows, rows // 4) or self.b.shape != (rows,):
            raise ShapeError("LstmParams", self.w_x.shape, self.w_h.shape, self.b.shape)

    @property
    def hidden_dim(self) -> int:
        return self.w_h.shape[1]

    @property
    def input_dim(self) -> int:
        return self.w_x.shape[1]


@dataclass
class LstmState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, hidden_dim: int, batch_shape: tuple[int, ...] = ()) -> "LstmState":
        shape = (*batch_shape, hidden_dim)
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))


@dataclass
class ClassifierHead:
    weight: Tensor
    bias: Tensor

    def __post_init__(self):
        self.weight, self.bias = ad.as_tensor(self.weight), ad.as_tensor(self.bias)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError("ClassifierHead", self.weight.shape, self.bias.shape)
        if self.weight.shape[0] < 2:
            raise ValueError("classifier head needs at least 2 classes")

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]


def lstm_step(params: LstmParams, state: LstmState, x) -> LstmState:
    x = ad.as_tensor(x)
    hd = params.hidden_dim
    if x.shape[-1] != params.input_dim:
        raise ShapeError("lstm_step input", params.w_x.shape, x.shape)
    if state.h.shape[-1] != hd or state.c.shape[-1] != hd:
        raise ShapeError("lstm_step state", params.w_h.shape, state.h.shape, state.c.shape)
    z = ad.linear(x, params.w_x) + ad.linear(state.h, params.w_h) + params.b
    i = ad.sigmoid(z[..., :hd])
    f = ad.sigmoid(z[..., hd:2 * hd])
    o = ad.sigmoid(z[..., 2 * hd:3 * hd])
    g = ad.tanh(z[..., 3 * hd:])
    c = f * state.c + i * g
    h = o * ad.tanh(c)
    return LstmState(h, c)


def run_person_sequence(params: LstmParams, xs) -> list[LstmState]:
    """Unroll from the zero state over the leading (time) axis of ``xs``."""
    if len(xs) == 0:
        raise ValueError("run_person_sequence: empty sequence")
    first = ad.as_tensor(xs[0])
    state = LstmState.zeros(params.hidden_dim, first.shape[:-1])
    states = []
    for x in xs:
        state = lstm_step(params, state, x)
        states.append(state)
    return states


def logits(head: ClassifierHead, z) -> Tensor:
    z = ad.as_tensor(z)
    if z.shape[-1] != head.weight.shape[1]:
        raise ShapeError("classify", head.weight.shape, z.shape)
    return ad.linear(z, head.weight, head.bias)


def classify(head: ClassifierHead, z) -> Tensor:
    return ad.softmax(logits(head, z), axis=-1)


def cross_entropy(p, label) -> Tensor:
    """``-ln max(p[label], 1e-12)``; ``label`` may be an int array over leading axes."""
    p = ad.as_tensor(p)
    labels = np.asarray(label)
    k = p.shape[-1]
    if labels.dtype.kind not in "iu" or np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"label out of range [0, {k}): {labels.tolist()}")
    return ad.mul(ad.log(ad.pick(p, labels), floor=LOG_FLOOR), -1.0)
