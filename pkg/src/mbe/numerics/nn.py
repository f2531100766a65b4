"""Parameters, initialisation, the stacked LSTM cell and the Adam optimiser."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from mbe.numerics import tensor as T
from mbe.numerics.tensor import ShapeError, Tensor


def xavier_init(shape: tuple[int, ...], rng: np.random.Generator) -> Tensor:
    """Xavier/Glorot normal: N(0, 2 / (fan_in + fan_out))."""
    shape = tuple(int(s) for s in shape)
    if len(shape) not in (1, 2) or min(shape) <= 0:
        raise ValueError(f"xavier_init: expected a non-empty 1-D or 2-D shape, got {shape}")
    if len(shape) == 1:
        fan_in = fan_out = shape[0]
    else:
        fan_out, fan_in = shape
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


class ParamSet:
    """Ordered, uniquely named parameter tensors with fixed shapes."""

    def __init__(self, tensors: Mapping[str, Tensor] | None = None):
        self._tensors: OrderedDict[str, Tensor] = OrderedDict()
        for name, t in (tensors or {}).items():
            self.add(name, t)

    def add(self, name: str, t: Tensor) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        t.requires_grad = True
        t.name = name
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._tensors.items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for name, t in self._tensors.items():
            new = np.asarray(arrays[name], dtype=np.float64)
            if new.shape != t.shape:
                raise ShapeError(f"parameter {name}: shape {new.shape} != {t.shape}")
            t.data = new.copy()

    def copy(self) -> "ParamSet":
        return ParamSet({k: Tensor(v.data.copy()) for k, v in self._tensors.items()})


@dataclass
class Adam:
    """Adam with bias correction; state lives alongside the parameter names."""

    params: ParamSet
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, grads: Mapping[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name in grads:
            if name not in self.params:
                raise KeyError(f"gradient for unknown parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {name}: shape {g.shape} != {p.shape}")
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def optimizer_step(opt: Adam, grads: Mapping[str, np.ndarray], lr: float | None = None) -> ParamSet:
    opt.step(grads, lr)
    return opt.params


def init_lstm(params: ParamSet, prefix: str, input_dim: int, hidden_dim: int, layers: int,
              rng: np.random.Generator) -> None:
    for layer in range(layers):
        in_dim = input_dim if layer == 0 else hidden_dim
        params.add(f"{prefix}.{layer}.w_ih", xavier_init((4 * hidden_dim, in_dim), rng))
        params.add(f"{prefix}.{layer}.w_hh", xavier_init((4 * hidden_dim, hidden_dim), rng))
        params.add(f"{prefix}.{layer}.bias", Tensor(np.zeros(4 * hidden_dim)))


LSTMState = list[tuple[Tensor, Tensor]]


def lstm_zero_state(batch: int, hidden_dim: int, layers: int) -> LSTMState:
    return [(Tensor(np.zeros((batch, hidden_dim))), Tensor(np.zeros((batch, hidden_dim))))
            for _ in range(layers)]


def lstm_step(params: ParamSet, prefix: str, state: LSTMState, x: Tensor) -> tuple[LSTMState, Tensor]:
    """One step of a stacked LSTM; gate order is (input, forget, cell, output)."""
    new_state: LSTMState = []
    inp = x
    for layer, (h, c) in enumerate(state):
        w_ih = params[f"{prefix}.{layer}.w_ih"]
        w_hh = params[f"{prefix}.{layer}.w_hh"]
        bias = params[f"{prefix}.{layer}.bias"]
        hidden = h.shape[1]
        if inp.shape[1] != w_ih.shape[1]:
            raise ShapeError(f"lstm_step layer {layer}: input width {inp.shape[1]} != {w_ih.shape[1]}")
        gates = T.add(T.add(T.linear(inp, w_ih), T.linear(h, w_hh)), bias)
        i = T.sigmoid(T.slice_cols(gates, 0, hidden))
        f = T.sigmoid(T.slice_cols(gates, hidden, 2 * hidden))
        g = T.tanh(T.slice_cols(gates, 2 * hidden, 3 * hidden))
        o = T.sigmoid(T.slice_cols(gates, 3 * hidden, 4 * hidden))
        c_new = T.add(T.elementwise_mul(f, c), T.elementwise_mul(i, g))
        h_new = T.elementwise_mul(o, T.tanh(c_new))
        new_state.append((h_new, c_new))
        inp = h_new
    return new_state, inp


def select_state(state: LSTMState, rows: np.ndarray) -> LSTMState:
    return [(T.gather_rows(h, rows), T.gather_rows(c, rows)) for h, c in state]
