"""Minimal parameter containers and layers over :mod:`emma.numerics`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import numerics as nx
from .numerics import Matrix


def parameter(data) -> Matrix:
    return Matrix(data, requires_grad=True)


class Module:
    """Anything holding named parameters and child modules as attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Matrix]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Matrix):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for k, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{k}.")
                    elif isinstance(item, (list, tuple)):
                        for m, sub in enumerate(item):
                            yield from sub.named_parameters(f"{full}.{k}.{m}.")

    def parameters(self) -> list[Matrix]:
        return [p for _, p in self.named_parameters()]


class Linear(Module):
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, bias: bool = True, init_scale: float = 1.0):
        self.weight = parameter(rng.normal(0.0, init_scale / np.sqrt(n_in), size=(n_in, n_out)))
        self.bias = parameter(np.zeros((1, n_out))) if bias else None

    def __call__(self, x: Matrix) -> Matrix:
        y = nx.matmul(x, self.weight)
        if self.bias is not None:
            y = y + nx.expand_rows(self.bias, x.rows)
        return y


class FeedForward(Module):
    """Two linear layers around a smooth nonlinearity."""

    def __init__(self, rng: np.random.Generator, n_in: int, n_hidden: int, n_out: int, activation: str = "gelu"):
        self.inner = Linear(rng, n_in, n_hidden)
        self.outer = Linear(rng, n_hidden, n_out)
        self.activation = activation

    def __call__(self, x: Matrix) -> Matrix:
        act = nx.gelu if self.activation == "gelu" else nx.tanh
        return self.outer(act(self.inner(x)))


class LayerNorm(Module):
    def __init__(self, width: int):
        self.gain = parameter(np.ones((1, width)))
        self.shift = parameter(np.zeros((1, width)))

    def __call__(self, x: Matrix) -> Matrix:
        return nx.layer_norm_rows(x, self.gain, self.shift)


class Embedding(Module):
    def __init__(self, rng: np.random.Generator, vocab: int, width: int):
        self.table = parameter(rng.normal(0.0, 1.0, size=(vocab, width)))
        self.vocab = vocab

    def __call__(self, tokens) -> Matrix:
        return nx.gather_rows(self.table, tokens)
