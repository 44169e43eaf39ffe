"""Stepwise write-probability networks and the per-head monotonic container."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import numerics as nx
from .alignment import emma_alignment
from .nn import FeedForward, Module, parameter
from .numerics import ContractError, Matrix


class StepwiseNet(Module):
    """``p = sigmoid((FFN_s(s)^T FFN_h(h) + b) / tau)``.

    Both projections are two-layer tanh networks with hidden width equal to
    the model width. ``b`` starts negative so training begins near the
    read-everything policy; ``tau`` is a fixed temperature.
    """

    def __init__(self, rng: np.random.Generator, width: int, energy_dim: int,
                 bias_init: float = -2.0, temperature: float = 0.25):
        if temperature <= 0:
            raise ContractError(f"temperature must be positive, got {temperature}")
        self.target_proj = FeedForward(rng, width, width, energy_dim, activation="tanh")
        self.source_proj = FeedForward(rng, width, width, energy_dim, activation="tanh")
        self.bias = parameter(np.full((1, 1), bias_init))
        self.temperature = float(temperature)
        self.width = width

    def project_target(self, states: Matrix) -> Matrix:
        return self.target_proj(states)

    def project_source(self, states: Matrix) -> Matrix:
        return self.source_proj(states)

    def probs_from_projections(self, target: Matrix, source: Matrix) -> Matrix:
        energy = nx.matmul(target, nx.transpose(source))
        bias = nx.expand_rows(nx.matmul(self.bias, nx.ones(1, source.rows)), target.rows)
        return nx.sigmoid(nx.scale(energy + bias, 1.0 / self.temperature))


def _check_width(states: Matrix, net: StepwiseNet, what: str) -> None:
    if states.cols != net.width:
        raise ContractError(f"{what} width {states.cols} does not match network width {net.width}")


def stepwise_prob(s_prev: Matrix, h_j: Matrix, net: StepwiseNet) -> Matrix:
    """Write probability for one (decoder state, encoder state) pair, as 1 x 1."""
    if s_prev.rows != 1 or h_j.rows != 1:
        raise ContractError("stepwise_prob takes single state row vectors")
    return stepwise_prob_matrix(s_prev, h_j, net)


def stepwise_prob_matrix(decoder_states: Matrix, encoder_states: Matrix, net: StepwiseNet) -> Matrix:
    """All write probabilities for one instance.

    Row ``r`` (0-based) of ``decoder_states`` is the state after consuming
    target tokens ``y_0..y_r``, i.e. ``s_{i-1}`` for target position
    ``i = r + 1``; row ``r`` of the result depends on it alone.
    """
    if decoder_states is None or encoder_states is None:
        raise ContractError("stepwise_prob_matrix needs non-empty decoder and encoder states")
    _check_width(decoder_states, net, "decoder state")
    _check_width(encoder_states, net, "encoder state")
    return net.probs_from_projections(net.project_target(decoder_states), net.project_source(encoder_states))


class MonotonicHeadSet(Module):
    """One stepwise network per decoder layer and cross-attention head."""

    def __init__(self, nets: Sequence[Sequence[StepwiseNet]]):
        self.nets = [list(layer) for layer in nets]

    @classmethod
    def create(cls, rng: np.random.Generator, layers: int, heads: int, width: int, energy_dim: int,
               bias_init: float = -2.0, temperature: float = 0.25) -> "MonotonicHeadSet":
        return cls([[StepwiseNet(rng, width, energy_dim, bias_init, temperature) for _ in range(heads)]
                    for _ in range(layers)])

    @property
    def layers(self) -> int:
        return len(self.nets)

    @property
    def heads(self) -> int:
        return len(self.nets[0])


def multihead_alignments(heads: MonotonicHeadSet, decoder_states: Sequence[Matrix], encoder_states: Matrix,
                         absorb_eos: bool = True) -> list[Matrix]:
    """Expected alignment for every head, layer-major.

    ``decoder_states[l]`` holds the cross-attention queries of decoder layer
    ``l``. Returns ``layers * heads`` alignment matrices.
    """
    if len(decoder_states) != heads.layers:
        raise ContractError(f"expected {heads.layers} decoder state sets, got {len(decoder_states)}")
    out = []
    for layer_nets, states in zip(heads.nets, decoder_states):
        for net in layer_nets:
            out.append(emma_alignment(stepwise_prob_matrix(states, encoder_states, net), absorb_eos=absorb_eos))
    return out
