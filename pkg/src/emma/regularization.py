"""Expected delay / variance of an alignment and the composite objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import ContractError, Matrix


@dataclass(frozen=True)
class LossWeights:
    latency: float = 0.1
    variance: float = 0.1

    def __post_init__(self):
        if self.latency < 0 or self.variance < 0:
            raise ValueError(f"loss weights must be non-negative, got {self}")


def _positions(xlen: int, power: int = 1) -> Matrix:
    return Matrix((np.arange(1, xlen + 1, dtype=np.float64) ** power).reshape(-1, 1))


def _check_rows(alpha: Matrix, tol: float = 1e-6) -> None:
    sums = alpha.data.sum(axis=1)
    if np.abs(sums - 1.0).max() > tol:
        raise ContractError(
            f"alignment rows must sum to 1 (use absorb_eos=True); worst row sum {sums[np.argmax(np.abs(sums - 1))]:.6g}"
        )


def expected_delay(alpha: Matrix) -> Matrix:
    """``d[i] = sum_k k * alpha[i, k]`` with 1-based source positions, as |Y| x 1."""
    _check_rows(alpha)
    return nx.matmul(alpha, _positions(alpha.cols))


def expected_variance(alpha: Matrix) -> Matrix:
    """``v[i] = sum_k k^2 alpha[i, k] - (sum_k k alpha[i, k])^2``, as |Y| x 1."""
    _check_rows(alpha)
    mean = nx.matmul(alpha, _positions(alpha.cols))
    second = nx.matmul(alpha, _positions(alpha.cols, 2))
    return second - nx.elementwise_mul(mean, mean)


def latency_loss(delays: Matrix, xlen: int) -> Matrix:
    """Mean expected delay normalised by source length; lies in [1/|X|, 1]."""
    if delays.data.size == 0:
        raise ContractError("latency_loss needs at least one delay")
    return nx.scale(nx.sum_all(delays), 1.0 / (delays.data.size * xlen))


def differentiable_lagging_loss(delays: Matrix, xlen: int) -> Matrix:
    """Differentiable average lagging of expected delays, normalised by source length.

    ``d'[1] = d[1]`` and ``d'[i] = max(d[i], d'[i-1] + |X|/|Y|)``; the loss is
    ``mean_i(d'[i] - (i - 1) |X|/|Y|) / |X|``. The max routes each gradient to
    the delay that attains it.
    """
    n = delays.data.size
    if n == 0:
        raise ContractError("differentiable_lagging_loss needs at least one delay")
    step = xlen / n
    d = delays.data.reshape(-1)
    lifted = np.empty(n)
    source = np.empty(n, dtype=int)
    for i in range(n):
        if i == 0 or d[i] >= lifted[i - 1] + step:
            lifted[i], source[i] = d[i], i
        else:
            lifted[i], source[i] = lifted[i - 1] + step, source[i - 1]

    def bwd(g):
        grad = np.zeros(n)
        np.add.at(grad, source, g.reshape(-1))
        return (grad.reshape(delays.shape),)

    lifted_m = nx.custom_op("lift_delays", lifted.reshape(delays.shape), (delays,), bwd)
    ideal = Matrix((np.arange(n, dtype=np.float64) * step).reshape(delays.shape))
    return nx.scale(nx.sum_all(lifted_m - ideal), 1.0 / (n * xlen))


LATENCY_METRICS = {"mean_delay": latency_loss, "dal": differentiable_lagging_loss}


def variance_loss(variances: Matrix) -> Matrix:
    return nx.sum_all(variances)


def multihead_losses(alphas: Sequence[Matrix], latency_metric: str = "mean_delay") -> tuple[Matrix, Matrix]:
    """Latency and variance losses computed per head, then averaged over heads."""
    if not alphas:
        raise ContractError("multihead_losses needs at least one alignment")
    if latency_metric not in LATENCY_METRICS:
        raise ContractError(f"unknown latency_metric {latency_metric!r}")
    metric = LATENCY_METRICS[latency_metric]
    lat = [metric(expected_delay(a), a.cols) for a in alphas]
    var = [variance_loss(expected_variance(a)) for a in alphas]
    scale = 1.0 / len(alphas)
    return nx.scale(_sum(lat), scale), nx.scale(_sum(var), scale)


def _sum(items: Sequence[Matrix]) -> Matrix:
    total = items[0]
    for item in items[1:]:
        total = total + item
    return total


def composite_objective(nll: Matrix, latency: Matrix, variance: Matrix, weights: LossWeights) -> Matrix:
    """``nll + w_latency * latency + w_variance * variance``."""
    return nll + nx.scale(latency, weights.latency) + nx.scale(variance, weights.variance)
