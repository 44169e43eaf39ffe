"""Monotonic alignment estimators.

All estimators take one ``(|Y|, |X|)`` matrix of write probabilities and
return the expected alignment with the same shape. The base row before the
first target step is a point mass on source position 1.

* :func:`oracle_alignment` evaluates the sum-product recursion directly.
* :func:`emma_alignment` propagates rows through upper-triangular transition
  matrices and never divides.
* :func:`legacy_alignment` is the closed form based on ``1 / cumprod(1 - p)``,
  kept as the unstable baseline.
* :func:`milk_soft_attention` turns an alignment plus energies into the
  infinite-lookback expected soft attention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Matrix, ShapeError


def _absorbed(p: Matrix) -> Matrix:
    # force a write at the last source position so rows become distributions
    keep = np.ones(p.shape)
    keep[:, -1] = 0.0
    last = np.zeros(p.shape)
    last[:, -1] = 1.0
    return nx.elementwise_mul(p, Matrix(keep)) + Matrix(last)


def _base_row(n: int) -> np.ndarray:
    row = np.zeros((1, n))
    row[0, 0] = 1.0
    return row


def oracle_alignment(p, absorb_eos: bool = False) -> np.ndarray:
    """Reference O(|Y| |X|^2) evaluation of the alignment recursion.

    ``alpha[i, j] = p[i, j] * sum_{k<=j} alpha[i-1, k] * prod_{l=k}^{j-1} (1 - p[i, l])``
    computed with explicit loops and no division. Plain numpy, no graph.
    """
    p = np.array(p.data if isinstance(p, Matrix) else p, dtype=np.float64)
    if p.ndim != 2:
        raise ShapeError(f"expected a 2-D probability matrix, got shape {p.shape}")
    if absorb_eos:
        p[:, -1] = 1.0
    ylen, xlen = p.shape
    prev = _base_row(xlen)[0]
    alpha = np.zeros((ylen, xlen))
    for i in range(ylen):
        for j in range(xlen):
            # skip[k] = prod_{l=k}^{j-1} (1 - p[i, l]) for k = 0..j, built as a suffix product
            skip = np.ones(j + 1)
            skip[:j] = np.cumprod((1.0 - p[i, :j])[::-1])[::-1]
            alpha[i, j] = p[i, j] * np.dot(prev[: j + 1], skip)
        prev = alpha[i]
    return alpha


def build_transition(p_row: Matrix) -> Matrix:
    """Transition matrix ``T = triu_0(cumprod_2(1 - triu_1(J @ roll_1(p_row))))``.

    ``T[m, n] = prod_{l=m}^{n-1} (1 - p_row[l])`` for ``m < n``, 1 on the
    diagonal, 0 below it.
    """
    if p_row.rows != 1:
        raise ShapeError(f"build_transition expects a 1 x |X| row, got {p_row.shape}")
    n = p_row.cols
    extended = nx.triu(nx.expand_rows(nx.roll_last(p_row, 1), n), 1)
    return nx.triu(nx.cumprod_dim2(1.0 - extended), 0)


def emma_alignment(p: Matrix, absorb_eos: bool = False) -> Matrix:
    """Numerically stable expected alignment, differentiable w.r.t. ``p``.

    Row ``i`` is ``p[i] ⊙ (alpha[i-1] @ T(i))``. The graph is built only from
    roll, expand, triu, cumprod, matmul and elementwise products, so no
    division node ever appears on the tape.
    """
    if absorb_eos:
        p = _absorbed(p)
    prev = Matrix(_base_row(p.cols))
    rows = []
    for i in range(p.rows):
        p_i = nx.slice_rows(p, i, i + 1)
        prev = nx.elementwise_mul(p_i, nx.matmul(prev, build_transition(p_i)))
        rows.append(prev)
    return rows[0] if len(rows) == 1 else nx.concat_rows(rows)


def emma_alignment_array(p, absorb_eos: bool = False) -> np.ndarray:
    """Graph-free twin of :func:`emma_alignment` on plain arrays, for inference.

    Same transition-matrix arithmetic, no tape and no division.
    """
    p = np.array(p.data if isinstance(p, Matrix) else p, dtype=np.float64)
    if absorb_eos:
        p[:, -1] = 1.0
    ylen, xlen = p.shape
    upper = np.triu(np.ones((xlen, xlen), dtype=bool), 1)
    alpha = np.zeros((ylen, xlen))
    prev = _base_row(xlen)
    for i in range(ylen):
        extended = np.where(upper, np.roll(p[i], 1)[None, :], 0.0)
        transition = np.triu(np.cumprod(1.0 - extended, axis=1))
        prev = p[i] * (prev @ transition)
        alpha[i] = prev[0]
    return alpha


@dataclass(frozen=True)
class LegacyResult:
    alpha: np.ndarray
    nonfinite: bool

    @property
    def nonfinite_count(self) -> int:
        return int((~np.isfinite(self.alpha)).sum())


def legacy_alignment(p, eps: float = 1e-10, dtype=np.float64, absorb_eos: bool = False) -> LegacyResult:
    """Closed-form estimator ``p ⊙ c ⊙ cumsum(alpha_prev / c)``, ``c = cumprod(1 - p)``.

    ``c`` is the exclusive cumulative product of ``1 - p`` along the source
    axis, clamped to ``[eps, 1]`` before use (``eps = 0`` disables clamping).
    Underflow of ``c`` yields Inf/NaN with ``eps = 0`` and a compounding bias
    with ``eps > 0``; both are returned as-is with a flag.
    """
    p = np.array(p.data if isinstance(p, Matrix) else p, dtype=dtype)
    if absorb_eos:
        p[:, -1] = 1.0
    ylen, xlen = p.shape
    prev = _base_row(xlen)[0].astype(dtype)
    alpha = np.zeros((ylen, xlen), dtype=dtype)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore", under="ignore"):
        for i in range(ylen):
            shifted = np.concatenate([np.ones(1, dtype=dtype), 1.0 - p[i, :-1]])
            c = np.cumprod(shifted, dtype=dtype)
            if eps > 0:
                c = np.clip(c, eps, 1.0).astype(dtype)
            alpha[i] = p[i] * c * np.cumsum(prev / c, dtype=dtype)
            prev = alpha[i]
    return LegacyResult(alpha=alpha, nonfinite=not bool(np.isfinite(alpha).all()))


def milk_soft_attention(alpha: Matrix, energy: Matrix) -> Matrix:
    """Infinite-lookback expected attention.

    ``beta[i, j] = sum_{k>=j} alpha[i, k] * softmax(energy[i, :k+1])[j]``.
    The prefix normalisers come from a running log-sum-exp, so every
    exponent is ``<= 0``. Row sums of ``beta`` equal row sums of ``alpha``.
    """
    if alpha.shape != energy.shape:
        raise ShapeError(f"milk_soft_attention: alpha {alpha.shape} vs energy {energy.shape}")
    a = alpha.data
    u = energy.data
    ylen, xlen = u.shape
    log_z = np.logaddexp.accumulate(u, axis=1)
    # prefix[i, k, j] = softmax over source prefix 1..k, evaluated at j (zero for j > k)
    valid = np.tril(np.ones((xlen, xlen), dtype=bool))
    diff = u[:, None, :] - log_z[:, :, None]
    prefix = np.where(valid[None], np.exp(np.where(valid[None], diff, 0.0)), 0.0)
    beta = np.einsum("ik,ikj->ij", a, prefix)

    def bwd(g):
        # inner[i, k] = sum_{j<=k} g[i, j] * prefix[i, k, j]
        inner = np.einsum("ij,ikj->ik", g, prefix)
        grad_alpha = inner
        grad_u = np.einsum("ik,ikj->ij", a, prefix * (g[:, None, :] - inner[:, :, None]))
        return grad_alpha, grad_u

    return nx.custom_op("milk", beta, (alpha, energy), bwd)
