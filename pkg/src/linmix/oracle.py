"""Quadratic-cost reference implementations used as ground truth.

Every equivalence test in the package compares a fast path against one of
these. They are deliberately O(n^2) or worse and use naive summation in a
fixed index order (i outer, j inner ascending, gate channels reduced per
(i, j) pair before touching the value row) so that bit-exactness claims
elsewhere have a defined reference. Keep them slow and obvious.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ShapeError
from .numerics import as_matrix, require_shape, row_softmax

MASK_CAUSAL_CUMPROD = "causal-cumprod"
MASK_NONCAUSAL_LOWRANK = "noncausal-lowrank"
MASK_NONCAUSAL_PERCHANNEL = "noncausal-perchannel"


@dataclass
class DenseMask:
    """A materialized gate mask.

    values is n x n for the scalar forms, or a d' x n x n stack for the
    per-channel form. For the low-rank form the generating factors are kept
    so tests can assert values == f @ g.T exactly.
    """

    form: str
    values: np.ndarray
    f: np.ndarray | None = None
    g: np.ndarray | None = None


def softmax_attention(x, wq, wk, wv) -> np.ndarray:
    """Y = softmax(Q K^T / sqrt(d')) V with Q = X Wq, K = X Wk, V = X Wv."""
    x = as_matrix(x, "x")
    wq = as_matrix(wq, "wq")
    wk = as_matrix(wk, "wk")
    wv = as_matrix(wv, "wv")
    n, d = x.shape
    if wq.shape[0] != d or wk.shape != wq.shape or wv.shape[0] != d:
        raise ShapeError(
            f"weight shapes {wq.shape}/{wk.shape}/{wv.shape} do not match x {x.shape}"
        )
    d_attn = wq.shape[1]
    q = x @ wq
    k = x @ wk
    v = x @ wv
    probs = row_softmax(q @ k.T / np.sqrt(d_attn))
    return probs @ v


def cumprod_causal_mask(a, n: int | None = None) -> DenseMask:
    """Lower-triangular mask with entry (i, j) = a[j+1] * ... * a[i].

    The diagonal is the empty product, exactly 1; a[0] is never read.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 1:
        raise ShapeError(f"gates must be a vector, got shape {a.shape}")
    if n is None:
        n = a.shape[0]
    if a.shape[0] != n or n < 1:
        raise ShapeError(f"need n >= 1 gate entries, got {a.shape[0]} for n={n}")
    m = np.zeros((n, n))
    for i in range(n):
        m[i, i] = 1.0
        for j in range(i - 1, -1, -1):
            m[i, j] = m[i, j + 1] * a[j + 1]
    return DenseMask(form=MASK_CAUSAL_CUMPROD, values=m)


def _weighted_mix(c, b, x, weight_for_pair) -> np.ndarray:
    # Shared fixed-order accumulator: i outer, j inner ascending.
    n, d = x.shape
    y = np.zeros((n, d))
    for i in range(n):
        acc = y[i]
        for j in range(n):
            acc += weight_for_pair(i, j) * x[j]
    return y


def masked_gated_attention_dense(c, b, x, mask: DenseMask) -> np.ndarray:
    """Exact dense evaluation of Y = ((C B^T) . M) X, one scalar mask.

    The per-pair weight is accumulated as sum_u c[i,u] * (M[i,j] * b[j,u]) so
    the per-channel oracle collapses onto this one bit-for-bit when all its
    channels share the same mask.
    """
    c = as_matrix(c, "c")
    b = as_matrix(b, "b")
    x = as_matrix(x, "x")
    n = x.shape[0]
    if c.shape != b.shape or c.shape[0] != n:
        raise ShapeError(f"gate shapes {c.shape}/{b.shape} do not match x {x.shape}")
    m = mask.values if isinstance(mask, DenseMask) else np.asarray(mask, dtype=np.float64)
    require_shape(m, (n, n), "mask")

    def weight(i, j):
        return float(np.dot(c[i], m[i, j] * b[j]))

    return _weighted_mix(c, b, x, weight)


def vector_gated_attention_dense(c, b, x, mask_stack) -> np.ndarray:
    """Exact dense evaluation with one mask per gate channel.

    Y_i = sum_j (sum_u c[i,u] * M[u,i,j] * b[j,u]) * X_j with the channel
    reduction done per (i, j) pair, matching masked_gated_attention_dense's
    summation order exactly.
    """
    c = as_matrix(c, "c")
    b = as_matrix(b, "b")
    x = as_matrix(x, "x")
    n, _ = x.shape
    d_state = c.shape[1]
    if c.shape != b.shape or c.shape[0] != n:
        raise ShapeError(f"gate shapes {c.shape}/{b.shape} do not match x {x.shape}")
    m = np.asarray(mask_stack, dtype=np.float64)
    require_shape(m, (d_state, n, n), "mask_stack")

    def weight(i, j):
        return float(np.dot(c[i], m[:, i, j] * b[j]))

    return _weighted_mix(c, b, x, weight)


def constant_channel_response(mask_effective, mu) -> np.ndarray:
    """Output of any masked mixer on a constant-channel input.

    For X with every row equal to mu, row i of the output is
    mu * (row-sum of M at i). The row sum is accumulated j ascending so the
    result is bit-identical to feeding the constant input through
    masked_gated_attention_dense with the same effective mask.
    """
    m = as_matrix(mask_effective, "mask_effective")
    mu = np.asarray(mu, dtype=np.float64)
    if mu.ndim != 1:
        raise ShapeError(f"mu must be a vector, got shape {mu.shape}")
    n = m.shape[0]
    if m.shape[1] != n:
        raise ShapeError(f"mask must be square, got {m.shape}")
    y = np.zeros((n, mu.shape[0]))
    for i in range(n):
        acc = y[i]
        for j in range(n):
            acc += m[i, j] * mu
    return y
