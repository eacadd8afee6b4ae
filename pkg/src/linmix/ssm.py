"""Linear-time state-space scans and input-dependent gate generation.

The core recurrence is H_i = a_i * H_{i-1} + b_i^T x_i with readout
y_i = c_i H_i, where a_i is a scalar forget gate in (0, 1) and b_i, c_i are
strictly positive d'-vectors. A second scan over the same gates produces the
normalizer states Z_i = a_i * Z_{i-1} + b_i; dividing each c_i by c_i . Z_i
makes the effective dense mixing matrix row-stochastic.

The bidirectional form runs one scan in each direction and subtracts the
diagonal term so every (i, j) token pair contributes exactly once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateGateError, ShapeError
from .numerics import as_matrix, logistic, positive_activation

# Guard threshold for normalization denominators; valid gates sit far above it.
DENOM_GUARD = 1e-12


@dataclass
class GateSet:
    """Per-token gates: scalar forget a (n,), input b and output c (n, d')."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64)

    def validate(self) -> None:
        a, b, c = self.a, self.b, self.c
        if a.ndim != 1 or b.ndim != 2 or c.ndim != 2:
            raise ShapeError(
                f"gate ranks must be 1/2/2, got {a.ndim}/{b.ndim}/{c.ndim}"
            )
        n = a.shape[0]
        if b.shape[0] != n or c.shape != b.shape:
            raise ShapeError(f"gate shapes disagree: a {a.shape}, b {b.shape}, c {c.shape}")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b)) and np.all(np.isfinite(c))):
            raise ShapeError("gates contain non-finite values")
        # make_gates emits a strictly inside (0, 1); the scans also accept the
        # closed endpoints so degenerate fixtures (a = 0: memoryless) stay legal
        if np.any(a < 0) or np.any(a > 1):
            raise ShapeError("forget gates must lie in [0, 1]")
        if np.any(b <= 0) or np.any(c <= 0):
            raise ShapeError("b and c gates must be strictly positive")

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def d_state(self) -> int:
        return self.b.shape[1]


@dataclass
class GateProjection:
    """Input-dependent gate parameterization: one logistic forget projection
    plus softplus projections for b and c."""

    w_a: np.ndarray  # (d,)
    bias_a: float
    w_b: np.ndarray  # (d, d')
    w_c: np.ndarray  # (d, d')


def init_gate_projection(d: int, d_state: int, seed: int) -> GateProjection:
    """Random gate projection scaled so pre-activations stay O(1)."""
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(d)
    return GateProjection(
        w_a=rng.standard_normal(d) * scale,
        bias_a=0.0,
        w_b=rng.standard_normal((d, d_state)) * scale,
        w_c=rng.standard_normal((d, d_state)) * scale,
    )


def make_gates(x, p: GateProjection) -> GateSet:
    """a = logistic(x . w_a + bias); b = softplus(x W_b); c = softplus(x W_c)."""
    x = as_matrix(x, "x")
    w_a = np.asarray(p.w_a, dtype=np.float64)
    if w_a.shape != (x.shape[1],):
        raise ShapeError(f"w_a shape {w_a.shape} does not match token width {x.shape[1]}")
    if p.w_b.shape[0] != x.shape[1] or p.w_c.shape != p.w_b.shape:
        raise ShapeError("gate projection shapes do not match token width")
    return GateSet(
        a=logistic(x @ w_a + p.bias_a),
        b=positive_activation(x @ p.w_b),
        c=positive_activation(x @ p.w_c),
    )


def _check_scan_inputs(g: GateSet, x: np.ndarray) -> np.ndarray:
    g.validate()
    x = as_matrix(x, "x")
    if x.shape[0] != g.n:
        raise ShapeError(f"x has {x.shape[0]} tokens but gates have {g.n}")
    return x


def causal_scan(g: GateSet, x) -> np.ndarray:
    """Left-to-right recurrence; O(n d' d) time, O(d' d) state."""
    x = _check_scan_inputs(g, x)
    n, d = x.shape
    h = np.zeros((g.d_state, d))
    y = np.empty((n, d))
    a, b, c = g.a, g.b, g.c
    for i in range(n):
        h *= a[i]
        h += b[i][:, None] * x[i][None, :]
        y[i] = c[i] @ h
    return y


def causal_scan_states(g: GateSet, x) -> tuple[np.ndarray, np.ndarray]:
    """causal_scan that also returns the full hidden-state trajectory
    (n, d', d); used by training code that must backpropagate through it."""
    x = _check_scan_inputs(g, x)
    n, d = x.shape
    states = np.empty((n, g.d_state, d))
    h = np.zeros((g.d_state, d))
    y = np.empty((n, d))
    a, b, c = g.a, g.b, g.c
    for i in range(n):
        h = a[i] * h + b[i][:, None] * x[i][None, :]
        states[i] = h
        y[i] = c[i] @ h
    return y, states


def backward_scan_states(g: GateSet, x) -> tuple[np.ndarray, np.ndarray]:
    """Right-to-left mirror of causal_scan_states: H_i = a_i H_{i+1} + b_i^T x_i."""
    x = _check_scan_inputs(g, x)
    n, d = x.shape
    states = np.empty((n, g.d_state, d))
    h = np.zeros((g.d_state, d))
    y = np.empty((n, d))
    a, b, c = g.a, g.b, g.c
    for i in range(n - 1, -1, -1):
        h = a[i] * h + b[i][:, None] * x[i][None, :]
        states[i] = h
        y[i] = c[i] @ h
    return y, states


def normalizer_scan(g: GateSet) -> np.ndarray:
    """Z_i = a_i * Z_{i-1} + b_i, returned for every token (n, d')."""
    g.validate()
    n = g.n
    z = np.empty((n, g.d_state))
    state = np.zeros(g.d_state)
    for i in range(n):
        state = g.a[i] * state + g.b[i]
        z[i] = state
    return z


def backward_normalizer_scan(g: GateSet) -> np.ndarray:
    """Right-to-left normalizer states: Z_i = a_i * Z_{i+1} + b_i."""
    g.validate()
    n = g.n
    z = np.empty((n, g.d_state))
    state = np.zeros(g.d_state)
    for i in range(n - 1, -1, -1):
        state = g.a[i] * state + g.b[i]
        z[i] = state
    return z


def _normalize_c(c: np.ndarray, z: np.ndarray) -> np.ndarray:
    den = np.sum(c * z, axis=1)
    if np.any(den <= DENOM_GUARD):
        raise DegenerateGateError(
            f"normalization denominator collapsed to {float(den.min()):.3e}"
        )
    return c / den[:, None]


def normalized_causal_scan(g: GateSet, x) -> np.ndarray:
    """causal_scan with c_i replaced by c_i / (c_i . Z_i).

    The effective dense mixing matrix then has unit row sums, so constant
    channels pass through unchanged regardless of sequence length.
    """
    x = _check_scan_inputs(g, x)
    z = normalizer_scan(g)
    c_norm = _normalize_c(g.c, z)
    return causal_scan(GateSet(a=g.a, b=g.b, c=c_norm), x)


def bidirectional_scan(g_fwd: GateSet, g_bwd: GateSet, x, normalized: bool = False) -> np.ndarray:
    """Two opposing scans summed, minus the doubly counted diagonal term.

    Y_i = Y_fwd,i + Y_bwd,i - (c_i . b_i) x_i, so each (i, j) pair enters
    exactly once. Both gate sets must share b and c (the forget gates may
    differ per direction). When normalized, c is divided by
    c_i . (Z_fwd,i + Z_bwd,i - b_i), the row sum of the combined mask.
    """
    x = _check_scan_inputs(g_fwd, x)
    g_bwd.validate()
    if g_bwd.n != g_fwd.n:
        raise ShapeError("directions disagree on token count")
    if not (np.array_equal(g_fwd.b, g_bwd.b) and np.array_equal(g_fwd.c, g_bwd.c)):
        raise ShapeError("bidirectional gate sets must share b and c")

    c = g_fwd.c
    if normalized:
        z = normalizer_scan(g_fwd) + backward_normalizer_scan(g_bwd) - g_fwd.b
        c = _normalize_c(c, z)

    n, d = x.shape
    b = g_fwd.b
    y = np.empty((n, d))

    h = np.zeros((g_fwd.d_state, d))
    for i in range(n):
        h = g_fwd.a[i] * h + b[i][:, None] * x[i][None, :]
        y[i] = c[i] @ h

    h = np.zeros((g_fwd.d_state, d))
    for i in range(n - 1, -1, -1):
        h = g_bwd.a[i] * h + b[i][:, None] * x[i][None, :]
        y[i] += c[i] @ h
        y[i] -= float(np.dot(c[i], b[i])) * x[i]
    return y
