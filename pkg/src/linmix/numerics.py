"""Dense float64 linear algebra, stable activations, and seeded randomness.

Everything downstream funnels through these helpers so the whole package
shares one precision (double) and one RNG contract: numpy's default_rng
(PCG64), where an identical 64-bit seed yields a bit-identical stream on
every platform numpy supports.
"""

from __future__ import annotations

import numpy as np

from .exceptions import ShapeError

# LayerNorm / RMS-norm variance guard, shared by every normalization in the repo.
NORM_EPS = 1e-5

# Softplus switches to its asymptote above this point; exp(-20) ~ 2e-9 keeps
# the two branches continuous to ~1e-15 at the seam.
_SOFTPLUS_CUTOFF = 20.0


def as_matrix(x, name: str = "input") -> np.ndarray:
    """Coerce to a float64 2-D array, rejecting NaN/Inf and wrong ranks."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ShapeError(f"{name} contains non-finite values")
    return a


def require_shape(a: np.ndarray, shape: tuple, name: str = "input") -> None:
    """Assert an exact shape; entries of `shape` may be None as wildcards."""
    if a.ndim != len(shape):
        raise ShapeError(f"{name} must have rank {len(shape)}, got shape {a.shape}")
    for got, want in zip(a.shape, shape):
        if want is not None and got != want:
            raise ShapeError(f"{name} has shape {a.shape}, expected {shape}")


def dense_matmul(a, b) -> np.ndarray:
    """Plain double-precision matrix product with an explicit shape check."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def row_softmax(a) -> np.ndarray:
    """Row-wise softmax with max-subtraction for stability."""
    a = as_matrix(a, "logits")
    shifted = a - a.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


# Token-axis reductions below this row count fall through to one BLAS call;
# above it, halves are reduced separately and added. Combining over a fixed
# binary tree makes the reduction of k replicated row-blocks EXACTLY k times
# the single-block reduction (adding two equal halves is an exact doubling),
# which the cross-resolution guarantees rely on. Work stays linear in n.
TOKEN_TREE_LEAF = 128


def token_tree_matmul(phi: np.ndarray, v: np.ndarray) -> np.ndarray:
    """sum_j phi_j (outer) v_j, i.e. phi.T @ v, reduced over the fixed
    halving tree described above."""
    n = phi.shape[0]
    if v.shape[0] != n:
        raise ShapeError(f"token counts differ: {phi.shape} vs {v.shape}")
    if n <= TOKEN_TREE_LEAF:
        return phi.T @ v
    h = n // 2
    return token_tree_matmul(phi[:h], v[:h]) + token_tree_matmul(phi[h:], v[h:])


def token_tree_colsum(a: np.ndarray) -> np.ndarray:
    """a.sum(axis=0) reduced over the same fixed halving tree as
    token_tree_matmul."""
    n = a.shape[0]
    if n <= TOKEN_TREE_LEAF:
        return a.sum(axis=0)
    h = n // 2
    return token_tree_colsum(a[:h]) + token_tree_colsum(a[h:])


def positive_activation(u):
    """Softplus ln(1 + e^u), strictly positive for every finite input.

    Uses the overflow-safe branch u + ln(1 + e^-u) for u > 20 so large
    arguments neither overflow nor lose the asymptote.
    """
    u = np.asarray(u, dtype=np.float64)
    out = np.empty_like(u)
    big = u > _SOFTPLUS_CUTOFF
    out[big] = u[big] + np.log1p(np.exp(-u[big]))
    out[~big] = np.log1p(np.exp(u[~big]))
    if out.ndim == 0:
        return float(out)
    return out


def positive_activation_grad(u) -> np.ndarray:
    """d/du softplus(u) = logistic(u); used by the hand-written backward passes."""
    return logistic(np.asarray(u, dtype=np.float64))


def logistic(u) -> np.ndarray:
    """Numerically stable sigmoid.

    Both stable branches are evaluated densely and merged with where; the
    unused branch may overflow harmlessly (suppressed), and each element's
    surviving value comes from exactly the formula a per-element branch
    would have used.
    """
    u = np.asarray(u, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        pos = 1.0 / (1.0 + np.exp(-u))
        eu = np.exp(u)
        neg = eu / (1.0 + eu)
    return np.where(u >= 0, pos, neg)


def make_rng(seed: int) -> np.random.Generator:
    """The package-wide generator: PCG64 behind numpy's default_rng."""
    return np.random.default_rng(seed)


def seeded_gaussian(rows: int, cols: int, seed: int) -> np.ndarray:
    """Deterministic standard-normal matrix; same seed, same bits."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"rows and cols must be >= 1, got ({rows}, {cols})")
    return make_rng(seed).standard_normal((rows, cols))


def rel_err(got, want) -> float:
    """Max-norm relative error used throughout the test suites."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    scale = max(float(np.max(np.abs(want))), 1e-300)
    return float(np.max(np.abs(got - want))) / scale
