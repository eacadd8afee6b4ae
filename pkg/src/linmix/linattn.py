"""Non-causal generalized linear attention.

A causal scan whose forget gates are shared across outputs degenerates when
the causal restriction is dropped: the hidden state loses its dependence on
the output position (shared_gate_degenerate_check measures this, and the
answer is exactly zero). Giving every output token its own gate row and
requiring the gate matrix to be low-rank separable (A = F G^T) restores
expressiveness while keeping linear cost, because the whole mixer collapses
to Y = phi_q(X) (phi_k(X)^T V) for suitable per-token feature maps.

Two constructions realize those feature maps exactly from gates
(kron_featuremap_scalar / kron_featuremap_vector); the trainable realization
is a two-branch MLP (linear branch + Linear-LayerNorm-LeakyReLU-Linear
branch, summed, then softplus) that can be initialized from a softmax
teacher's W_Q/W_K so the block starts as positive-feature linear attention
with the teacher's projections.

Normalization divides each query row's output by phi_q,i . sum_j phi_k,j,
which makes the effective attention matrix row-stochastic: constant channels
pass through unchanged and output magnitudes stop growing with token count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, DegenerateFeatureError, ShapeError
from .numerics import (
    NORM_EPS,
    as_matrix,
    logistic,
    make_rng,
    positive_activation,
    token_tree_colsum,
    token_tree_matmul,
)
from .ssm import GateSet

DENOM_GUARD = 1e-12


# --------------------------------------------------------------------- types

@dataclass
class LowRankGateFactors:
    """Factors of a non-causal gate matrix A = F G^T (rank r).

    For the per-channel form, f and g are d' x n x r stacks and channel u
    uses A_u = F_u G_u^T.
    """

    f: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        self.f = np.asarray(self.f, dtype=np.float64)
        self.g = np.asarray(self.g, dtype=np.float64)
        if self.f.shape != self.g.shape or self.f.ndim not in (2, 3):
            raise ShapeError(f"factor shapes must match and be rank 2 or 3, "
                             f"got {self.f.shape} / {self.g.shape}")

    @property
    def rank(self) -> int:
        return self.f.shape[-1]

    def dense(self) -> np.ndarray:
        """A as n x n (or d' x n x n for the per-channel form)."""
        if self.f.ndim == 2:
            return self.f @ self.g.T
        return np.einsum("unr,umr->unm", self.f, self.g)


@dataclass
class FeatureMapParams:
    """Two-branch MLP defining one feature map (query side or key side).

    Output width d'' = d' * rank. The linear branch is a plain d x d''
    matrix; the nonlinear branch is Linear -> LayerNorm -> LeakyReLU ->
    Linear. Branch outputs are summed and passed through softplus, so the
    map is strictly positive.
    """

    linear: np.ndarray          # (d, d'')
    inner_w: np.ndarray         # (d, d'')
    inner_b: np.ndarray         # (d'',)
    norm_scale: np.ndarray      # (d'',)
    norm_shift: np.ndarray      # (d'',)
    outer_w: np.ndarray         # (d'', d'')
    outer_b: np.ndarray         # (d'',)
    leaky_slope: float = 0.01

    @property
    def d_in(self) -> int:
        return self.linear.shape[0]

    @property
    def d_feat(self) -> int:
        return self.linear.shape[1]


@dataclass
class LinearAttentionBlockParams:
    """Full token-mixer block: per-head feature maps, value and output
    projections, plus optional gating and RMS-norm toggles.

    gate_w must be present iff gated; rms_scale must be present iff
    rms_normed. Head h mixes value columns [h*d/heads, (h+1)*d/heads).
    """

    query_maps: list[FeatureMapParams]
    key_maps: list[FeatureMapParams]
    w_v: np.ndarray             # (d, d)
    w_out: np.ndarray           # (d, d)
    normalized: bool = True
    gated: bool = False
    rms_normed: bool = False
    heads: int = 1
    gate_w: np.ndarray | None = None     # (d, d)
    rms_scale: np.ndarray | None = None  # (d,)

    def validate(self) -> None:
        d = self.w_v.shape[0]
        if self.w_v.shape != (d, d) or self.w_out.shape != (d, d):
            raise ShapeError(f"w_v/w_out must be square d x d, got {self.w_v.shape}/{self.w_out.shape}")
        if self.heads < 1 or len(self.query_maps) != self.heads or len(self.key_maps) != self.heads:
            raise ShapeError(f"need one query/key map per head, got "
                             f"{len(self.query_maps)}/{len(self.key_maps)} for heads={self.heads}")
        if d % self.heads != 0:
            raise ShapeError(f"model width {d} not divisible by heads={self.heads}")
        for m in (*self.query_maps, *self.key_maps):
            if m.d_in != d:
                raise ShapeError(f"feature map expects width {m.d_in}, block has {d}")
        if self.gated != (self.gate_w is not None):
            raise ShapeError("gate_w must be present exactly when gated is set")
        if self.rms_normed != (self.rms_scale is not None):
            raise ShapeError("rms_scale must be present exactly when rms_normed is set")

    @property
    def d_model(self) -> int:
        return self.w_v.shape[0]


# ------------------------------------------------------- kron constructions

def kron_featuremap_scalar(c_i, f_i) -> np.ndarray:
    """Kronecker product of a gate row and a factor row: entry (u*r + v) =
    c[u] * f[v]. With phi_q,i = c_i (x) f_i and phi_k,j = b_j (x) g_j the
    product phi_q,i . phi_k,j equals (c_i . b_j)(f_i . g_j)."""
    c_i = np.asarray(c_i, dtype=np.float64)
    f_i = np.asarray(f_i, dtype=np.float64)
    if c_i.ndim != 1 or f_i.ndim != 1:
        raise ShapeError("kron_featuremap_scalar expects two vectors")
    return np.kron(c_i, f_i)


def kron_featuremap_vector(c_i, f_i) -> np.ndarray:
    """Row-broadcast product flattened row-major: entry (u*r + v) =
    c[u] * f[u, v]. Generalizes the scalar form to one factor row per gate
    channel."""
    c_i = np.asarray(c_i, dtype=np.float64)
    f_i = np.asarray(f_i, dtype=np.float64)
    if c_i.ndim != 1 or f_i.ndim != 2 or f_i.shape[0] != c_i.shape[0]:
        raise ShapeError(f"expected (d',) gates with (d', r) factors, "
                         f"got {c_i.shape} / {f_i.shape}")
    return (c_i[:, None] * f_i).reshape(-1)


def kron_rows_scalar(c, f) -> np.ndarray:
    """Apply kron_featuremap_scalar to every token row: (n, d'), (n, r) ->
    (n, d'*r)."""
    c = as_matrix(c, "c")
    f = as_matrix(f, "f")
    if c.shape[0] != f.shape[0]:
        raise ShapeError("token counts differ")
    return (c[:, :, None] * f[:, None, :]).reshape(c.shape[0], -1)


def kron_rows_vector(c, f_stack) -> np.ndarray:
    """Apply kron_featuremap_vector to every token: (n, d') gates with a
    (d', n, r) factor stack -> (n, d'*r)."""
    c = as_matrix(c, "c")
    f_stack = np.asarray(f_stack, dtype=np.float64)
    if f_stack.ndim != 3 or f_stack.shape[0] != c.shape[1] or f_stack.shape[1] != c.shape[0]:
        raise ShapeError(f"factor stack {f_stack.shape} does not match gates {c.shape}")
    # (n, d', r): token-major view of the per-channel factors
    per_token = np.moveaxis(f_stack, 1, 0)
    return (c[:, :, None] * per_token).reshape(c.shape[0], -1)


# ------------------------------------------------------------ linear attention

def _check_attention_inputs(phi_q, phi_k, v):
    phi_q = as_matrix(phi_q, "phi_q")
    phi_k = as_matrix(phi_k, "phi_k")
    v = as_matrix(v, "v")
    if phi_q.shape != phi_k.shape or phi_q.shape[0] != v.shape[0]:
        raise ShapeError(f"inconsistent shapes: phi_q {phi_q.shape}, "
                         f"phi_k {phi_k.shape}, v {v.shape}")
    return phi_q, phi_k, v


def linear_attention(phi_q, phi_k, v) -> np.ndarray:
    """Y = phi_q (phi_k^T v): O(n d'' d) time, O(d'' d) mixing state."""
    phi_q, phi_k, v = _check_attention_inputs(phi_q, phi_k, v)
    s = token_tree_matmul(phi_k, v)
    return phi_q @ s


def normalized_linear_attention(phi_q, phi_k, v) -> np.ndarray:
    """Linear attention with row-stochastic effective weights.

    z = sum_j phi_k,j; Y_i = (phi_q,i S) / (phi_q,i . z). Requires strictly
    positive feature maps so the denominator cannot vanish.
    """
    phi_q, phi_k, v = _check_attention_inputs(phi_q, phi_k, v)
    if np.any(phi_q <= 0) or np.any(phi_k <= 0):
        raise DegenerateFeatureError("normalized attention needs strictly positive feature maps")
    s = token_tree_matmul(phi_k, v)
    z = token_tree_colsum(phi_k)
    den = phi_q @ z
    if np.any(den <= DENOM_GUARD):
        raise DegenerateFeatureError(
            f"normalization denominator collapsed to {float(den.min()):.3e}")
    return (phi_q @ s) / den[:, None]


def dense_effective_mask(phi_q, phi_k, normalized: bool = True) -> np.ndarray:
    """The n x n attention matrix the linear form implicitly applies;
    O(n^2), for inspection and row-sum tests only."""
    phi_q, phi_k, _ = _check_attention_inputs(phi_q, phi_k, phi_q)
    m = phi_q @ phi_k.T
    if normalized:
        den = phi_q @ token_tree_colsum(phi_k)
        if np.any(den <= DENOM_GUARD):
            raise DegenerateFeatureError("degenerate rows in effective mask")
        m = m / den[:, None]
    return m


# ----------------------------------------------------------------- feature map

def _layer_norm_cached(pre, scale, shift):
    mu = pre.mean(axis=1, keepdims=True)
    centered = pre - mu
    var = np.mean(centered * centered, axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + NORM_EPS)
    xhat = centered * inv_std
    return xhat * scale + shift, xhat, inv_std


def _featuremap_forward_cached(x, p: FeatureMapParams):
    # x: (n, d) -> phi: (n, d''), strictly positive
    pre = x @ p.inner_w + p.inner_b
    normed, xhat, inv_std = _layer_norm_cached(pre, p.norm_scale, p.norm_shift)
    act = np.where(normed >= 0, normed, p.leaky_slope * normed)
    u = x @ p.linear + (act @ p.outer_w + p.outer_b)
    phi = positive_activation(u)
    cache = {"x": x, "xhat": xhat, "inv_std": inv_std, "normed": normed,
             "act": act, "u": u, "phi": phi}
    return phi, cache


def featuremap_forward(x, p: FeatureMapParams) -> np.ndarray:
    """Evaluate one feature map: softplus(x W_lin + nonlinear_branch(x))."""
    x = as_matrix(x, "x")
    if x.shape[1] != p.d_in:
        raise ShapeError(f"x width {x.shape[1]} does not match map width {p.d_in}")
    phi, _ = _featuremap_forward_cached(x, p)
    return phi


def init_from_teacher(wq, wk, r: int, seed: int = 0) -> tuple[FeatureMapParams, FeatureMapParams]:
    """Build (query_map, key_map) whose initial behavior is softplus of the
    teacher's projections.

    The teacher weight occupies the first d' columns of the linear branch
    (remaining columns zero); the nonlinear branch's outer weights and bias
    are exactly zero, so until training moves them the branch contributes
    nothing. Inner weights are seeded gaussian so gradient can flow.
    """
    if r < 1:
        raise ConfigError(f"rank must be >= 1, got {r}")
    wq = as_matrix(wq, "wq")
    wk = as_matrix(wk, "wk")
    if wq.shape != wk.shape:
        raise ShapeError(f"teacher projections disagree: {wq.shape} vs {wk.shape}")
    d, d_attn = wq.shape
    d_feat = d_attn * r
    rng = make_rng(seed)

    def one(w):
        linear = np.zeros((d, d_feat))
        linear[:, :d_attn] = w
        return FeatureMapParams(
            linear=linear,
            inner_w=rng.standard_normal((d, d_feat)) / np.sqrt(d),
            inner_b=np.zeros(d_feat),
            norm_scale=np.ones(d_feat),
            norm_shift=np.zeros(d_feat),
            outer_w=np.zeros((d_feat, d_feat)),
            outer_b=np.zeros(d_feat),
        )

    return one(wq), one(wk)


# ----------------------------------------------------------------------- block

def _silu_cached(pre):
    sig = logistic(pre)
    return pre * sig, sig


def _finish_mix_cached(y_mix, x, p: LinearAttentionBlockParams):
    # gating, rms-norm, and the output projection; shared by the block
    # forward and the sharded evaluator so both produce identical bits
    cache = {"y_mix": y_mix}
    y = y_mix
    if p.gated:
        gate_pre = x @ p.gate_w
        gate_act, gate_sig = _silu_cached(gate_pre)
        y = y * gate_act
        cache.update(gate_pre=gate_pre, gate_act=gate_act, gate_sig=gate_sig)
    if p.rms_normed:
        ms = np.mean(y * y, axis=1, keepdims=True)
        inv_rms = 1.0 / np.sqrt(ms + NORM_EPS)
        y_unit = y * inv_rms
        cache.update(rms_in=y, inv_rms=inv_rms, y_unit=y_unit)
        y = y_unit * p.rms_scale
    cache["y_premix_out"] = y
    return y @ p.w_out, cache


def _block_forward_cached(x, p: LinearAttentionBlockParams):
    p.validate()
    x = as_matrix(x, "x")
    d = p.d_model
    if x.shape[1] != d:
        raise ShapeError(f"x width {x.shape[1]} does not match block width {d}")
    n = x.shape[0]
    d_head = d // p.heads

    v = x @ p.w_v
    y_mix = np.empty((n, d))
    head_caches = []
    for h in range(p.heads):
        phi_q, q_cache = _featuremap_forward_cached(x, p.query_maps[h])
        phi_k, k_cache = _featuremap_forward_cached(x, p.key_maps[h])
        v_h = v[:, h * d_head:(h + 1) * d_head]
        s = token_tree_matmul(phi_k, v_h)
        hc = {"phi_q": phi_q, "phi_k": phi_k, "q_cache": q_cache,
              "k_cache": k_cache, "v_h": v_h, "s": s}
        if p.normalized:
            if np.any(phi_q <= 0) or np.any(phi_k <= 0):
                raise DegenerateFeatureError(
                    "normalized attention needs strictly positive feature maps")
            z = token_tree_colsum(phi_k)
            den = phi_q @ z
            if np.any(den <= DENOM_GUARD):
                raise DegenerateFeatureError(
                    f"normalization denominator collapsed to {float(den.min()):.3e}")
            num = phi_q @ s
            y_h = num / den[:, None]
            hc.update(z=z, den=den, num=num)
        else:
            y_h = phi_q @ s
        hc["y_h"] = y_h
        y_mix[:, h * d_head:(h + 1) * d_head] = y_h
        head_caches.append(hc)

    out, finish_cache = _finish_mix_cached(y_mix, x, p)
    cache = {"x": x, "v": v, "heads": head_caches, **finish_cache}
    return out, cache


def linear_attention_block(x, p: LinearAttentionBlockParams) -> np.ndarray:
    """The full mixer: per-head feature-map attention over x W_V, heads
    concatenated, optional SiLU gating and RMS-norm, then W_out. Residual
    wiring is the caller's job."""
    y, _ = _block_forward_cached(x, p)
    return y


def init_block_params(d: int, d_state: int | None = None, rank: int = 4,
                      heads: int = 1, seed: int = 0, normalized: bool = True,
                      gated: bool = False, rms_normed: bool = False,
                      ) -> LinearAttentionBlockParams:
    """Random block: per-head teacher-style feature maps around fresh seeded
    projections. d_state defaults to the head width d // heads."""
    if d % heads != 0:
        raise ConfigError(f"width {d} not divisible by heads={heads}")
    if d_state is None:
        d_state = d // heads
    rng = make_rng(seed)
    scale = 1.0 / np.sqrt(d)
    query_maps, key_maps = [], []
    for h in range(heads):
        wq = rng.standard_normal((d, d_state)) * scale
        wk = rng.standard_normal((d, d_state)) * scale
        qm, km = init_from_teacher(wq, wk, rank, seed=int(rng.integers(2 ** 31)))
        query_maps.append(qm)
        key_maps.append(km)
    return LinearAttentionBlockParams(
        query_maps=query_maps,
        key_maps=key_maps,
        w_v=rng.standard_normal((d, d)) * scale,
        w_out=rng.standard_normal((d, d)) * scale,
        normalized=normalized,
        gated=gated,
        rms_normed=rms_normed,
        heads=heads,
        gate_w=rng.standard_normal((d, d)) * scale if gated else None,
        rms_scale=np.ones(d) if rms_normed else None,
    )


def block_from_teacher(wq, wk, wv, w_out, rank: int = 4, heads: int = 1,
                       seed: int = 0, normalized: bool = True,
                       ) -> LinearAttentionBlockParams:
    """Student block initialized from a softmax teacher's projections.

    The teacher's W_Q/W_K are split column-wise across heads and embedded in
    the feature maps' linear branches; W_V and W_out are copied as-is.
    """
    wq = as_matrix(wq, "wq")
    wk = as_matrix(wk, "wk")
    if wq.shape != wk.shape:
        raise ShapeError(f"teacher projections disagree: {wq.shape} vs {wk.shape}")
    d, d_attn = wq.shape
    if d_attn % heads != 0 or d % heads != 0:
        raise ConfigError(f"teacher dims ({d}, {d_attn}) not divisible by heads={heads}")
    da_head = d_attn // heads
    rng = make_rng(seed)
    query_maps, key_maps = [], []
    for h in range(heads):
        sl = slice(h * da_head, (h + 1) * da_head)
        qm, km = init_from_teacher(wq[:, sl], wk[:, sl], rank,
                                   seed=int(rng.integers(2 ** 31)))
        query_maps.append(qm)
        key_maps.append(km)
    return LinearAttentionBlockParams(
        query_maps=query_maps,
        key_maps=key_maps,
        w_v=np.array(wv, dtype=np.float64, copy=True),
        w_out=np.array(w_out, dtype=np.float64, copy=True),
        normalized=normalized,
        heads=heads,
    )


# ----------------------------------------------- degenerate non-causal check

def noncausal_shared_gate_states(g: GateSet, x) -> np.ndarray:
    """Hidden states of the non-causal sum with ONE shared gate group:
    H_i = sum_j (prod_{k=j+1}^{n} a_k) (b_j^T x_j). Returns the (n, d', d)
    stack; every slice is the same matrix because nothing depends on i."""
    g.validate()
    x = as_matrix(x, "x")
    n, d = x.shape
    if g.n != n:
        raise ShapeError("gate/token counts differ")
    suffix = np.empty(n)
    acc = 1.0
    for j in range(n - 1, -1, -1):
        suffix[j] = acc          # prod of a[j+1:], empty product = 1
        acc *= g.a[j]
    states = np.empty((n, g.d_state, d))
    for i in range(n):
        h = np.zeros((g.d_state, d))
        for j in range(n):
            h += suffix[j] * (g.b[j][:, None] * x[j][None, :])
        states[i] = h
    return states


def noncausal_per_token_states(mask, b, x) -> np.ndarray:
    """Hidden states when every output token owns a gate row:
    H_i = sum_j A[i, j] (b_j^T x_j). mask may be any n x n matrix, e.g.
    LowRankGateFactors.dense()."""
    mask = as_matrix(mask, "mask")
    b = as_matrix(b, "b")
    x = as_matrix(x, "x")
    n = x.shape[0]
    if mask.shape != (n, n) or b.shape[0] != n:
        raise ShapeError("shape mismatch between mask, b, and x")
    states = np.empty((n, b.shape[1], x.shape[1]))
    for i in range(n):
        h = np.zeros((b.shape[1], x.shape[1]))
        for j in range(n):
            h += mask[i, j] * (b[j][:, None] * x[j][None, :])
        states[i] = h
    return states


def shared_gate_degenerate_check(g: GateSet, x) -> float:
    """max_i ||H_i - H_1||_inf over the shared-gate non-causal states.

    The sum defining H_i has no i anywhere in it, so the deviation is
    exactly 0: dropping the causal mask without splitting the gates
    collapses the mixer to a single global state.
    """
    states = noncausal_shared_gate_states(g, x)
    dev = 0.0
    for i in range(1, states.shape[0]):
        dev = max(dev, float(np.max(np.abs(states[i] - states[0]))))
    return dev


def tile_tokens(x, k: int) -> np.ndarray:
    """Concatenate k copies of the token sequence (the cross-resolution
    stress input)."""
    x = as_matrix(x, "x")
    if k < 1:
        raise ConfigError(f"tile factor must be >= 1, got {k}")
    return np.tile(x, (k, 1))
