"""Estimator-style wrappers around the functional core.

Each transformer follows the fit/transform protocol: fit draws seeded
projection weights sized to the input width, transform applies the mixer
row-for-row. Parameters set in __init__ are hyperparameters (visible to
get_params/set_params and clone); arrays learned or drawn in fit carry a
trailing underscore.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .distill import (
    LossWeights,
    NoiseSchedule,
    ToyDataset,
    composite_loss,
    lift_tokens,
    make_batch,
    train_distill,
    train_teacher,
)
from .exceptions import ShapeError
from .layers import student_from_teacher, teacher_denoiser
from .linattn import init_block_params, linear_attention_block
from .numerics import logistic, make_rng
from .oracle import softmax_attention
from .ssm import (
    GateSet,
    bidirectional_scan,
    causal_scan,
    init_gate_projection,
    make_gates,
    normalized_causal_scan,
)


def _validated(X):
    return check_array(X, dtype=np.float64, ensure_min_samples=1)


def _check_width(X, n_features):
    if X.shape[1] != n_features:
        raise ShapeError(f"X has {X.shape[1]} features, expected {n_features}")


class SoftmaxAttention(TransformerMixin, BaseEstimator):
    """Quadratic-cost reference mixer: rows attend to all rows via softmax."""

    def __init__(self, d_attn=None, seed=0):
        self.d_attn = d_attn
        self.seed = seed

    def fit(self, X, y=None):
        X = _validated(X)
        d = X.shape[1]
        d_attn = self.d_attn if self.d_attn is not None else d
        rng = make_rng(self.seed)
        scale = 1.0 / np.sqrt(d)
        self.wq_ = rng.standard_normal((d, d_attn)) * scale
        self.wk_ = rng.standard_normal((d, d_attn)) * scale
        self.wv_ = rng.standard_normal((d, d)) * scale
        self.n_features_in_ = d
        return self

    def transform(self, X):
        check_is_fitted(self, "wq_")
        X = _validated(X)
        _check_width(X, self.n_features_in_)
        return softmax_attention(X, self.wq_, self.wk_, self.wv_)


class CausalSSM(TransformerMixin, BaseEstimator):
    """Left-to-right gated scan; optional row-stochastic normalization."""

    def __init__(self, d_state=4, normalized=False, seed=0):
        self.d_state = d_state
        self.normalized = normalized
        self.seed = seed

    def fit(self, X, y=None):
        X = _validated(X)
        self.proj_ = init_gate_projection(X.shape[1], self.d_state, self.seed)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "proj_")
        X = _validated(X)
        _check_width(X, self.n_features_in_)
        gates = make_gates(X, self.proj_)
        scan = normalized_causal_scan if self.normalized else causal_scan
        return scan(gates, X)


class BidirectionalSSM(TransformerMixin, BaseEstimator):
    """Opposing scans with shared b/c gates and per-direction forget gates."""

    def __init__(self, d_state=4, normalized=False, seed=0):
        self.d_state = d_state
        self.normalized = normalized
        self.seed = seed

    def fit(self, X, y=None):
        X = _validated(X)
        d = X.shape[1]
        self.proj_ = init_gate_projection(d, self.d_state, self.seed)
        rng = make_rng(self.seed + 1)
        self.w_a_bwd_ = rng.standard_normal(d) / np.sqrt(d)
        self.n_features_in_ = d
        return self

    def transform(self, X):
        check_is_fitted(self, "proj_")
        X = _validated(X)
        _check_width(X, self.n_features_in_)
        fwd = make_gates(X, self.proj_)
        bwd = GateSet(a=logistic(X @ self.w_a_bwd_), b=fwd.b, c=fwd.c)
        return bidirectional_scan(fwd, bwd, X, normalized=self.normalized)


class GeneralizedLinearAttention(TransformerMixin, BaseEstimator):
    """Non-causal linear attention block with learned positive feature maps."""

    def __init__(self, d_state=None, rank=4, heads=1, normalized=True,
                 gated=False, rms_normed=False, seed=0):
        self.d_state = d_state
        self.rank = rank
        self.heads = heads
        self.normalized = normalized
        self.gated = gated
        self.rms_normed = rms_normed
        self.seed = seed

    def fit(self, X, y=None):
        X = _validated(X)
        self.block_ = init_block_params(
            X.shape[1], d_state=self.d_state, rank=self.rank,
            heads=self.heads, seed=self.seed, normalized=self.normalized,
            gated=self.gated, rms_normed=self.rms_normed)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "block_")
        X = _validated(X)
        _check_width(X, self.n_features_in_)
        return linear_attention_block(X, self.block_)


class DenoisingDistiller(BaseEstimator):
    """Train a quadratic-mixer denoiser, then distill its mixers into linear
    attention.

    fit takes a stack of single-channel images (count, h, w). predict maps a
    noisy image stack through the student denoiser at step t and returns the
    predicted noise images. score is the negative composite loss on a
    held-out batch (larger is better).
    """

    def __init__(self, d=8, depth=1, rank=2, t_steps=10, teacher_steps=200,
                 distill_steps=100, lr=1e-4, teacher_lr=1e-3, batch_size=4,
                 alpha=0.5, beta=0.5, normalized=True, seed=0):
        self.d = d
        self.depth = depth
        self.rank = rank
        self.t_steps = t_steps
        self.teacher_steps = teacher_steps
        self.distill_steps = distill_steps
        self.lr = lr
        self.teacher_lr = teacher_lr
        self.batch_size = batch_size
        self.alpha = alpha
        self.beta = beta
        self.normalized = normalized
        self.seed = seed

    def _tokens(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3:
            raise ShapeError(f"expected an image stack (count, h, w), got "
                             f"shape {X.shape}")
        if X.shape[1:] != self.grid_:
            raise ShapeError(f"images are {X.shape[1:]}, fitted on {self.grid_}")
        ds = ToyDataset(images=X, grid=self.grid_, seed=self.seed)
        return lift_tokens(ds, self.d)

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3 or X.shape[0] < 1:
            raise ShapeError(f"expected a non-empty image stack (count, h, w), "
                             f"got shape {X.shape}")
        self.grid_ = X.shape[1:]
        self.sched_ = NoiseSchedule(steps=self.t_steps)
        tokens = self._tokens(X)
        teacher = teacher_denoiser(self.d, depth=self.depth,
                                   steps=self.t_steps, grid=self.grid_,
                                   seed=self.seed)
        train_teacher(tokens, self.sched_, teacher, lr=self.teacher_lr,
                      batch_size=self.batch_size,
                      max_steps=self.teacher_steps, seed=self.seed + 1)
        student = student_from_teacher(teacher, rank=self.rank,
                                       normalized=self.normalized,
                                       seed=self.seed + 2)
        weights = LossWeights(self.alpha, self.beta)
        result = train_distill(student, teacher, tokens, self.sched_, weights,
                               steps=self.distill_steps, lr=self.lr,
                               batch_size=self.batch_size, seed=self.seed + 3)
        self.teacher_ = teacher
        self.student_ = student
        self.log_ = result["log"]
        return self

    def predict(self, X, t=1):
        check_is_fitted(self, "student_")
        tokens = self._tokens(X)
        h, w = self.grid_
        out = np.empty((tokens.shape[0], h, w))
        for i in range(tokens.shape[0]):
            eps, _ = self.student_.forward(tokens[i], t)
            out[i] = eps[:, 0].reshape(h, w)
        return out

    def score(self, X, y=None):
        check_is_fitted(self, "student_")
        tokens = self._tokens(X)
        batch = make_batch(tokens, self.sched_, make_rng(self.seed + 4),
                           min(self.batch_size, tokens.shape[0]))
        weights = LossWeights(self.alpha, self.beta)
        return -composite_loss(self.student_, self.teacher_, batch,
                               weights)["loss"]
