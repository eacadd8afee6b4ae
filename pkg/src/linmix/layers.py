"""Trainable modules with hand-written reverse-mode gradients.

Every module follows one contract: forward(x) caches whatever backward
needs, backward(dout) returns the gradient with respect to the input and,
when the module is trainable, accumulates parameter gradients into grads().
Gradients accumulate across calls until zero_grad(), so a batch is a loop
of per-sample forward/backward pairs in canonical order (the determinism
contract: fixed iteration order, fixed seeds, no threading in the update
path).

The mixer modules wrap the two attention implementations being compared in
training: SoftmaxMixer is the quadratic teacher, LinearAttentionMixer wraps
the generalized linear attention block and differentiates through its
feature maps, normalization, and optional gate/rms paths. Their backward
passes are verified against central differences in the test suite and by
distill.finite_difference_check.
"""

from __future__ import annotations

import numpy as np

from .exceptions import ConfigError, ShapeError, StepError
from .linattn import (
    LinearAttentionBlockParams,
    _block_forward_cached,
    block_from_teacher,
)
from .numerics import NORM_EPS, as_matrix, logistic, make_rng, row_softmax


class Module:
    """Base class; subclasses populate self._p (parameters) and self._g
    (matching gradient buffers)."""

    def __init__(self):
        self._p: dict[str, np.ndarray] = {}
        self._g: dict[str, np.ndarray] = {}
        self.trainable = True

    def params(self) -> dict[str, np.ndarray]:
        return dict(self._p)

    def grads(self) -> dict[str, np.ndarray]:
        return dict(self._g)

    def zero_grad(self) -> None:
        for g in self._g.values():
            g[...] = 0.0

    def _register(self, name: str, value: np.ndarray) -> np.ndarray:
        arr = np.asarray(value, dtype=np.float64)
        self._p[name] = arr
        self._g[name] = np.zeros_like(arr)
        return arr

    def _acc(self, name: str, delta) -> None:
        if self.trainable:
            self._g[name] += delta


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, seed: int = 0, bias: bool = True):
        super().__init__()
        rng = make_rng(seed)
        self.w = self._register("w", rng.standard_normal((d_in, d_out)) / np.sqrt(d_in))
        self.b = self._register("b", np.zeros(d_out)) if bias else None
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        y = x @ self.w
        if self.b is not None:
            y = y + self.b
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        self._acc("w", self._x.T @ dy)
        if self.b is not None:
            self._acc("b", dy.sum(axis=0))
        return dy @ self.w.T


class LayerNorm(Module):
    def __init__(self, d: int):
        super().__init__()
        self.scale = self._register("scale", np.ones(d))
        self.shift = self._register("shift", np.zeros(d))
        self._xhat = None
        self._inv_std = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        mu = x.mean(axis=1, keepdims=True)
        centered = x - mu
        var = np.mean(centered * centered, axis=1, keepdims=True)
        self._inv_std = 1.0 / np.sqrt(var + NORM_EPS)
        self._xhat = centered * self._inv_std
        return self._xhat * self.scale + self.shift

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xhat, inv_std = self._xhat, self._inv_std
        self._acc("scale", (dy * xhat).sum(axis=0))
        self._acc("shift", dy.sum(axis=0))
        dxhat = dy * self.scale
        return inv_std * (dxhat - dxhat.mean(axis=1, keepdims=True)
                          - xhat * np.mean(dxhat * xhat, axis=1, keepdims=True))


def _silu_grad(pre, sig):
    return sig * (1.0 + pre * (1.0 - sig))


class Mlp(Module):
    """Two-layer d -> mult*d -> d block with SiLU in between."""

    def __init__(self, d: int, mult: int = 4, seed: int = 0):
        super().__init__()
        rng = make_rng(seed)
        self.lin1 = Linear(d, mult * d, seed=int(rng.integers(2 ** 31)))
        self.lin2 = Linear(mult * d, d, seed=int(rng.integers(2 ** 31)))
        self._pre = None
        self._sig = None

    @property
    def trainable(self):
        return self.lin1.trainable

    @trainable.setter
    def trainable(self, flag):
        # Module.__init__ assigns before lin1 exists; children carry the flag
        if "lin1" in self.__dict__:
            self.lin1.trainable = flag
            self.lin2.trainable = flag

    def params(self):
        return {**{"lin1." + k: v for k, v in self.lin1.params().items()},
                **{"lin2." + k: v for k, v in self.lin2.params().items()}}

    def grads(self):
        return {**{"lin1." + k: v for k, v in self.lin1.grads().items()},
                **{"lin2." + k: v for k, v in self.lin2.grads().items()}}

    def zero_grad(self):
        self.lin1.zero_grad()
        self.lin2.zero_grad()

    def forward(self, x):
        self._pre = self.lin1.forward(x)
        self._sig = logistic(self._pre)
        return self.lin2.forward(self._pre * self._sig)

    def backward(self, dy):
        da = self.lin2.backward(dy)
        return self.lin1.backward(da * _silu_grad(self._pre, self._sig))


class SoftmaxMixer(Module):
    """Quadratic self-attention with an output projection; the teacher's
    token mixer and the component the linear block replaces."""

    def __init__(self, d: int, d_attn: int | None = None, seed: int = 0):
        super().__init__()
        d_attn = d if d_attn is None else d_attn
        rng = make_rng(seed)
        scale = 1.0 / np.sqrt(d)
        self.wq = self._register("wq", rng.standard_normal((d, d_attn)) * scale)
        self.wk = self._register("wk", rng.standard_normal((d, d_attn)) * scale)
        self.wv = self._register("wv", rng.standard_normal((d, d)) * scale)
        self.w_out = self._register("w_out", rng.standard_normal((d, d)) * scale)
        self._score_scale = 1.0 / np.sqrt(d_attn)
        self._cache = None

    def forward(self, x):
        q = x @ self.wq
        k = x @ self.wk
        v = x @ self.wv
        attn = row_softmax((q @ k.T) * self._score_scale)
        mix = attn @ v
        self._cache = {"x": x, "q": q, "k": k, "v": v, "attn": attn, "mix": mix}
        return mix @ self.w_out

    def backward(self, dy):
        c = self._cache
        self._acc("w_out", c["mix"].T @ dy)
        dmix = dy @ self.w_out.T
        dattn = dmix @ c["v"].T
        dv = c["attn"].T @ dmix
        attn = c["attn"]
        dscores = attn * (dattn - np.sum(dattn * attn, axis=1, keepdims=True))
        dscores *= self._score_scale
        dq = dscores @ c["k"]
        dk = dscores.T @ c["q"]
        x = c["x"]
        self._acc("wq", x.T @ dq)
        self._acc("wk", x.T @ dk)
        self._acc("wv", x.T @ dv)
        return dq @ self.wq.T + dk @ self.wk.T + dv @ self.wv.T


class LinearAttentionMixer(Module):
    """Wraps a LinearAttentionBlockParams as a trainable module.

    Parameter names match the checkpoint layout (serialization.block_to_arrays):
    w_v, w_out, optional gate_w/rms_scale, and q{h}./k{h}. feature-map fields.
    """

    def __init__(self, block: LinearAttentionBlockParams):
        super().__init__()
        block.validate()
        self.block = block
        self._register("w_v", block.w_v)
        self._register("w_out", block.w_out)
        if block.gated:
            self._register("gate_w", block.gate_w)
        if block.rms_normed:
            self._register("rms_scale", block.rms_scale)
        for h in range(block.heads):
            for tag, m in ((f"q{h}.", block.query_maps[h]), (f"k{h}.", block.key_maps[h])):
                for f in ("linear", "inner_w", "inner_b", "norm_scale",
                          "norm_shift", "outer_w", "outer_b"):
                    self._register(tag + f, getattr(m, f))
        # re-point the dataclass at the registered arrays so updates through
        # params() and through block attributes are the same memory
        block.w_v = self._p["w_v"]
        block.w_out = self._p["w_out"]
        if block.gated:
            block.gate_w = self._p["gate_w"]
        if block.rms_normed:
            block.rms_scale = self._p["rms_scale"]
        for h in range(block.heads):
            for tag, m in ((f"q{h}.", block.query_maps[h]), (f"k{h}.", block.key_maps[h])):
                for f in ("linear", "inner_w", "inner_b", "norm_scale",
                          "norm_shift", "outer_w", "outer_b"):
                    setattr(m, f, self._p[tag + f])
        self._cache = None

    def forward(self, x):
        y, self._cache = _block_forward_cached(x, self.block)
        return y

    def _featuremap_backward(self, maps, fm_cache, dphi, prefix):
        u, act = fm_cache["u"], fm_cache["act"]
        normed, xhat, inv_std = fm_cache["normed"], fm_cache["xhat"], fm_cache["inv_std"]
        x = fm_cache["x"]
        du = dphi * logistic(u)
        self._acc(prefix + "linear", x.T @ du)
        self._acc(prefix + "outer_w", act.T @ du)
        self._acc(prefix + "outer_b", du.sum(axis=0))
        dact = du @ maps.outer_w.T
        dnormed = dact * np.where(normed >= 0, 1.0, maps.leaky_slope)
        self._acc(prefix + "norm_scale", (dnormed * xhat).sum(axis=0))
        self._acc(prefix + "norm_shift", dnormed.sum(axis=0))
        dxhat = dnormed * maps.norm_scale
        dpre = inv_std * (dxhat - dxhat.mean(axis=1, keepdims=True)
                          - xhat * np.mean(dxhat * xhat, axis=1, keepdims=True))
        self._acc(prefix + "inner_w", x.T @ dpre)
        self._acc(prefix + "inner_b", dpre.sum(axis=0))
        return du @ maps.linear.T + dpre @ maps.inner_w.T

    def backward(self, dy):
        c = self._cache
        p = self.block
        x = c["x"]
        n, d = x.shape
        d_head = d // p.heads

        self._acc("w_out", c["y_premix_out"].T @ dy)
        dcur = dy @ p.w_out.T
        if p.rms_normed:
            y1, inv_rms, y_unit = c["rms_in"], c["inv_rms"], c["y_unit"]
            self._acc("rms_scale", (dcur * y_unit).sum(axis=0))
            dy_unit = dcur * p.rms_scale
            dr = (dy_unit * y1).sum(axis=1, keepdims=True)
            dcur = dy_unit * inv_rms - dr * (inv_rms ** 3) * y1 / d
        if p.gated:
            dgate_act = dcur * c["y_mix"]
            dcur = dcur * c["gate_act"]
            dgate_pre = dgate_act * _silu_grad(c["gate_pre"], c["gate_sig"])
            self._acc("gate_w", x.T @ dgate_pre)
            dx = dgate_pre @ p.gate_w.T
        else:
            dx = np.zeros_like(x)

        dv = np.empty_like(c["v"])
        for h, hc in enumerate(c["heads"]):
            dy_h = dcur[:, h * d_head:(h + 1) * d_head]
            phi_q, phi_k = hc["phi_q"], hc["phi_k"]
            s, v_h = hc["s"], hc["v_h"]
            if p.normalized:
                den, num, z = hc["den"], hc["num"], hc["z"]
                dnum = dy_h / den[:, None]
                dden = -(dy_h * num).sum(axis=1) / (den * den)
                dphi_q = dnum @ s.T + dden[:, None] * z[None, :]
                ds = phi_q.T @ dnum
                dz = phi_q.T @ dden
                dphi_k = v_h @ ds.T + dz[None, :]
            else:
                dphi_q = dy_h @ s.T
                ds = phi_q.T @ dy_h
                dphi_k = v_h @ ds.T
            dv[:, h * d_head:(h + 1) * d_head] = phi_k @ ds
            dx += self._featuremap_backward(p.query_maps[h], hc["q_cache"], dphi_q, f"q{h}.")
            dx += self._featuremap_backward(p.key_maps[h], hc["k_cache"], dphi_k, f"k{h}.")
        self._acc("w_v", x.T @ dv)
        dx += dv @ p.w_v.T
        return dx


class TimeEmbedding:
    """Fixed sinusoidal step embedding added to every token; not trainable."""

    def __init__(self, steps: int, d: int):
        if steps < 1 or d < 1:
            raise ConfigError(f"need steps >= 1 and d >= 1, got ({steps}, {d})")
        self.steps = steps
        pos = np.arange(steps, dtype=np.float64)[:, None]
        idx = np.arange(d, dtype=np.float64)[None, :]
        angle = pos / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / d)
        table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
        self.table = table

    def lookup(self, t: int) -> np.ndarray:
        # t is the 1-based schedule step
        if not 1 <= t <= self.steps:
            raise StepError(f"step {t} outside [1, {self.steps}]")
        return self.table[t - 1]


class DenoiserBlock:
    """Pre-norm residual block: x + mixer(ln1(x)), then h + mlp(ln2(h)).

    The mixer output before the residual add is kept as the per-layer tap
    used by the feature-matching loss.
    """

    def __init__(self, d: int, mixer, seed: int = 0):
        rng = make_rng(seed)
        self.ln1 = LayerNorm(d)
        self.ln2 = LayerNorm(d)
        self.mixer = mixer
        self.mlp = Mlp(d, seed=int(rng.integers(2 ** 31)))
        self.tap = None

    def submodules(self):
        return {"ln1": self.ln1, "mixer": self.mixer, "ln2": self.ln2,
                "mlp": self.mlp}

    def forward(self, x):
        m = self.mixer.forward(self.ln1.forward(x))
        self.tap = m
        h = x + m
        return h + self.mlp.forward(self.ln2.forward(h))

    def backward(self, dout, dtap=None):
        dh = dout + self.ln2.backward(self.mlp.backward(dout))
        dm = dh if dtap is None else dh + dtap
        return dh + self.ln1.backward(self.mixer.backward(dm))


class DenoiserNet:
    """Token-space denoiser: time embedding, a stack of pre-norm mixer
    blocks, a final LayerNorm, and a linear head predicting the noise."""

    def __init__(self, d: int, mixers: list, steps: int, grid: tuple[int, int],
                 seed: int = 0):
        if not mixers:
            raise ConfigError("need at least one mixer")
        rng = make_rng(seed)
        self.d = d
        self.grid = tuple(grid)
        self.time_emb = TimeEmbedding(steps, d)
        self.blocks = [DenoiserBlock(d, mx, seed=int(rng.integers(2 ** 31)))
                       for mx in mixers]
        self.final_ln = LayerNorm(d)
        self.head = Linear(d, d, seed=int(rng.integers(2 ** 31)))

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def named_modules(self) -> dict[str, Module]:
        out: dict[str, Module] = {}
        for i, blk in enumerate(self.blocks):
            for name, mod in blk.submodules().items():
                out[f"block{i}.{name}"] = mod
        out["final_ln"] = self.final_ln
        out["head"] = self.head
        return out

    def params(self) -> dict[str, np.ndarray]:
        return {f"{mn}.{pn}": arr
                for mn, mod in self.named_modules().items()
                for pn, arr in mod.params().items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {f"{mn}.{pn}": arr
                for mn, mod in self.named_modules().items()
                for pn, arr in mod.grads().items()}

    def zero_grad(self) -> None:
        for mod in self.named_modules().values():
            mod.zero_grad()

    def set_trainable(self, flag: bool, mixers_only: bool = False) -> None:
        for name, mod in self.named_modules().items():
            if mixers_only and not name.endswith(".mixer"):
                mod.trainable = False
            else:
                mod.trainable = flag

    def trainable_params(self) -> dict[str, np.ndarray]:
        return {f"{mn}.{pn}": arr
                for mn, mod in self.named_modules().items() if mod.trainable
                for pn, arr in mod.params().items()}

    def trainable_grads(self) -> dict[str, np.ndarray]:
        return {f"{mn}.{pn}": arr
                for mn, mod in self.named_modules().items() if mod.trainable
                for pn, arr in mod.grads().items()}

    def forward(self, x, t: int):
        """One sample: x is (n, d) noisy tokens, t the 1-based schedule step.
        Returns (noise prediction, per-layer mixer taps)."""
        x = as_matrix(x, "x")
        if x.shape[1] != self.d:
            raise ShapeError(f"token width {x.shape[1]} does not match net width {self.d}")
        h = x + self.time_emb.lookup(t)
        taps = []
        for blk in self.blocks:
            h = blk.forward(h)
            taps.append(blk.tap)
        return self.head.forward(self.final_ln.forward(h)), taps

    def backward(self, deps, dtaps=None):
        dh = self.final_ln.backward(self.head.backward(deps))
        for i in range(len(self.blocks) - 1, -1, -1):
            dtap = None if dtaps is None else dtaps[i]
            dh = self.blocks[i].backward(dh, dtap)
        return dh


class AdamW:
    """Decoupled-weight-decay adaptive-moment optimizer; iterates parameters
    in sorted-name order so updates are deterministic."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name in sorted(self.params):
            p = self.params[name]
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p -= self.lr * (update + self.weight_decay * p)


def teacher_denoiser(d: int, depth: int, steps: int, grid: tuple[int, int],
                     d_attn: int | None = None, seed: int = 0) -> DenoiserNet:
    """A softmax-attention denoiser with seeded initialization."""
    rng = make_rng(seed)
    mixers = [SoftmaxMixer(d, d_attn=d_attn, seed=int(rng.integers(2 ** 31)))
              for _ in range(depth)]
    return DenoiserNet(d, mixers, steps, grid, seed=int(rng.integers(2 ** 31)))


def student_from_teacher(teacher: DenoiserNet, rank: int = 4,
                         normalized: bool = True, seed: int = 0) -> DenoiserNet:
    """Clone the teacher, swapping each softmax mixer for a linear attention
    block initialized from that mixer's projections. Every non-mixer
    parameter is copied verbatim; only the mixers differ."""
    rng = make_rng(seed)
    mixers = []
    for blk in teacher.blocks:
        mx = blk.mixer
        if not isinstance(mx, SoftmaxMixer):
            raise ConfigError("teacher must use softmax mixers")
        block = block_from_teacher(mx.wq, mx.wk, mx.wv, mx.w_out, rank=rank,
                                   seed=int(rng.integers(2 ** 31)),
                                   normalized=normalized)
        mixers.append(LinearAttentionMixer(block))
    student = DenoiserNet(teacher.d, mixers, teacher.time_emb.steps,
                          teacher.grid, seed=1)
    src = teacher.params()
    dst = student.params()
    for name, arr in dst.items():
        if ".mixer." not in name:
            arr[...] = src[name]
    return student
