"""Toy-scale denoising distillation.

A softmax-attention denoiser (the teacher) is trained on procedural images
until its validation loss plateaus. A linear-attention twin (the student,
built by student_from_teacher so every non-mixer weight is shared) is then
trained on a composite objective: predict the true noise, match the
teacher's prediction, and match each mixer's output layer by layer. Only
the mixer parameters move.

The module also houses the two verification instruments used throughout
the test suite: finite_difference_check compares every analytic gradient
path against central differences, and cross_resolution_drift measures how
per-channel mixer statistics move when the token count changes, which is
the property that separates normalized from unnormalized attention.

Everything is deterministic given seeds: batches come from one generator
in a fixed draw order and gradient accumulation walks samples in canonical
order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, StepError, TapError, TrainingError
from .layers import AdamW, DenoiserNet, LinearAttentionMixer
from .linattn import tile_tokens
from .numerics import make_rng


class NoiseSchedule:
    """Linear-beta forward schedule; alpha_bar drives the closed-form jump
    to any step."""

    def __init__(self, steps: int = 100, beta_start: float = 1e-4,
                 beta_end: float = 2e-2):
        if steps < 1:
            raise ConfigError(f"need at least one step, got {steps}")
        beta = np.linspace(beta_start, beta_end, steps)
        self._validate_and_set(beta)

    @classmethod
    def from_betas(cls, beta) -> "NoiseSchedule":
        sched = cls.__new__(cls)
        sched._validate_and_set(np.asarray(beta, dtype=np.float64))
        return sched

    def _validate_and_set(self, beta: np.ndarray) -> None:
        if beta.ndim != 1 or beta.size < 1:
            raise ConfigError(f"beta must be a nonempty vector, got shape {beta.shape}")
        if np.any(beta <= 0.0) or np.any(beta >= 1.0):
            raise ConfigError("beta values must lie strictly inside (0, 1)")
        alpha_bar = np.cumprod(1.0 - beta)
        if np.any(alpha_bar <= 0.0) or np.any(alpha_bar >= 1.0):
            raise ConfigError("alpha_bar left (0, 1); schedule too aggressive")
        if np.any(np.diff(alpha_bar) >= 0.0):
            raise ConfigError("alpha_bar must be strictly decreasing")
        self.beta = beta
        self.alpha_bar = alpha_bar

    @property
    def steps(self) -> int:
        return int(self.beta.size)


def diffuse(z0, t: int, eps, sched: NoiseSchedule):
    """Jump the clean tokens z0 straight to step t: sqrt(abar)*z0 +
    sqrt(1-abar)*eps. Steps are 1-based."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ConfigError(f"z0 {z0.shape} and eps {eps.shape} must match")
    if not 1 <= t <= sched.steps:
        raise StepError(f"step {t} outside [1, {sched.steps}]")
    abar = sched.alpha_bar[t - 1]
    return np.sqrt(abar) * z0 + np.sqrt(1.0 - abar) * eps


@dataclass
class ToyDataset:
    images: np.ndarray  # (count, h, w) in [-1, 1]
    grid: tuple[int, int]
    seed: int


def make_toy_dataset(seed: int, count: int, h: int, w: int) -> ToyDataset:
    """Procedural gaussian blobs and oriented stripes, deterministic given
    the seed, every pixel in [-1, 1]."""
    if count < 1 or h < 1 or w < 1:
        raise ConfigError(f"need count, h, w >= 1, got ({count}, {h}, {w})")
    rng = make_rng(seed)
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    images = np.empty((count, h, w))
    for i in range(count):
        if rng.integers(2) == 0:
            img = np.zeros((h, w))
            for _ in range(int(rng.integers(2, 5))):
                cy, cx = rng.uniform(0.0, 1.0, size=2)
                sigma = rng.uniform(0.08, 0.25)
                amp = rng.uniform(0.5, 1.0) * (1.0 if rng.integers(2) else -1.0)
                img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2)
                                    / (2.0 * sigma * sigma))
            img /= max(1.0, float(np.abs(img).max()))
        else:
            fy, fx = rng.uniform(-3.0, 3.0, size=2)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            amp = rng.uniform(0.4, 1.0)
            img = amp * np.sin(2.0 * np.pi * (fy * yy + fx * xx) + phase)
        images[i] = img
    return ToyDataset(images=images, grid=(h, w), seed=seed)


def _position_channels(h: int, w: int, d_pos: int) -> np.ndarray:
    # fixed sinusoidal 2-D position code: sin/cos of row then column at
    # geometric frequencies, cycling through the four combinations
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    y = yy.reshape(-1)
    x = xx.reshape(-1)
    cols = np.empty((h * w, d_pos))
    for c in range(d_pos):
        angle = 2.0 * np.pi * (2.0 ** (c // 4))
        kind = c % 4
        if kind == 0:
            cols[:, c] = np.sin(angle * y)
        elif kind == 1:
            cols[:, c] = np.cos(angle * y)
        elif kind == 2:
            cols[:, c] = np.sin(angle * x)
        else:
            cols[:, c] = np.cos(angle * x)
    return cols


def lift_tokens(ds: ToyDataset, d: int) -> np.ndarray:
    """Tokenize every image row-major and lift to d channels: channel 0 is
    the pixel value, the rest are fixed sinusoidal position channels.
    Returns (count, h*w, d)."""
    if d < 1:
        raise ConfigError(f"need d >= 1, got {d}")
    h, w = ds.grid
    pos = _position_channels(h, w, d - 1)
    count = ds.images.shape[0]
    out = np.empty((count, h * w, d))
    for i in range(count):
        out[i, :, 0] = ds.images[i].reshape(-1)
        out[i, :, 1:] = pos
    return out


@dataclass
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.5

    def __post_init__(self):
        if self.alpha < 0.0 or self.beta < 0.0:
            raise ConfigError("loss weights must be non-negative")


@dataclass
class Batch:
    """One training batch; cond is a conditioning slot that is always empty
    in this unconditional setup but kept so the loss signature matches the
    conditional form."""

    z0: np.ndarray    # (B, n, d)
    t: np.ndarray     # (B,) 1-based steps
    eps: np.ndarray   # (B, n, d)
    z_t: np.ndarray   # (B, n, d)
    cond: None = field(default=None)

    @property
    def size(self) -> int:
        return int(self.t.size)


def make_batch(tokens: np.ndarray, sched: NoiseSchedule, rng,
               batch_size: int) -> Batch:
    count, n, d = tokens.shape
    idx = rng.integers(0, count, size=batch_size)
    t = rng.integers(1, sched.steps + 1, size=batch_size)
    eps = rng.standard_normal((batch_size, n, d))
    z0 = tokens[idx]
    z_t = np.empty_like(z0)
    for b in range(batch_size):
        z_t[b] = diffuse(z0[b], int(t[b]), eps[b], sched)
    return Batch(z0=z0, t=t, eps=eps, z_t=z_t)


def _mean_sq(a: np.ndarray) -> float:
    return float(np.mean(a * a))


def _parts_from_outputs(student_out, teacher_out, batch: Batch,
                        weights: LossWeights) -> dict:
    # student_out/teacher_out: per-sample (eps_pred, taps) lists
    depth = len(student_out[0][1])
    b_count = batch.size
    simple = kd = feat = 0.0
    for b in range(b_count):
        s_eps, s_taps = student_out[b]
        t_eps, t_taps = teacher_out[b]
        simple += _mean_sq(s_eps - batch.eps[b])
        kd += _mean_sq(s_eps - t_eps)
        feat += sum(_mean_sq(st - tt) for st, tt in zip(s_taps, t_taps)) / depth
    simple /= b_count
    kd /= b_count
    feat /= b_count
    total = simple + weights.alpha * kd + weights.beta * feat
    return {"total": total, "simple": simple, "kd": kd, "feat": feat}


def _check_tap_compat(student: DenoiserNet, teacher: DenoiserNet) -> None:
    if student.depth != teacher.depth:
        raise TapError(f"student exposes {student.depth} taps, "
                       f"teacher {teacher.depth}")


def composite_loss(student: DenoiserNet, teacher: DenoiserNet, batch: Batch,
                   weights: LossWeights | None = None) -> dict:
    """Forward-only evaluation of the training objective: noise prediction
    error, output-matching error against the teacher, and the per-layer
    mixer-output matching term (averaged over layers). Every term is a mean
    over batch, tokens, and channels."""
    weights = LossWeights() if weights is None else weights
    _check_tap_compat(student, teacher)
    student_out = [student.forward(batch.z_t[b], int(batch.t[b]))
                   for b in range(batch.size)]
    teacher_out = [teacher.forward(batch.z_t[b], int(batch.t[b]))
                   for b in range(batch.size)]
    parts = _parts_from_outputs(student_out, teacher_out, batch, weights)
    return {"loss": parts["total"],
            "parts": {k: parts[k] for k in ("simple", "kd", "feat")}}


def _loss_and_grads(student: DenoiserNet, teacher: DenoiserNet, batch: Batch,
                    weights: LossWeights) -> dict:
    """One gradient accumulation pass over the batch in canonical sample
    order; grads land in the student's modules."""
    _check_tap_compat(student, teacher)
    depth = student.depth
    b_count = batch.size
    student_out = []
    teacher_out = []
    simple = kd = feat = 0.0
    for b in range(b_count):
        z, t = batch.z_t[b], int(batch.t[b])
        t_eps, t_taps = teacher.forward(z, t)
        s_eps, s_taps = student.forward(z, t)
        n, d = s_eps.shape
        scale = 2.0 / (b_count * n * d)
        deps = scale * ((s_eps - batch.eps[b])
                        + weights.alpha * (s_eps - t_eps))
        dtaps = [weights.beta * (scale / depth) * (st - tt)
                 for st, tt in zip(s_taps, t_taps)]
        student.backward(deps, dtaps)
        student_out.append((s_eps, s_taps))
        teacher_out.append((t_eps, t_taps))
        simple += _mean_sq(s_eps - batch.eps[b])
        kd += _mean_sq(s_eps - t_eps)
        feat += sum(_mean_sq(st - tt) for st, tt in zip(s_taps, t_taps)) / depth
    simple /= b_count
    kd /= b_count
    feat /= b_count
    total = simple + weights.alpha * kd + weights.beta * feat
    return {"total": total, "simple": simple, "kd": kd, "feat": feat}


def train_teacher(tokens: np.ndarray, sched: NoiseSchedule, net: DenoiserNet,
                  lr: float = 1e-3, batch_size: int = 4, max_steps: int = 2000,
                  check_every: int = 50, patience: int = 3,
                  min_rel_improve: float = 1e-3, seed: int = 0) -> dict:
    """Ordinary denoising training of the given net until the validation
    loss plateaus (or max_steps). Returns the log and the step it stopped."""
    rng = make_rng(seed)
    val_batch = make_batch(tokens, sched, rng, batch_size)
    net.set_trainable(True)
    opt = AdamW(net.params(), lr=lr, weight_decay=0.0)
    log = []
    val_log = []
    best = np.inf
    flat_checks = 0
    stopped_at = max_steps

    def val_loss():
        total = 0.0
        for b in range(val_batch.size):
            pred, _ = net.forward(val_batch.z_t[b], int(val_batch.t[b]))
            total += _mean_sq(pred - val_batch.eps[b])
        return total / val_batch.size

    for step in range(1, max_steps + 1):
        batch = make_batch(tokens, sched, rng, batch_size)
        net.zero_grad()
        loss = 0.0
        for b in range(batch.size):
            pred, _ = net.forward(batch.z_t[b], int(batch.t[b]))
            n, d = pred.shape
            deps = (2.0 / (batch.size * n * d)) * (pred - batch.eps[b])
            net.backward(deps)
            loss += _mean_sq(pred - batch.eps[b])
        loss /= batch.size
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step}", step=step)
        opt.step(net.grads())
        log.append((step, loss))
        if step % check_every == 0:
            v = val_loss()
            val_log.append((step, v))
            if v < best * (1.0 - min_rel_improve):
                best = v
                flat_checks = 0
            else:
                flat_checks += 1
                if flat_checks >= patience:
                    stopped_at = step
                    break
    return {"net": net, "log": log, "val_log": val_log, "stopped_at": stopped_at}


def train_distill(student: DenoiserNet, teacher: DenoiserNet,
                  tokens: np.ndarray, sched: NoiseSchedule,
                  weights: LossWeights | None = None, steps: int = 2000,
                  lr: float = 1e-4, weight_decay: float = 0.01,
                  batch_size: int = 4, seed: int = 0) -> dict:
    """Distillation loop: only the student's mixers are trainable; the log
    has one (step, total, simple, kd, feat) row per step."""
    weights = LossWeights() if weights is None else weights
    _check_tap_compat(student, teacher)
    rng = make_rng(seed)
    student.set_trainable(True, mixers_only=True)
    opt = AdamW(student.trainable_params(), lr=lr, weight_decay=weight_decay)
    log = []
    for step in range(1, steps + 1):
        batch = make_batch(tokens, sched, rng, batch_size)
        student.zero_grad()
        parts = _loss_and_grads(student, teacher, batch, weights)
        if not np.isfinite(parts["total"]):
            raise TrainingError(f"non-finite loss at step {step}", step=step)
        opt.step(student.trainable_grads())
        log.append((step, parts["total"], parts["simple"], parts["kd"],
                    parts["feat"]))
    return {"params": student.params(), "log": log}


_GROUP_LINEAR = "mixer-linear"
_GROUP_NONLINEAR = "mixer-nonlinear"
_GROUP_GATE = "mixer-gate"
_GROUP_BACKBONE = "backbone"


def _param_group(name: str) -> str:
    if ".mixer." not in name:
        return _GROUP_BACKBONE
    fld = name.split(".mixer.", 1)[1]
    if "." in fld:
        fld = fld.split(".", 1)[1]
    if fld in ("gate_w", "rms_scale"):
        return _GROUP_GATE
    if fld in ("w_v", "w_out", "linear", "wq", "wk", "wv"):
        return _GROUP_LINEAR
    return _GROUP_NONLINEAR


def fd_probe(loss_fn, arr: np.ndarray, flat_idx: int,
             epsilon: float = 1e-5) -> float:
    """Central difference of loss_fn with respect to one coordinate."""
    old = arr.flat[flat_idx]
    arr.flat[flat_idx] = old + epsilon
    lp = loss_fn()
    arr.flat[flat_idx] = old - epsilon
    lm = loss_fn()
    arr.flat[flat_idx] = old
    return (lp - lm) / (2.0 * epsilon)


def finite_difference_check(student: DenoiserNet, teacher: DenoiserNet,
                            batch: Batch, weights: LossWeights | None = None,
                            probe_count: int = 100, epsilon: float = 1e-5,
                            seed: int = 0) -> float:
    """Compare every analytic gradient path against central differences.

    Probes are spread round-robin over the parameter groups (backbone,
    mixer linear maps, mixer nonlinear branches, gate projections) so each
    group is exercised. All student modules are set trainable; the teacher
    is never backpropagated, so its gradients stay exactly zero. Returns
    the worst relative error."""
    weights = LossWeights() if weights is None else weights
    student.set_trainable(True)
    student.zero_grad()
    _loss_and_grads(student, teacher, batch, weights)
    grads = student.grads()
    params = student.params()

    teacher_out = [teacher.forward(batch.z_t[b], int(batch.t[b]))
                   for b in range(batch.size)]

    def loss():
        student_out = [student.forward(batch.z_t[b], int(batch.t[b]))
                       for b in range(batch.size)]
        return _parts_from_outputs(student_out, teacher_out, batch,
                                   weights)["total"]

    groups: dict[str, list[str]] = {}
    for name in sorted(params):
        groups.setdefault(_param_group(name), []).append(name)
    order = sorted(groups)
    rng = make_rng(seed)
    worst = 0.0
    for i in range(probe_count):
        names = groups[order[i % len(order)]]
        sizes = np.array([params[n].size for n in names], dtype=np.float64)
        name = names[int(rng.choice(len(names), p=sizes / sizes.sum()))]
        arr = params[name]
        flat_idx = int(rng.integers(arr.size))
        numeric = fd_probe(loss, arr, flat_idx, epsilon)
        analytic = grads[name].flat[flat_idx]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, err)
    return float(worst)


def stable_channel_mean(a: np.ndarray) -> np.ndarray:
    """Column means computed as m1 + (n2/n)*(m2 - m1) over a halving tree.

    Algebraically the ordinary mean, but when the two halves agree bitwise
    the correction term is exactly zero, so a stack of identical rows has
    mean exactly equal to that row at any count, and scaling all rows by a
    power of two scales the mean by exactly that factor. Both exactness
    properties feed the drift measurements below."""
    n = a.shape[0]
    if n == 1:
        return a[0].astype(np.float64, copy=True)
    h = n // 2
    m1 = stable_channel_mean(a[:h])
    m2 = stable_channel_mean(a[h:])
    return m1 + ((n - h) / n) * (m2 - m1)


_DRIFT_PROBES = ("gaussian", "constant", "tiled")


def _mixer_tap_means(net: DenoiserNet, x: np.ndarray) -> list[np.ndarray]:
    # feed each mixer directly; per-channel mean |output|
    return [stable_channel_mean(np.abs(blk.mixer.forward(x)))
            for blk in net.blocks]


def _net_tap_means(net: DenoiserNet, n: int, rng, repeats: int) -> list[np.ndarray]:
    acc = [np.zeros(net.d) for _ in range(net.depth)]
    for _ in range(repeats):
        x = rng.standard_normal((n, net.d))
        _, taps = net.forward(x, 1)
        for layer, tap in enumerate(taps):
            acc[layer] += stable_channel_mean(np.abs(tap))
    return [a / repeats for a in acc]


def cross_resolution_drift(net: DenoiserNet, train_shape: tuple[int, int],
                           test_shape: tuple[int, int], probe: str = "gaussian",
                           repeats: int = 8, seed: int = 0) -> dict:
    """How much do per-channel mixer statistics move when the token count
    changes? Reports the ratio mean|output| per channel (test over train)
    for every layer plus summary stats.

    Probe kinds:
      gaussian  matched-statistics random tokens through the whole net;
                taps are the mixer outputs in context (averaged over repeats)
      constant  one random channel vector broadcast to every token, fed to
                each mixer directly; a token-count-independent mixer gives
                ratio exactly 1.0
      tiled     random tokens at train size, tiled to test size, fed to each
                mixer directly; test count must be a multiple of train count
    """
    if probe not in _DRIFT_PROBES:
        raise ConfigError(f"unknown probe {probe!r}; choose from {_DRIFT_PROBES}")
    n_train = int(train_shape[0]) * int(train_shape[1])
    n_test = int(test_shape[0]) * int(test_shape[1])
    if n_train < 1 or n_test < 1:
        raise ConfigError("shapes must contain at least one token")
    rng = make_rng(seed)
    if probe == "gaussian":
        train_means = _net_tap_means(net, n_train, rng, repeats)
        test_means = _net_tap_means(net, n_test, rng, repeats)
    elif probe == "constant":
        row = rng.standard_normal(net.d)
        train_means = _mixer_tap_means(net, np.tile(row, (n_train, 1)))
        test_means = _mixer_tap_means(net, np.tile(row, (n_test, 1)))
    else:
        if n_test % n_train != 0:
            raise ConfigError(f"tiled probe needs test tokens ({n_test}) to be "
                              f"a multiple of train tokens ({n_train})")
        base = rng.standard_normal((n_train, net.d))
        train_means = _mixer_tap_means(net, base)
        test_means = _mixer_tap_means(net, tile_tokens(base, n_test // n_train))
    per_layer = []
    kept = []
    for tr, te in zip(train_means, test_means):
        mask = tr > 1e-30
        ratio = np.full(net.d, np.nan)
        ratio[mask] = te[mask] / tr[mask]
        per_layer.append(ratio)
        kept.append(ratio[mask])
    flat = np.concatenate(kept) if kept else np.array([])
    return {
        "probe": probe,
        "train_tokens": n_train,
        "test_tokens": n_test,
        "per_layer": per_layer,
        "ratios": flat,
        "ratio_median": float(np.median(flat)) if flat.size else float("nan"),
        "ratio_min": float(flat.min()) if flat.size else float("nan"),
        "ratio_max": float(flat.max()) if flat.size else float("nan"),
    }


def mixer_checkpoint_arrays(student: DenoiserNet) -> dict[str, np.ndarray]:
    """Flatten the student's mixer blocks into named arrays using the block
    checkpoint layout, prefixed per layer."""
    from .serialization import block_to_arrays

    out: dict[str, np.ndarray] = {}
    for i, blk in enumerate(student.blocks):
        mx = blk.mixer
        if not isinstance(mx, LinearAttentionMixer):
            raise ConfigError("checkpointing expects linear-attention mixers")
        for name, arr in block_to_arrays(mx.block).items():
            out[f"mixer{i}.{name}"] = arr
    return out
