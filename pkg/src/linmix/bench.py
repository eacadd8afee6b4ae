"""Scaling benchmarks for the token mixers.

Three mixers are timed on identical inputs: quadratic softmax attention,
the generalized linear attention block, and the causal scan. Timing is the
median of several repeats after a warm-up pass, pinned to a configurable
BLAS thread count so machines with different core counts measure the same
thing.

Memory is reported from an explicit allocation model rather than OS RSS:
the model counts the bytes of the auxiliary buffers each mixer materializes
beyond its input and output, which is the quantity whose growth rate
distinguishes the mixers.

  softmax   scores matrix n*n plus projected q, k (n*d_state each) and
            v (n*d): 8*(n^2 + n*(2*d_state + d)) bytes
  linear    per head, the summary S (d_feat x d_head) and normalizer z
            (d_feat): heads * 8 * d_feat*(d_head + 1) bytes, n-free
  scan      hidden state (d_state x d) plus normalizer (d_state):
            8 * d_state*(d + 1) bytes, n-free

A configured byte budget stands in for physical memory: a size whose
modeled allocation exceeds the budget is recorded with an out-of-memory
status and the remaining (larger) sizes are skipped for that mixer.
"""

from __future__ import annotations

import time

import numpy as np
from threadpoolctl import threadpool_limits

from .exceptions import ConfigError
from .linattn import init_block_params, linear_attention_block
from .numerics import make_rng
from .oracle import softmax_attention
from .ssm import causal_scan, init_gate_projection, make_gates

MIXERS = ("linear", "softmax", "scan")
DEFAULT_MEM_BUDGET = 2 ** 31  # bytes


def allocation_bytes(mixer: str, n: int, d: int, d_state: int,
                     rank: int = 4, heads: int = 1) -> int:
    """Auxiliary-buffer bytes from the documented model above."""
    if mixer == "softmax":
        return 8 * (n * n + n * (2 * d_state + d))
    if mixer == "linear":
        d_feat = d_state * rank
        d_head = d // heads
        return heads * 8 * d_feat * (d_head + 1)
    if mixer == "scan":
        return 8 * d_state * (d + 1)
    raise ConfigError(f"unknown mixer {mixer!r}; choose from {MIXERS}")


def make_mixer_runner(mixer: str, d: int, d_state: int, rank: int = 4,
                      heads: int = 1, seed: int = 0):
    """A callable x -> y for one mixer with fixed seeded weights."""
    rng = make_rng(seed)
    if mixer == "softmax":
        wq = rng.standard_normal((d, d_state)) / np.sqrt(d)
        wk = rng.standard_normal((d, d_state)) / np.sqrt(d)
        wv = rng.standard_normal((d, d)) / np.sqrt(d)
        return lambda x: softmax_attention(x, wq, wk, wv)
    if mixer == "linear":
        p = init_block_params(d, d_state=d_state, rank=rank, heads=heads,
                              seed=seed)
        return lambda x: linear_attention_block(x, p)
    if mixer == "scan":
        proj = init_gate_projection(d, d_state, seed=seed)
        return lambda x: causal_scan(make_gates(x, proj), x)
    raise ConfigError(f"unknown mixer {mixer!r}; choose from {MIXERS}")


def time_callable(fn, x, repeats: int = 5, warmup: int = 1) -> float:
    """Median wall-clock seconds for fn(x) after warm-up passes."""
    if repeats < 1:
        raise ConfigError(f"need repeats >= 1, got {repeats}")
    for _ in range(warmup):
        fn(x)
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn(x)
        times.append(time.perf_counter() - start)
    return float(np.median(times))


def fit_loglog_slope(ns, ts) -> float:
    """Least-squares slope of log(time) against log(n)."""
    ns = np.asarray(ns, dtype=np.float64)
    ts = np.asarray(ts, dtype=np.float64)
    if ns.size < 2:
        raise ConfigError("need at least two sizes to fit a slope")
    return float(np.polyfit(np.log(ns), np.log(ts), 1)[0])


def bench_run(n_list, d: int = 32, d_state: int = 8, rank: int = 4,
              heads: int = 1, repeats: int = 5, seed: int = 0,
              mem_budget: int = DEFAULT_MEM_BUDGET, mixers=MIXERS,
              threads: int = 1) -> dict:
    """Time every mixer across the ascending n list.

    Returns {"rows": [...], "slopes": {mixer: slope}} where each row is a
    dict with keys mixer, n, wall_time_s, peak_extra_bytes, status. Rows
    whose modeled allocation exceeds mem_budget get status "oom" and no
    time; larger sizes for that mixer are not attempted.
    """
    n_list = [int(n) for n in n_list]
    if not n_list:
        raise ConfigError("n list is empty")
    if any(b >= a for a, b in zip(n_list[1:], n_list)):
        raise ConfigError(f"n list must be strictly ascending, got {n_list}")
    rows = []
    slopes = {}
    rng = make_rng(seed)
    with threadpool_limits(limits=threads):
        for mixer in mixers:
            fn = make_mixer_runner(mixer, d, d_state, rank=rank, heads=heads,
                                   seed=seed)
            timed_ns = []
            timed_ts = []
            for n in n_list:
                extra = allocation_bytes(mixer, n, d, d_state, rank=rank,
                                         heads=heads)
                if extra > mem_budget:
                    rows.append({"mixer": mixer, "n": n, "wall_time_s": None,
                                 "peak_extra_bytes": extra, "status": "oom"})
                    break
                x = rng.standard_normal((n, d))
                t = time_callable(fn, x, repeats=repeats)
                rows.append({"mixer": mixer, "n": n, "wall_time_s": t,
                             "peak_extra_bytes": extra, "status": "ok"})
                timed_ns.append(n)
                timed_ts.append(t)
            if len(timed_ns) >= 2:
                slopes[mixer] = fit_loglog_slope(timed_ns, timed_ts)
    return {"rows": rows, "slopes": slopes}
