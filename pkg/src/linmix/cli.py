"""Command-line entry point.

linmix verify      run the property suites (exit 1 if any fails)
linmix bench       scaling benchmark, CSV + SVG outputs
linmix distill     toy teacher training + distillation, checkpoints + metrics
linmix shard-demo  constant-payload demonstration and equality check

Configuration comes from an optional flat `key = value` text file plus flag
overrides; every run writes its fully resolved configuration next to its
outputs. Exit codes: 0 success, 1 verification or training failure, 2
configuration error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .bench import DEFAULT_MEM_BUDGET, bench_run
from .distill import (
    LossWeights,
    NoiseSchedule,
    composite_loss,
    cross_resolution_drift,
    lift_tokens,
    make_batch,
    make_toy_dataset,
    mixer_checkpoint_arrays,
    train_distill,
    train_teacher,
)
from .exceptions import ConfigError, LinmixError, TrainingError
from .layers import student_from_teacher, teacher_denoiser
from .linattn import (
    dense_effective_mask,
    featuremap_forward,
    init_block_params,
    kron_rows_scalar,
    kron_rows_vector,
    linear_attention,
    linear_attention_block,
    shared_gate_degenerate_check,
)
from .numerics import make_rng, rel_err
from .oracle import (
    cumprod_causal_mask,
    masked_gated_attention_dense,
    vector_gated_attention_dense,
)
from .reporting import (
    config_hash,
    metrics_csv_text,
    write_csv,
    write_line_chart,
    write_resolved_config,
)
from .serialization import load_arrays, save_arrays
from .shard import merge_summaries, partial_aggregate, payload_size, sharded_block_forward
from .ssm import causal_scan, init_gate_projection, make_gates


DEFAULTS: dict[str, dict] = {
    "verify": {
        "seed": 0,
        "instances": 200,
        "fault": "",
        "threads": 1,
        "out": "",
    },
    "bench": {
        "seed": 0,
        "threads": 1,
        "out": "linmix_out",
        "n": [4096, 8192, 16384, 32768, 65536],
        "n_softmax": [1024, 2048, 4096, 8192],
        "d": 32,
        "d_state": 8,
        "rank": 4,
        "heads": 1,
        "repeats": 5,
        "mem_budget": DEFAULT_MEM_BUDGET,
    },
    "distill": {
        "seed": 0,
        "threads": 1,
        "out": "linmix_out",
        "h": 16,
        "w": 16,
        "d": 32,
        "depth": 4,
        "rank": 4,
        "count": 64,
        "t_steps": 100,
        "batch_size": 4,
        "lr": 1e-4,
        "alpha": 0.5,
        "beta": 0.5,
        "distill_steps": 2000,
        "teacher_lr": 1e-3,
        "teacher_max_steps": 1500,
        "variant": "normalized",
        "drift_h": 32,
        "drift_w": 32,
    },
    "shard-demo": {
        "seed": 0,
        "threads": 1,
        "out": "linmix_out",
        "n": [256, 4096, 65536],
        "d": 8,
        "d_state": 4,
        "rank": 1,
        "shards": 4,
    },
}


def parse_config_file(path: str) -> dict[str, str]:
    """Flat `key = value` lines; # starts a comment; blank lines ignored."""
    out: dict[str, str] = {}
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key = value, "
                                      f"got {raw.strip()!r}")
                key, value = line.split("=", 1)
                out[key.strip()] = value.strip()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return out


def _coerce(key: str, raw, template):
    if isinstance(raw, type(template)) and not isinstance(raw, str):
        return raw
    text = str(raw)
    try:
        if isinstance(template, bool):
            if text.lower() in ("1", "true", "yes"):
                return True
            if text.lower() in ("0", "false", "no"):
                return False
            raise ValueError(text)
        if isinstance(template, int):
            return int(text)
        if isinstance(template, float):
            return float(text)
        if isinstance(template, list):
            return [int(v.strip()) for v in text.split(",") if v.strip()]
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def resolve_config(command: str, file_cfg: dict | None = None,
                   overrides: dict | None = None) -> dict:
    if command not in DEFAULTS:
        raise ConfigError(f"unknown command {command!r}")
    cfg = dict(DEFAULTS[command])
    for source in (file_cfg or {}), (overrides or {}):
        for key, value in source.items():
            if value is None:
                continue
            if key not in cfg:
                raise ConfigError(f"unknown config key {key!r} for {command}")
            cfg[key] = _coerce(key, value, cfg[key])
    return cfg


def flat_config(cfg: dict) -> dict:
    """Canonical wire form: lists render as comma-joined values so the
    written config parses back into the same resolved config."""
    return {k: ",".join(str(x) for x in v) if isinstance(v, list) else v
            for k, v in cfg.items()}


def _prepare_out(cfg: dict, command: str) -> str | None:
    out = cfg.get("out")
    if not out:
        return None
    os.makedirs(out, exist_ok=True)
    name = command.replace("-", "_") + "_config.txt"
    write_resolved_config(os.path.join(out, name), flat_config(cfg))
    return out


# --- verify ---------------------------------------------------------------

def _suite_scan_duality(rng, instances, fault):
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(2, 33))
        d = int(rng.integers(1, 7))
        d_state = int(rng.integers(1, 5))
        x = rng.standard_normal((n, d))
        gates = make_gates(x, init_gate_projection(d, d_state,
                                                   seed=int(rng.integers(2 ** 31))))
        got = causal_scan(gates, x)
        want = masked_gated_attention_dense(
            gates.c, gates.b, x, cumprod_causal_mask(gates.a, n))
        worst = max(worst, rel_err(got, want))
    return worst <= 1e-10, f"max rel err {worst:.3e} over {instances} instances"


def _suite_kron_scalar(rng, instances, fault):
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(2, 25))
        d = int(rng.integers(1, 7))
        d_state = int(rng.integers(1, 5))
        r = int(rng.integers(1, 5))
        x = rng.standard_normal((n, d))
        c = rng.uniform(0.1, 1.0, (n, d_state))
        b = rng.uniform(0.1, 1.0, (n, d_state))
        f = rng.standard_normal((n, r))
        g = rng.standard_normal((n, r))
        got = linear_attention(kron_rows_scalar(c, f),
                               kron_rows_scalar(b, g), x)
        want = masked_gated_attention_dense(c, b, x, f @ g.T)
        worst = max(worst, rel_err(got, want))
    return worst <= 1e-10, f"max rel err {worst:.3e} over {instances} instances"


def _suite_kron_vector(rng, instances, fault):
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(2, 13))
        d = int(rng.integers(1, 5))
        d_state = int(rng.integers(1, 4))
        r = int(rng.integers(1, 4))
        x = rng.standard_normal((n, d))
        c = rng.uniform(0.1, 1.0, (n, d_state))
        b = rng.uniform(0.1, 1.0, (n, d_state))
        f_stack = rng.standard_normal((d_state, n, r))
        g_stack = rng.standard_normal((d_state, n, r))
        got = linear_attention(kron_rows_vector(c, f_stack),
                               kron_rows_vector(b, g_stack), x)
        mask_stack = np.einsum("unr,umr->unm", f_stack, g_stack)
        want = vector_gated_attention_dense(c, b, x, mask_stack)
        worst = max(worst, rel_err(got, want))
    return worst <= 1e-10, f"max rel err {worst:.3e} over {instances} instances"


def _suite_normalization(rng, instances, fault):
    worst_row = 0.0
    worst_const = 0.0
    normalized = fault != "normalization"
    for _ in range(instances):
        n = int(rng.integers(2, 33))
        d = int(rng.integers(2, 7))
        x = rng.standard_normal((n, d))
        p = init_block_params(d, d_state=2, rank=2,
                              seed=int(rng.integers(2 ** 31)))
        phi_q = featuremap_forward(x, p.query_maps[0])
        phi_k = featuremap_forward(x, p.key_maps[0])
        mask = dense_effective_mask(phi_q, phi_k, normalized=normalized)
        worst_row = max(worst_row,
                        float(np.max(np.abs(mask.sum(axis=1) - 1.0))))
        mu = rng.standard_normal(d)
        got = mask @ np.tile(mu, (n, 1))
        worst_const = max(worst_const, float(np.max(np.abs(got - mu))))
    ok = worst_row <= 1e-8 and worst_const <= 1e-10
    return ok, (f"row-sum dev {worst_row:.3e}, constant dev {worst_const:.3e} "
                f"over {instances} instances")


def _suite_shared_gate(rng, instances, fault):
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(2, 33))
        d = int(rng.integers(1, 7))
        d_state = int(rng.integers(1, 5))
        x = rng.standard_normal((n, d))
        gates = make_gates(x, init_gate_projection(d, d_state,
                                                   seed=int(rng.integers(2 ** 31))))
        worst = max(worst, shared_gate_degenerate_check(gates, x))
    return worst == 0.0, f"max hidden-state deviation {worst:.3e} (exact zero required)"


def _suite_shard(rng, instances, fault):
    worst = 0.0
    p = init_block_params(6, d_state=2, rank=2, seed=7)
    n = 48
    x = rng.standard_normal((n, 6))
    want = linear_attention_block(x, p)
    for _ in range(instances):
        cuts = np.sort(rng.choice(np.arange(1, n), size=3, replace=False))
        shards = np.split(x, cuts)
        got = sharded_block_forward(shards, p)
        worst = max(worst, rel_err(got, want))
    sizes = {payload_size(6, 4) for _ in (256, 4096, 65536)}
    ok = worst <= 1e-12 and len(sizes) == 1
    return ok, f"max rel err {worst:.3e} over {instances} partitions"


_SUITES = (
    ("scan-duality", _suite_scan_duality),
    ("kron-scalar", _suite_kron_scalar),
    ("kron-vector", _suite_kron_vector),
    ("normalization-row-sum", _suite_normalization),
    ("shared-gate-degeneracy", _suite_shared_gate),
    ("shard-equality", _suite_shard),
)


def cmd_verify(cfg: dict) -> int:
    out = _prepare_out(cfg, "verify")
    lines = []
    failed = []
    for name, suite in _SUITES:
        rng = make_rng(cfg["seed"])
        ok, detail = suite(rng, cfg["instances"], cfg["fault"])
        status = "PASS" if ok else "FAIL"
        lines.append(f"suite {name}: {status} ({detail})")
        if not ok:
            failed.append(name)
    if failed:
        lines.append(f"failed suites: {', '.join(failed)}")
    else:
        lines.append("all suites passed")
    report = "\n".join(lines)
    print(report)
    if out:
        with open(os.path.join(out, "verify_report.txt"), "w",
                  encoding="utf-8") as fh:
            fh.write(report + "\n")
    return 1 if failed else 0


# --- bench ------------------------------------------------------------------

def cmd_bench(cfg: dict) -> int:
    out = _prepare_out(cfg, "bench")
    common = dict(d=cfg["d"], d_state=cfg["d_state"], rank=cfg["rank"],
                  heads=cfg["heads"], repeats=cfg["repeats"],
                  seed=cfg["seed"], mem_budget=cfg["mem_budget"],
                  threads=cfg["threads"])
    fast = bench_run(cfg["n"], mixers=("linear", "scan"), **common)
    slow = bench_run(cfg["n_softmax"], mixers=("softmax",), **common)
    rows = fast["rows"] + slow["rows"]
    slopes = {**fast["slopes"], **slow["slopes"]}
    comments = {"config_hash": config_hash(flat_config(cfg)), "seed": cfg["seed"]}
    for mixer, slope in sorted(slopes.items()):
        print(f"{mixer}: log-log slope {slope:.3f}")
    for row in rows:
        if row["status"] != "ok":
            print(f"{row['mixer']} at n={row['n']}: {row['status']} "
                  f"(modeled {row['peak_extra_bytes']} bytes)")
    if out:
        write_csv(os.path.join(out, "bench.csv"),
                  ("mixer", "n", "wall_time_s", "peak_extra_bytes", "status"),
                  rows, comments)
        series = {}
        for mixer in slopes:
            pairs = [(r["n"], r["wall_time_s"]) for r in rows
                     if r["mixer"] == mixer and r["status"] == "ok"]
            if pairs:
                series[mixer] = ([p[0] for p in pairs], [p[1] for p in pairs])
        if series:
            write_line_chart(os.path.join(out, "bench.svg"), series,
                             "forward time vs tokens", "tokens", "seconds")
    return 0


# --- distill ----------------------------------------------------------------

def _teacher_path(out: str) -> str:
    return os.path.join(out, "teacher.lmx")


def _load_net_params(net, arrays: dict) -> None:
    params = net.params()
    missing = set(params) - set(arrays)
    if missing:
        raise ConfigError(f"checkpoint lacks {sorted(missing)[:3]}...")
    for name, arr in params.items():
        arr[...] = arrays[name]


def cmd_distill(cfg: dict) -> int:
    out = _prepare_out(cfg, "distill")
    sched = NoiseSchedule(steps=cfg["t_steps"])
    ds = make_toy_dataset(cfg["seed"], cfg["count"], cfg["h"], cfg["w"])
    tokens = lift_tokens(ds, cfg["d"])
    grid = (cfg["h"], cfg["w"])
    teacher = teacher_denoiser(cfg["d"], depth=cfg["depth"],
                               steps=cfg["t_steps"], grid=grid,
                               seed=cfg["seed"])
    teacher_file = _teacher_path(out) if out else None
    if teacher_file and os.path.exists(teacher_file):
        _load_net_params(teacher, load_arrays(teacher_file))
        print(f"loaded teacher from {teacher_file}")
    else:
        result = train_teacher(tokens, sched, teacher, lr=cfg["teacher_lr"],
                               batch_size=cfg["batch_size"],
                               max_steps=cfg["teacher_max_steps"],
                               seed=cfg["seed"] + 1)
        print(f"teacher trained: stopped at step {result['stopped_at']}, "
              f"final loss {result['log'][-1][1]:.4f}")
        if teacher_file:
            save_arrays(teacher_file, teacher.params())

    normalized = cfg["variant"] == "normalized"
    if cfg["variant"] not in ("normalized", "unnormalized"):
        raise ConfigError(f"unknown variant {cfg['variant']!r}")
    student = student_from_teacher(teacher, rank=cfg["rank"],
                                   normalized=normalized,
                                   seed=cfg["seed"] + 2)
    weights = LossWeights(cfg["alpha"], cfg["beta"])
    held_out = make_batch(tokens, sched, make_rng(cfg["seed"] + 3),
                          cfg["batch_size"])
    kd_init = composite_loss(student, teacher, held_out, weights)["parts"]["kd"]
    result = train_distill(student, teacher, tokens, sched, weights,
                           steps=cfg["distill_steps"], lr=cfg["lr"],
                           batch_size=cfg["batch_size"], seed=cfg["seed"] + 4)
    kd_final = composite_loss(student, teacher, held_out, weights)["parts"]["kd"]
    drift = cross_resolution_drift(student, grid,
                                   (cfg["drift_h"], cfg["drift_w"]),
                                   probe="gaussian", seed=cfg["seed"] + 5)
    ratio = kd_final / kd_init if kd_init > 0 else float("nan")
    print(f"held-out matching loss: init {kd_init:.6f} -> final "
          f"{kd_final:.6f} (ratio {ratio:.3f})")
    print(f"drift median ratio at {cfg['drift_h']}x{cfg['drift_w']}: "
          f"{drift['ratio_median']:.3f} ({cfg['variant']})")
    if out:
        comments = {"config_hash": config_hash(flat_config(cfg)), "seed": cfg["seed"]}
        with open(os.path.join(out, "metrics.csv"), "w",
                  encoding="utf-8") as fh:
            fh.write(metrics_csv_text(result["log"], comments))
        save_arrays(os.path.join(out, "student_mixers.lmx"),
                    mixer_checkpoint_arrays(student))
        write_csv(os.path.join(out, "summary.csv"),
                  ("kd_init", "kd_final", "kd_ratio", "drift_median",
                   "variant"),
                  [(kd_init, kd_final, ratio, drift["ratio_median"],
                    cfg["variant"])],
                  comments)
    return 0


# --- shard demo ---------------------------------------------------------------

def cmd_shard_demo(cfg: dict) -> int:
    out = _prepare_out(cfg, "shard-demo")
    d = cfg["d"]
    d_state = cfg["d_state"]
    rank = cfg["rank"]
    d_feat = d_state * rank
    p = init_block_params(d, d_state=d_state, rank=rank, seed=cfg["seed"])
    rows = []
    fixed = payload_size(d, d_feat)
    for n in cfg["n"]:
        baseline = 8 * n * (d_state + d)
        rows.append({"n": n, "payload_bytes": fixed,
                     "baseline_bytes": baseline})
        print(f"n={n}: summary payload {fixed} bytes, per-token baseline "
              f"{baseline} bytes")
    rng = make_rng(cfg["seed"] + 1)
    n_check = min(cfg["n"])
    x = rng.standard_normal((n_check, d))
    cuts = np.sort(rng.choice(np.arange(1, n_check),
                              size=cfg["shards"] - 1, replace=False))
    shards = np.split(x, cuts)
    got = sharded_block_forward(shards, p)
    want = linear_attention_block(x, p)
    err = rel_err(got, want)
    merged = merge_summaries([partial_aggregate(s, p, shard_index=i)
                              for i, s in enumerate(shards)])
    print(f"{cfg['shards']}-shard vs unsharded rel err {err:.3e} "
          f"(payload {merged.payload_bytes} bytes per shard)")
    if out:
        comments = {"config_hash": config_hash(flat_config(cfg)), "seed": cfg["seed"]}
        write_csv(os.path.join(out, "shard_demo.csv"),
                  ("n", "payload_bytes", "baseline_bytes"), rows, comments)
    if err > 1e-12:
        print("sharded forward mismatch exceeds 1e-12")
        return 1
    return 0


# --- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="linmix",
        description="normalized linear attention toolkit: verification, "
                    "benchmarks, toy distillation, shard demo")
    sub = parser.add_subparsers(dest="command", required=True)
    for command in DEFAULTS:
        cp = sub.add_parser(command)
        cp.add_argument("--config", default=None,
                        help="flat key = value config file")
        cp.add_argument("--seed", type=int, default=None)
        cp.add_argument("--out", default=None, help="output directory")
        cp.add_argument("--threads", type=int, default=None)
        if command == "verify":
            cp.add_argument("--fault", default=None,
                            help="deliberately break one property to prove "
                                 "the suite catches it (e.g. normalization)")
        if command == "distill":
            cp.add_argument("--variant", default=None,
                            choices=("normalized", "unnormalized"))
    return parser


_COMMANDS = {
    "verify": cmd_verify,
    "bench": cmd_bench,
    "distill": cmd_distill,
    "shard-demo": cmd_shard_demo,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {k: v for k, v in vars(args).items()
                 if k not in ("command", "config") and v is not None}
    try:
        file_cfg = parse_config_file(args.config) if args.config else {}
        cfg = resolve_config(args.command, file_cfg, overrides)
        return _COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return 1
    except LinmixError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
