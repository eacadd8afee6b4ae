"""Session fixtures for the acceptance gate.

The toy denoising task, its plateau-trained quadratic-mixer teacher, and the
distilled students are expensive to build, so they are constructed once per
session and shared by every acceptance test that needs them. Nothing here
runs unless a test requests it.
"""

import time

import pytest

from linmix.distill import (
    LossWeights,
    NoiseSchedule,
    composite_loss,
    lift_tokens,
    make_batch,
    make_toy_dataset,
    train_distill,
    train_teacher,
)
from linmix.layers import student_from_teacher, teacher_denoiser
from linmix.numerics import make_rng

ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo one line per acceptance criterion after the run.

    The gate tests record their verdicts here because output capture would
    otherwise swallow lines printed mid-test.
    """
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


TOY_GRID = (16, 16)
TOY_WIDTH = 32
TOY_DEPTH = 4
TOY_T_STEPS = 100


@pytest.fixture(scope="session")
def toy_task():
    ds = make_toy_dataset(seed=11, count=64, h=TOY_GRID[0], w=TOY_GRID[1])
    return {
        "tokens": lift_tokens(ds, TOY_WIDTH),
        "sched": NoiseSchedule(steps=TOY_T_STEPS),
        "grid": TOY_GRID,
    }


@pytest.fixture(scope="session")
def toy_teacher(toy_task):
    net = teacher_denoiser(TOY_WIDTH, depth=TOY_DEPTH, steps=TOY_T_STEPS,
                           grid=TOY_GRID, seed=11)
    t0 = time.perf_counter()
    result = train_teacher(toy_task["tokens"], toy_task["sched"], net,
                           lr=1e-3, batch_size=4, max_steps=1500, seed=12)
    return {
        "net": net,
        "stopped_at": result["stopped_at"],
        "final_loss": result["log"][-1][1],
        "seconds": time.perf_counter() - t0,
    }


def distill_run(toy_task, teacher_net, normalized: bool, steps: int = 2000):
    """One complete distillation with the stated recipe: alpha = beta = 0.5,
    lr 1e-4, batch 4, rank-4 student seeded from the teacher."""
    student = student_from_teacher(teacher_net, rank=4, normalized=normalized,
                                   seed=13)
    weights = LossWeights(0.5, 0.5)
    held_out = make_batch(toy_task["tokens"], toy_task["sched"],
                          make_rng(14), 8)
    kd_init = composite_loss(student, teacher_net, held_out,
                             weights)["parts"]["kd"]
    t0 = time.perf_counter()
    out = train_distill(student, teacher_net, toy_task["tokens"],
                        toy_task["sched"], weights, steps=steps, lr=1e-4,
                        batch_size=4, seed=15)
    seconds = time.perf_counter() - t0
    kd_final = composite_loss(student, teacher_net, held_out,
                              weights)["parts"]["kd"]
    return {
        "student": student,
        "params": out["params"],
        "log": out["log"],
        "kd_init": kd_init,
        "kd_final": kd_final,
        "seconds": seconds,
    }


@pytest.fixture(scope="session")
def distilled_pair(toy_task, toy_teacher):
    """The same seeded recipe executed twice, end to end, for the
    determinism claim."""
    return [distill_run(toy_task, toy_teacher["net"], normalized=True),
            distill_run(toy_task, toy_teacher["net"], normalized=True)]


@pytest.fixture(scope="session")
def distilled_unnormalized(toy_task, toy_teacher):
    """Ablation: identical recipe with normalization disabled."""
    return distill_run(toy_task, toy_teacher["net"], normalized=False)
