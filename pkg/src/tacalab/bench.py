"""Microbenchmarks for the attention kernels, with a correctness gate.

Timing uses the monotonic performance counter, median of >= 20 repetitions
after warmup calls; when a single call is too fast for the timer, calls are
batched per repetition (with a warning) so each measurement spans a sane
interval. Kernel math runs single-threaded by default to stabilize the
medians; a flag re-enables the BLAS thread pool. Before anything is timed,
every strategy's output is checked against the score-mod reference; timing
a wrong kernel is a hard failure.

Absolute times are machine-dependent and never asserted; the contract is
relative: the two-pass selective path lands near 2x the plain baseline, and
a full denoising run that applies it only on the gamma-active prefix stays
within a small total overhead.
"""

from __future__ import annotations

import time
import warnings
from contextlib import nullcontext
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .attention import (
    TokenLayout,
    attention_baseline,
    attention_reference,
    attention_selective,
)
from .errors import DomainError, NumericError
from .tensor_math import DEFAULT_SEED, make_rng, relative_error

BENCH_COLUMNS = ("strategy", "heads", "n_txt", "n_vis", "head_dim", "reps", "median_s", "rel_factor")
RUN_COLUMNS = ("steps", "gamma_steps", "taca_s", "baseline_s", "overhead_factor")

# equivalence tolerance by dtype, same contract as the test suite
GATE_TOL = {np.dtype(np.float64): 1e-12, np.dtype(np.float32): 1e-5}


@dataclass
class BenchRecord:
    strategy: str
    layout: TokenLayout
    median_s: float
    rel_factor: float
    reps: int

    def row(self) -> dict:
        return {
            "strategy": self.strategy,
            "heads": self.layout.heads,
            "n_txt": self.layout.n_txt,
            "n_vis": self.layout.n_vis,
            "head_dim": self.layout.head_dim,
            "reps": self.reps,
            "median_s": self.median_s,
            "rel_factor": self.rel_factor,
        }


def median_time(fn, reps: int = 20, warmup: int = 3, min_interval: float = 1e-4) -> float:
    """Median wall time of fn() over reps measurements after warmup.

    If one call finishes faster than min_interval, several calls are batched
    per measurement and the per-call time is reported, with a warning about
    the timer resolution.
    """
    for _ in range(warmup):
        fn()
    start = time.perf_counter()
    fn()
    single = time.perf_counter() - start
    inner = 1
    if single < min_interval:
        inner = max(2, int(np.ceil(min_interval / max(single, 1e-9))))
        warnings.warn(
            f"call time {single:.2e}s is below the timing floor; batching {inner} calls per rep",
            RuntimeWarning,
            stacklevel=2,
        )
    times = []
    for _ in range(reps):
        start = time.perf_counter()
        for _ in range(inner):
            fn()
        times.append((time.perf_counter() - start) / inner)
    return float(np.median(times))


def make_qkv(layout: TokenLayout, rng: np.random.Generator, dtype=np.float64):
    shape = (layout.heads, layout.total, layout.head_dim)
    return tuple(rng.standard_normal(shape).astype(dtype, copy=False) for _ in range(3))


def correctness_gate(q, k, v, gamma: float, tau: float, layout: TokenLayout) -> None:
    """Every timed path must reproduce the reference before timing starts."""
    tol = GATE_TOL[np.dtype(q.dtype)]
    err = relative_error(
        attention_selective(q, k, v, gamma, tau, layout),
        attention_reference(q, k, v, gamma, tau, layout),
    )
    if err > tol:
        raise NumericError(f"selective kernel diverges from reference: rel err {err:.3e} > {tol}")
    # baseline is only claimed equivalent at gamma = 1
    err = relative_error(
        attention_baseline(q, k, v, tau),
        attention_reference(q, k, v, 1.0, tau, layout),
    )
    if err > tol:
        raise NumericError(f"baseline kernel diverges from reference: rel err {err:.3e} > {tol}")


def run_bench(
    layout: TokenLayout,
    gamma: float = 1.2,
    tau: float = 1.0,
    dtype=np.float64,
    reps: int = 20,
    warmup: int = 3,
    seed: int = DEFAULT_SEED,
    single_thread: bool = True,
) -> list[BenchRecord]:
    """Per-call medians for baseline, reference, and selective attention."""
    rng = make_rng(seed)
    q, k, v = make_qkv(layout, rng, dtype)
    correctness_gate(q, k, v, gamma, tau, layout)
    limiter = threadpool_limits(limits=1) if single_thread else nullcontext()
    with limiter:
        t_base = median_time(lambda: attention_baseline(q, k, v, tau), reps, warmup)
        t_ref = median_time(lambda: attention_reference(q, k, v, gamma, tau, layout), reps, warmup)
        t_sel = median_time(lambda: attention_selective(q, k, v, gamma, tau, layout), reps, warmup)
    return [
        BenchRecord("baseline", layout, t_base, 1.0, reps),
        BenchRecord("reference", layout, t_ref, t_ref / t_base, reps),
        BenchRecord("selective", layout, t_sel, t_sel / t_base, reps),
    ]


def simulate_run(
    layout: TokenLayout,
    steps: int = 30,
    gamma_steps: int = 3,
    gamma: float = 1.2,
    tau: float = 1.0,
    dtype=np.float64,
    reps: int = 5,
    warmup: int = 1,
    seed: int = DEFAULT_SEED,
    single_thread: bool = True,
) -> dict:
    """Total attention cost of a run that upgrades only its gamma-active prefix.

    Times a loop of `steps` attention calls where the first `gamma_steps`
    use the selective two-pass kernel, against a loop of plain baseline
    calls, and reports the overhead factor. gamma_steps must come from the
    schedule (count of t >= t_thresh), never from a constant.
    """
    if not (0 <= gamma_steps <= steps):
        raise DomainError(f"gamma_steps {gamma_steps} outside [0, {steps}]")
    rng = make_rng(seed)
    q, k, v = make_qkv(layout, rng, dtype)
    correctness_gate(q, k, v, gamma, tau, layout)

    def taca_run():
        for i in range(steps):
            if i < gamma_steps:
                attention_selective(q, k, v, gamma, tau, layout)
            else:
                attention_baseline(q, k, v, tau)

    def baseline_run():
        for _ in range(steps):
            attention_baseline(q, k, v, tau)

    limiter = threadpool_limits(limits=1) if single_thread else nullcontext()
    with limiter:
        t_taca = median_time(taca_run, reps, warmup)
        t_base = median_time(baseline_run, reps, warmup)
    return {
        "steps": steps,
        "gamma_steps": gamma_steps,
        "taca_s": t_taca,
        "baseline_s": t_base,
        "overhead_factor": t_taca / t_base,
    }
