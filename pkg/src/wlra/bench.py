"""Optimizer benchmark on seeded heterogeneous weighted problems."""

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, InputError, WlraError
from .objective import WeightedProblem, residual_losses
from .solvers import SolverConfig, solve

log = logging.getLogger(__name__)

BENCH_METHODS = ("svd", "fwsvd", "sgd", "adam", "als", "adam_sgd")
ROW_SPREAD = 1.0
ELEMENT_SPREAD = 0.5
DEFAULT_ETA = 1e-2
# sampled-coordinate steps see the raw importance of one element at a time, so
# they need a smaller step than the full-batch methods to stay stable
SGD_ETA_FACTOR = 0.1
# a method has reached "Adam quality" once its loss is within this relative
# distance of Adam's final loss
QUALITY_TOL = 1e-3
# final losses this close (relative) count as equal; it matches the default
# relative-change tolerance the solvers use to declare convergence
TIE_REL = 1e-9


def bench_problem(seed, size=64, rank=8):
    """Gaussian W (entries of variance 1/size) with log-normal row and element importance."""
    if size < 2 or not 1 <= rank <= size:
        raise InputError("need size >= 2 and 1 <= rank <= size", size=size, rank=rank)
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((size, size)) / math.sqrt(size)
    rows = np.exp(ROW_SPREAD * rng.standard_normal((size, 1)))
    imp = rows * np.exp(ELEMENT_SPREAD * rng.standard_normal((size, size)))
    return WeightedProblem(w, imp / imp.mean(), rank)


def method_config(method, budget_steps, seed, eta=DEFAULT_ETA, size=64):
    """Gradient methods spend the whole budget; ALS stops once it has converged."""
    common = dict(method=method, max_steps=budget_steps, seed=seed, eta=eta)
    if method in ("sgd", "adam", "adam_sgd"):
        common["tol_rel"] = 0.0
    if method == "sgd":
        common["sgd_batch"] = size * size  # one pass worth of sampled coordinates per step
        common["eta"] = eta * SGD_ETA_FACTOR
    return SolverConfig(**common)


@dataclass
class BenchCell:
    seed: int
    method: str
    status: str = "ok"
    weighted_error: float | None = None
    unweighted_error: float | None = None
    steps: int = 0
    steps_to_adam_quality: int | None = None
    switch_step: int | None = None
    wall_time: float = 0.0
    curve: np.ndarray | None = field(default=None, repr=False)


@dataclass
class BenchReport:
    size: int
    rank: int
    seeds: list
    budget_steps: int
    eta: float
    cells: list

    def by_method(self, method):
        return [c for c in self.cells if c.method == method]

    def cell(self, seed, method):
        for c in self.cells:
            if c.seed == seed and c.method == method:
                return c
        raise KeyError((seed, method))

    def orderings(self):
        """Per-seed counts behind the headline comparisons."""
        below_fw = le_adam = le_adam_strict = 0
        for s in self.seeds:
            hyb, fw, adam = self.cell(s, "adam_sgd"), self.cell(s, "fwsvd"), self.cell(s, "adam")
            if hyb.status != "ok":
                continue
            if fw.status == "ok" and hyb.weighted_error < fw.weighted_error:
                below_fw += 1
            if adam.status == "ok":
                le_adam += hyb.weighted_error <= adam.weighted_error * (1.0 + TIE_REL)
                le_adam_strict += hyb.weighted_error <= adam.weighted_error
        return {
            "adam_sgd_below_fwsvd": below_fw,
            "adam_sgd_le_adam": le_adam,
            "adam_sgd_le_adam_strict": le_adam_strict,
            "seeds": len(self.seeds),
        }

    def summary(self):
        out = []
        for m in BENCH_METHODS:
            cells = [c for c in self.by_method(m) if c.status == "ok"]
            reached = [c.steps_to_adam_quality for c in cells if c.steps_to_adam_quality is not None]
            out.append(
                {
                    "method": m,
                    "ok_cells": len(cells),
                    "mean_weighted_error": _mean([c.weighted_error for c in cells]),
                    "mean_unweighted_error": _mean([c.unweighted_error for c in cells]),
                    "mean_steps": _mean([c.steps for c in cells]),
                    "reached_adam_quality": len(reached),
                    "mean_steps_to_adam_quality": _mean(reached),
                }
            )
        return out

    def to_dict(self):
        return {
            "size": self.size,
            "rank": self.rank,
            "seeds": list(self.seeds),
            "budget_steps": self.budget_steps,
            "eta": self.eta,
            "sgd_eta": self.eta * SGD_ETA_FACTOR,
            "quality_tol": QUALITY_TOL,
            "tie_rel": TIE_REL,
            "cells": [
                {k: getattr(c, k) for k in CSV_COLUMNS}
                for c in self.cells
            ],
            "summary": self.summary(),
            "orderings": self.orderings(),
        }


CSV_COLUMNS = (
    "seed",
    "method",
    "status",
    "weighted_error",
    "unweighted_error",
    "steps",
    "steps_to_adam_quality",
    "switch_step",
)


def _mean(xs):
    return float(np.mean(xs)) if xs else None


def _run_cell(problem, seed, method, budget_steps, eta):
    cell = BenchCell(seed, method)
    try:
        trace = solve(problem, method_config(method, budget_steps, seed, eta, problem.shape[1]))
    except DivergenceError as exc:
        cell.status = "diverged"
        cell.steps = exc.context.get("step", 0)
        return cell
    except WlraError as exc:
        cell.status = exc.code
        return cell
    cell.weighted_error, cell.unweighted_error = residual_losses(problem, trace.final)
    cell.steps = trace.n_updates
    cell.switch_step = trace.switch_step
    cell.wall_time = trace.wall_time
    cell.curve = trace.losses()
    return cell


def _threads():
    raw = os.environ.get("WLRA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise InputError(f"WLRA_THREADS must be an integer >= 1, got {raw!r}") from None
    if n < 1:
        raise InputError(f"WLRA_THREADS must be an integer >= 1, got {raw!r}")
    return n


def run_bench(size=64, rank=8, seeds=range(42, 52), budget_steps=50_000, eta=DEFAULT_ETA, threads=None):
    seeds = list(seeds)
    if not seeds:
        raise InputError("need at least one seed")
    if budget_steps < 1:
        raise InputError("budget_steps must be >= 1")
    threads = threads or _threads()
    problems = {s: bench_problem(s, size, rank) for s in seeds}
    jobs = [(s, m) for s in seeds for m in BENCH_METHODS]

    def work(job):
        s, m = job
        log.info("bench cell seed=%d method=%s", s, m)
        return _run_cell(problems[s], s, m, budget_steps, eta)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            cells = list(pool.map(work, jobs))
    else:
        cells = [work(j) for j in jobs]

    report = BenchReport(size, rank, seeds, budget_steps, eta, cells)
    for s in seeds:
        adam = report.cell(s, "adam")
        if adam.status != "ok":
            continue
        target = adam.weighted_error * (1.0 + QUALITY_TOL)
        for c in (report.cell(s, m) for m in BENCH_METHODS):
            if c.status != "ok":
                continue
            if c.curve is None:
                c.steps_to_adam_quality = 0 if c.weighted_error <= target else None
            else:
                hit = np.flatnonzero(c.curve <= target)
                c.steps_to_adam_quality = int(hit[0]) if hit.size else None
    return report
