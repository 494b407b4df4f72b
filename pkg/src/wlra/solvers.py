"""Factorization strategies for the weighted low-rank objective.

All numerical solvers share one loop shape: record the state, apply an update,
record again, and stop on ``max_steps`` or when the loss stops moving over a
window of steps. Step ``k`` in a trace is the state after ``k`` updates.
"""

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from ._kernels import sgd_coordinate_pass
from .errors import DivergenceError, InputError
from .linalg import FactorPair, frobenius_sq, svd_full, svd_tail, svd_truncate
from .objective import WeightedProblem

METHODS = ("svd", "fwsvd", "als", "sgd", "adam", "adam_sgd")
INITS = ("svd_warm", "fwsvd_warm", "random")
ROW_CLAMP = 1e-12
DIVERGENCE_LIMIT = 1e12


@dataclass(frozen=True)
class SolverConfig:
    method: str = "adam_sgd"
    eta: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    max_steps: int = 50_000
    tol_rel: float = 1e-9
    window: int = 100
    seed: int = 42
    # 0 = full-batch gradient step; n > 0 = n sampled coordinates per step
    sgd_batch: int = 0
    soft_threshold_factor: float = 10.0
    init: str = "svd_warm"
    # row weights behind the Adam->SGD switching value: "mean" puts it on the
    # per-element scale of the loss, "sum" uses raw row sums
    threshold_rows: str = "mean"
    threads: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise InputError(f"unknown method {self.method!r}", choices=list(METHODS))
        if self.init not in INITS:
            raise InputError(f"unknown init {self.init!r}", choices=list(INITS))
        if self.threshold_rows not in ("mean", "sum"):
            raise InputError(f"threshold_rows must be 'mean' or 'sum', got {self.threshold_rows!r}")
        checks = [
            (0 <= self.beta1 < 1, "beta1 must be in [0, 1)"),
            (0 <= self.beta2 < 1, "beta2 must be in [0, 1)"),
            (self.eta >= 0, "eta must be >= 0"),
            (self.adam_epsilon > 0, "adam_epsilon must be > 0"),
            (self.max_steps >= 1, "max_steps must be >= 1"),
            (self.window >= 1, "window must be >= 1"),
            (self.tol_rel >= 0, "tol_rel must be >= 0"),
            (self.sgd_batch >= 0, "sgd_batch must be >= 0"),
            (self.soft_threshold_factor >= 1, "soft_threshold_factor must be >= 1"),
            (self.threads >= 1, "threads must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise InputError(msg)


class TraceStep(NamedTuple):
    step: int
    loss: float
    unweighted: float
    phase: str


@dataclass
class SolverTrace:
    method: str
    steps: list
    final: FactorPair
    switch_step: Optional[int] = None
    hard_threshold: Optional[float] = None
    soft_threshold: Optional[float] = None
    stop_reason: str = "max_steps"
    degenerate_steps: int = 0
    wall_time: float = 0.0
    extras: dict = field(default_factory=dict)

    @property
    def final_loss(self):
        return self.steps[-1].loss

    @property
    def final_unweighted(self):
        return self.steps[-1].unweighted

    @property
    def n_updates(self):
        return self.steps[-1].step

    def losses(self):
        return np.array([s.loss for s in self.steps])

    def first_step_below(self, target):
        """Index of the first recorded step with loss <= target, or None."""
        for s in self.steps:
            if s.loss <= target:
                return s.step
        return None

    def to_jsonl(self, fh):
        for s in self.steps:
            fh.write(
                json.dumps(
                    {"step": s.step, "loss": s.loss, "unweighted": s.unweighted, "phase": s.phase}
                )
            )
            fh.write("\n")


class _Recorder:
    def __init__(self, problem, cfg):
        self.p = problem
        self.cfg = cfg
        self.steps = []

    def record(self, k, a, b, phase):
        """Log the state, raising on divergence. Returns (residual matrix, weighted residual)."""
        p = self.p
        r = p.w - a @ b
        r2 = r * r
        resid = float(np.sum(p.imp * r2))
        unweighted = float(np.sum(r2))
        loss = resid
        if p.lam:
            loss += p.lam * (float(np.sum(a * a)) + float(np.sum(b * b)))
        if not np.isfinite(loss) or loss > DIVERGENCE_LIMIT:
            raise DivergenceError(f"loss diverged at step {k}", step=k, loss=float(loss))
        self.steps.append(TraceStep(k, loss, unweighted, phase))
        return r, resid

    def converged(self):
        w = self.cfg.window
        if len(self.steps) <= w:
            return False
        old, new = self.steps[-1 - w].loss, self.steps[-1].loss
        return abs(old - new) <= self.cfg.tol_rel * abs(old)


# ---------------------------------------------------------------------------
# closed forms


def solve_svd(problem):
    return svd_truncate(svd_full(problem.w), problem.rank)


def solve_fwsvd(problem):
    """Row-weighted closed form.

    Collapses importance to row sums ``s_i``, factorizes ``diag(sqrt(s)) W`` by
    SVD and un-scales. Returns the factors and the switching value
    ``||D W - D A B||_F^2`` for ``D = diag(sqrt(s))``.
    """
    rowsum = np.maximum(problem.imp.sum(axis=1), ROW_CLAMP)
    d = np.sqrt(rowsum)
    scaled = d[:, None] * problem.w
    full = svd_full(scaled)
    top = svd_truncate(full, problem.rank)
    jhat = frobenius_sq(scaled - top.a @ top.b)
    factors = FactorPair(np.ascontiguousarray(top.a / d[:, None]), top.b)
    return factors, jhat


# ---------------------------------------------------------------------------
# ALS


def _solve_rows(g, rhs, lam):
    """Solve ``(g_k + lam I) x_k = rhs_k`` for a batch, falling back to
    minimum-norm least squares on numerically singular systems."""
    r = g.shape[-1]
    if lam:
        g = g + lam * np.eye(r)
    eig = np.linalg.eigvalsh(g)
    top = eig[:, -1]
    singular = (top <= 0) | (eig[:, 0] <= 1e-12 * top)
    out = np.empty_like(rhs)
    ok = ~singular
    if ok.any():
        out[ok] = np.linalg.solve(g[ok], rhs[ok][..., None])[..., 0]
    for k in np.flatnonzero(singular):
        out[k] = np.linalg.lstsq(g[k], rhs[k], rcond=None)[0]
    return out, int(singular.sum())


def _als_rows(w, imp, other, lam, rows):
    # a_i = (sum_j I_ij b_j b_j^T + lam I)^-1 sum_j I_ij w_ij b_j, other = B (r x M)
    sub_imp = imp[rows]
    g = np.einsum("ij,qj,pj->iqp", sub_imp, other, other)
    rhs = (sub_imp * w[rows]) @ other.T
    return _solve_rows(g, rhs, lam)


def als_half_sweep(problem, f, side, threads=1):
    """Exact minimization over all rows of A (or all columns of B).

    Returns ``(new FactorPair, number of degenerate systems)``.
    """
    if side == "rows_of_A":
        w, imp, other = problem.w, problem.imp, f.b
    elif side == "cols_of_B":
        w, imp, other = problem.w.T, problem.imp.T, np.ascontiguousarray(f.a.T)
    else:
        raise InputError(f"side must be 'rows_of_A' or 'cols_of_B', got {side!r}")
    n = w.shape[0]
    if threads > 1 and n > 1:
        chunks = np.array_split(np.arange(n), min(threads, n))
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda rows: _als_rows(w, imp, other, problem.lam, rows), chunks))
        solved = np.vstack([p[0] for p in parts])
        degenerate = sum(p[1] for p in parts)
    else:
        solved, degenerate = _als_rows(w, imp, other, problem.lam, np.arange(n))
    if side == "rows_of_A":
        return FactorPair(solved, f.b.copy()), degenerate
    return FactorPair(f.a.copy(), np.ascontiguousarray(solved.T)), degenerate


def solve_als(problem, f0, cfg):
    t0 = time.perf_counter()
    rec = _Recorder(problem, cfg)
    f = f0.copy()
    rec.record(0, f.a, f.b, "als")
    degenerate = 0
    stop = "max_steps"
    for k in range(1, cfg.max_steps + 1):
        f, d1 = als_half_sweep(problem, f, "rows_of_A", cfg.threads)
        f, d2 = als_half_sweep(problem, f, "cols_of_B", cfg.threads)
        degenerate += d1 + d2
        rec.record(k, f.a, f.b, "als")
        if rec.converged():
            stop = "converged"
            break
    return SolverTrace(
        method="als",
        steps=rec.steps,
        final=f,
        stop_reason=stop,
        degenerate_steps=degenerate,
        wall_time=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# gradient methods


class _SgdPhase:
    def __init__(self, problem, cfg):
        self.p = problem
        self.eta = cfg.eta
        self.batch = cfg.sgd_batch
        self.rng = np.random.default_rng(cfg.seed)

    def step(self, a, b, resid):
        p = self.p
        if self.batch == 0:
            e = p.imp * resid
            ga = -2.0 * (e @ b.T)
            gb = -2.0 * (a.T @ e)
            if p.lam:
                ga += 2.0 * p.lam * a
                gb += 2.0 * p.lam * b
            a -= self.eta * ga
            b -= self.eta * gb
        else:
            n, m = p.shape
            rows = self.rng.integers(0, n, self.batch)
            cols = self.rng.integers(0, m, self.batch)
            sgd_coordinate_pass(p.w, p.imp, a, b, rows, cols, self.eta, p.lam)


class _AdamPhase:
    def __init__(self, problem, cfg, a, b):
        self.p = problem
        self.cfg = cfg
        self.t = 0
        self.m_a, self.v_a = np.zeros_like(a), np.zeros_like(a)
        self.m_b, self.v_b = np.zeros_like(b), np.zeros_like(b)

    def step(self, a, b, resid):
        p, c = self.p, self.cfg
        e = p.imp * resid
        ga = -2.0 * (e @ b.T)
        gb = -2.0 * (a.T @ e)
        if p.lam:
            ga += 2.0 * p.lam * a
            gb += 2.0 * p.lam * b
        self.t += 1
        b1, b2 = c.beta1, c.beta2
        scale = c.eta * np.sqrt(1.0 - b2**self.t) / (1.0 - b1**self.t)
        for h, g, m, v in ((a, ga, self.m_a, self.v_a), (b, gb, self.m_b, self.v_b)):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            h -= scale * m / np.sqrt(v + c.adam_epsilon)


def _run_single_phase(problem, f0, cfg, method, make_phase):
    t0 = time.perf_counter()
    rec = _Recorder(problem, cfg)
    a, b = f0.a.copy(), f0.b.copy()
    phase = make_phase(a, b)
    resid, _ = rec.record(0, a, b, method)
    stop = "max_steps"
    for k in range(1, cfg.max_steps + 1):
        phase.step(a, b, resid)
        resid, _ = rec.record(k, a, b, method)
        if rec.converged():
            stop = "converged"
            break
    return SolverTrace(
        method=method,
        steps=rec.steps,
        final=FactorPair(a, b),
        stop_reason=stop,
        wall_time=time.perf_counter() - t0,
    )


def solve_sgd(problem, f0, cfg):
    return _run_single_phase(problem, f0, cfg, "sgd", lambda a, b: _SgdPhase(problem, cfg))


def solve_adam(problem, f0, cfg):
    return _run_single_phase(problem, f0, cfg, "adam", lambda a, b: _AdamPhase(problem, cfg, a, b))


def switching_thresholds(problem, cfg):
    """(hard, soft) thresholds of the Adam -> SGD switch."""
    _, jhat = solve_fwsvd(problem)
    if cfg.threshold_rows == "mean":
        jhat /= problem.shape[1]
    soft = cfg.soft_threshold_factor * svd_tail(svd_full(problem.w), problem.rank)
    return jhat, soft


def solve_adam_sgd(problem, f0, cfg):
    """Adam until the loss drops below the closed-form value (and the plain
    reconstruction error is within ``soft_threshold_factor`` of truncated
    SVD's), then plain SGD with fresh state for the rest of the budget."""
    t0 = time.perf_counter()
    hard, soft = switching_thresholds(problem, cfg)
    rec = _Recorder(problem, cfg)
    a, b = f0.a.copy(), f0.b.copy()

    def ready(resid_loss):
        return resid_loss < hard and rec.steps[-1].unweighted <= soft

    resid, jres = rec.record(0, a, b, "adam")
    switch = None
    if ready(jres):
        switch = 0
        rec.steps[-1] = rec.steps[-1]._replace(phase="sgd")
        phase = _SgdPhase(problem, cfg)
    else:
        phase = _AdamPhase(problem, cfg, a, b)
    stop = "max_steps"
    for k in range(1, cfg.max_steps + 1):
        label = "adam" if switch is None else "sgd"
        phase.step(a, b, resid)
        resid, jres = rec.record(k, a, b, label)
        if switch is None and ready(jres):
            switch = k
            phase = _SgdPhase(problem, cfg)
        if rec.converged():
            stop = "converged"
            break
    return SolverTrace(
        method="adam_sgd",
        steps=rec.steps,
        final=FactorPair(a, b),
        switch_step=switch,
        hard_threshold=hard,
        soft_threshold=soft,
        stop_reason=stop,
        wall_time=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# dispatch


def initial_factors(problem, cfg):
    if cfg.init == "svd_warm":
        return solve_svd(problem)
    if cfg.init == "fwsvd_warm":
        return solve_fwsvd(problem)[0]
    rng = np.random.default_rng(cfg.seed)
    n, m = problem.shape
    r = problem.rank
    scale = 1.0 / np.sqrt(r)
    return FactorPair(rng.standard_normal((n, r)) * scale, rng.standard_normal((r, m)) * scale)


def _closed_form_trace(problem, cfg, method, f, hard=None):
    rec = _Recorder(problem, cfg)
    rec.record(0, f.a, f.b, method)
    return SolverTrace(
        method=method, steps=rec.steps, final=f, hard_threshold=hard, stop_reason="closed_form"
    )


def solve(problem, cfg=None):
    """Build the initial factors from ``cfg.init`` and run ``cfg.method``."""
    cfg = cfg or SolverConfig()
    t0 = time.perf_counter()
    if cfg.method == "svd":
        trace = _closed_form_trace(problem, cfg, "svd", solve_svd(problem))
    elif cfg.method == "fwsvd":
        f, jhat = solve_fwsvd(problem)
        trace = _closed_form_trace(problem, cfg, "fwsvd", f, jhat)
    else:
        f0 = initial_factors(problem, cfg)
        runner = {"als": solve_als, "sgd": solve_sgd, "adam": solve_adam, "adam_sgd": solve_adam_sgd}
        trace = runner[cfg.method](problem, f0, cfg)
    trace.wall_time = time.perf_counter() - t0
    return trace


def factorize(w, imp, rank, cfg=None, lam=0.0):
    """Convenience wrapper: build the problem and return the final factors."""
    return solve(WeightedProblem(w, imp, rank, lam), cfg).final
