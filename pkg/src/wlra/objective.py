"""The importance-weighted low-rank objective and its gradient."""

from dataclasses import dataclass

import numpy as np

from .errors import InputError, RankError, ShapeError
from .importance import as_importance
from .linalg import FactorPair, as_matrix


@dataclass(frozen=True)
class WeightedProblem:
    w: np.ndarray
    imp: np.ndarray
    rank: int
    lam: float = 0.0

    def __post_init__(self):
        w = as_matrix(self.w, "w")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "imp", as_importance(self.imp, like=w))
        if not 1 <= self.rank <= min(w.shape):
            raise RankError(f"rank must be in [1, {min(w.shape)}], got {self.rank}", rank=self.rank)
        if not self.lam >= 0:
            raise InputError(f"lambda must be >= 0, got {self.lam}")

    @property
    def shape(self):
        return self.w.shape


def _check(p, f):
    if f.shape != p.shape:
        raise ShapeError(
            f"factor product shape {f.shape} does not match problem {p.shape}",
            expected=list(p.shape),
            got=list(f.shape),
        )


def residual_losses(p, f):
    """Return (weighted residual, unweighted residual) without the L2 term."""
    _check(p, f)
    r = p.w - f.a @ f.b
    r2 = r * r
    return float(np.sum(p.imp * r2)), float(np.sum(r2))


def regularizer(p, f):
    if p.lam == 0:
        return 0.0
    return p.lam * (float(np.sum(f.a * f.a)) + float(np.sum(f.b * f.b)))


def weighted_loss(p, f):
    """sum_ij I_ij (w_ij - a_i.b_j)^2 + lam (sum ||a_i||^2 + sum ||b_j||^2)."""
    return residual_losses(p, f)[0] + regularizer(p, f)


def unweighted_error(w, f):
    r = w - f.a @ f.b
    return float(np.sum(r * r))


def weighted_grad(p, f):
    """Gradients of :func:`weighted_loss` with respect to A and B."""
    _check(p, f)
    e = p.imp * (p.w - f.a @ f.b)
    grad_a = -2.0 * (e @ f.b.T)
    grad_b = -2.0 * (f.a.T @ e)
    if p.lam:
        grad_a += 2.0 * p.lam * f.a
        grad_b += 2.0 * p.lam * f.b
    return grad_a, grad_b


def as_factors(a, b):
    return FactorPair(np.array(a, dtype=np.float64), np.array(b, dtype=np.float64))
