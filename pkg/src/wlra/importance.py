"""Per-element importance weights and the importance-variance diagnostic."""

from dataclasses import dataclass

import numpy as np

from .errors import InputError, ShapeError
from .linalg import as_matrix

DEFAULT_P = 2.0
DEFAULT_EPSILON = 1e-12


@dataclass(frozen=True)
class RowImportance:
    values: np.ndarray  # row sums, length N
    sqrt_diag: np.ndarray  # sqrt of values


@dataclass(frozen=True)
class PhiReport:
    phi: float
    p: float
    epsilon: float


def as_importance(imp, like=None, name="importance"):
    """Validate an importance matrix: finite, nonnegative, optionally shaped like ``like``."""
    imp = as_matrix(imp, name)
    if np.any(imp < 0):
        raise InputError(f"{name} has negative entries")
    if like is not None and imp.shape != np.shape(like):
        raise ShapeError(
            f"{name} shape {imp.shape} does not match {np.shape(like)}",
            expected=list(np.shape(like)),
            got=list(imp.shape),
        )
    return imp


def fisher_from_gradients(per_example_grads):
    """Empirical Fisher information: elementwise mean of squared gradients."""
    grads = list(per_example_grads)
    if not grads:
        raise InputError("need at least one gradient")
    shape = np.shape(grads[0])
    acc = np.zeros(shape, dtype=np.float64)
    for k, g in enumerate(grads):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != shape:
            raise ShapeError(f"gradient {k} has shape {g.shape}, expected {shape}", index=k)
        acc += g * g
    return as_importance(acc / len(grads))


def taylor_importance(w, mean_abs_grad):
    """First-order Taylor importance ``|g * w|`` from a caller-averaged ``|g|``."""
    w = as_matrix(w, "w")
    g = as_matrix(mean_abs_grad, "mean_abs_grad")
    if g.shape != w.shape:
        raise ShapeError("gradient and weight shapes differ", w=list(w.shape), grad=list(g.shape))
    return np.abs(g * w)


def row_reduce(imp):
    imp = as_importance(imp)
    values = imp.sum(axis=1)
    return RowImportance(values=values, sqrt_diag=np.sqrt(values))


def phi_metric(imp, p=DEFAULT_P, epsilon=DEFAULT_EPSILON):
    """Population variance of the importance entries after L_p normalization.

    The norm is the entrywise p-norm over the whole matrix, floored at
    ``epsilon``.
    """
    if p < 1:
        raise InputError(f"norm order must be >= 1, got {p}")
    if epsilon <= 0:
        raise InputError(f"epsilon must be positive, got {epsilon}")
    imp = as_importance(imp)
    flat = imp.ravel()
    if np.isinf(p):
        norm = float(np.max(flat))
    else:
        # rescale before powering to avoid overflow for large p
        top = float(np.max(flat))
        norm = 0.0 if top == 0 else top * float(np.sum((flat / top) ** p)) ** (1.0 / p)
    normalized = flat / max(norm, epsilon)
    # shifted by the first entry so constant input gives exactly zero
    dev = normalized - normalized[0]
    phi = float(np.mean(dev * dev) - np.mean(dev) ** 2)
    return PhiReport(phi=max(phi, 0.0), p=float(p), epsilon=float(epsilon))


def uniform_importance(rows, cols):
    if rows < 1 or cols < 1:
        raise InputError(f"dimensions must be >= 1, got {rows}x{cols}")
    return np.ones((rows, cols))
