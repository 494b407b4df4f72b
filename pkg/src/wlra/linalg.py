"""Dense matrices, a one-sided Jacobi SVD, and matrix file I/O.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 and ndim 2;
:func:`as_matrix` is the single validation gate used by the rest of the
package.
"""

import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InputError, RankError, ShapeError

MAGIC = b"WLRA"
VERSION = 1
DTYPE_F64 = 1
HEADER = struct.Struct("<4sBBBBQQ")
HEADER_SIZE = HEADER.size  # 24

_EPS = np.finfo(np.float64).eps
_MAX_SWEEPS = 100


def as_matrix(x, name="matrix"):
    """Return ``x`` as a C-contiguous float64 2-D array, rejecting NaN/Inf."""
    m = np.ascontiguousarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got ndim={m.ndim}", shape=list(m.shape))
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"{name} must have at least one row and column", shape=list(m.shape))
    if not np.all(np.isfinite(m)):
        raise InputError(f"{name} contains non-finite entries")
    return m


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray  # N x l
    s: np.ndarray  # l
    v: np.ndarray  # M x l

    @property
    def size(self):
        return self.s.shape[0]


@dataclass(frozen=True)
class FactorPair:
    a: np.ndarray  # N x r
    b: np.ndarray  # r x M

    def __post_init__(self):
        if self.a.ndim != 2 or self.b.ndim != 2 or self.a.shape[1] != self.b.shape[0]:
            raise ShapeError(
                "factor shapes do not chain",
                a=list(self.a.shape),
                b=list(self.b.shape),
            )
        r = self.a.shape[1]
        if not 1 <= r <= min(self.a.shape[0], self.b.shape[1]):
            raise RankError(f"rank {r} out of range", rank=r)

    @property
    def rank(self):
        return self.a.shape[1]

    @property
    def shape(self):
        return (self.a.shape[0], self.b.shape[1])

    def product(self):
        return self.a @ self.b

    def copy(self):
        return FactorPair(self.a.copy(), self.b.copy())


def frobenius_sq(w):
    w = np.asarray(w, dtype=np.float64)
    return float(np.sum(w * w))


def _round_robin(n):
    """Pairings for a cyclic tournament over ``n`` (even) columns.

    Each round is a set of disjoint pairs; together the ``n - 1`` rounds cover
    every unordered pair exactly once.
    """
    idx = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        p = np.array(idx[:half])
        q = np.array(idx[half:][::-1])
        rounds.append((np.minimum(p, q), np.maximum(p, q)))
        idx = [idx[0]] + [idx[-1]] + idx[1:-1]
    return rounds


def _jacobi(x):
    """One-sided Jacobi on a tall ``x`` (rows >= cols). Returns (x_rot, v)."""
    rows, cols = x.shape
    v = np.eye(cols)
    if cols == 1:
        return x, v
    padded = cols + (cols % 2)
    if padded != cols:
        x = np.hstack([x, np.zeros((rows, 1))])
        v = np.pad(v, ((0, 1), (0, 1)))
    xt = np.ascontiguousarray(x.T)  # rotate rows of xt == columns of x
    vt = np.ascontiguousarray(v.T)
    tol = max(rows, 1) * _EPS
    rounds = _round_robin(padded)
    for _ in range(_MAX_SWEEPS):
        rotated = False
        for p, q in rounds:
            xp, xq = xt[p], xt[q]
            alpha = np.einsum("ij,ij->i", xp, xp)
            beta = np.einsum("ij,ij->i", xq, xq)
            gamma = np.einsum("ij,ij->i", xp, xq)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c, s = c[:, None], s[:, None]
            xp, xq = xt[p], xt[q]
            xt[p], xt[q] = c * xp - s * xq, s * xp + c * xq
            vp, vq = vt[p], vt[q]
            vt[p], vt[q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            break
    x, v = xt.T[:, :cols], vt.T[:cols, :cols]
    return x, v


def _complete_columns(u, missing):
    """Replace columns flagged in ``missing`` with an orthonormal completion."""
    rows = u.shape[0]
    keep = [k for k in range(u.shape[1]) if not missing[k]]
    basis = [u[:, k] for k in keep]
    fill = []
    for e in range(rows):
        if len(fill) == int(missing.sum()):
            break
        cand = np.zeros(rows)
        cand[e] = 1.0
        for _ in range(2):
            for b in basis + fill:
                cand -= (b @ cand) * b
        norm = np.linalg.norm(cand)
        if norm > 0.5:
            fill.append(cand / norm)
    for k, col in zip(np.flatnonzero(missing), fill):
        u[:, k] = col
    return u


def _first_nonzero_sign(u):
    """+1/-1 per column so the first significant entry becomes nonnegative."""
    signs = np.ones(u.shape[1])
    for k in range(u.shape[1]):
        col = u[:, k]
        big = np.abs(col) > 1e-12 * np.max(np.abs(col))
        if big.any() and col[np.argmax(big)] < 0:
            signs[k] = -1.0
    return signs


def svd_full(w):
    """Thin SVD ``w = u @ diag(s) @ v.T`` with ``l = min(N, M)`` triples.

    Singular values come out non-increasing (stable order for ties) and each
    column of ``u`` has its first significant entry nonnegative.
    """
    w = as_matrix(w, "w")
    n, m = w.shape
    transposed = n < m
    x = w.T.copy() if transposed else w.copy()
    x, v = _jacobi(x)
    s = np.sqrt(np.einsum("ij,ij->j", x, x))
    order = np.argsort(-s, kind="stable")
    s, x, v = s[order], x[:, order], v[:, order]

    smax = s[0] if s.size else 0.0
    zero = s <= max(x.shape) * _EPS * smax if smax > 0 else np.ones_like(s, dtype=bool)
    u = np.zeros_like(x)
    nz = ~zero
    u[:, nz] = x[:, nz] / s[nz]
    if zero.any():
        u = _complete_columns(u, zero)

    if transposed:
        u, v = v, u
    signs = _first_nonzero_sign(u)
    return SvdResult(u=u * signs, s=s, v=v * signs)


def svd_truncate(full, r):
    """Keep the first ``r`` triples: ``a = U_r diag(s_r)``, ``b = V_r^T``."""
    l = full.size
    if not isinstance(r, (int, np.integer)) or not 1 <= r <= l:
        raise RankError(f"rank must be in [1, {l}], got {r}", rank=r, max_rank=l)
    a = full.u[:, :r] * full.s[:r]
    b = np.ascontiguousarray(full.v[:, :r].T)
    return FactorPair(np.ascontiguousarray(a), b)


def truncated_svd(w, r):
    return svd_truncate(svd_full(w), r)


def svd_tail(full, r):
    """Sum of squared discarded singular values beyond rank ``r``."""
    return float(np.sum(full.s[r:] ** 2))


# ---------------------------------------------------------------------------
# file formats


def _detect_format(path, fmt):
    if fmt is not None:
        if fmt not in ("binary", "csv"):
            raise InputError(f"unknown matrix format {fmt!r}")
        return fmt
    return "csv" if str(path).lower().endswith(".csv") else "binary"


def write_matrix(m, path, fmt=None):
    m = as_matrix(m)
    fmt = _detect_format(path, fmt)
    if fmt == "binary":
        rows, cols = m.shape
        with open(path, "wb") as fh:
            fh.write(HEADER.pack(MAGIC, VERSION, DTYPE_F64, 2, 0, rows, cols))
            fh.write(m.astype("<f8").tobytes(order="C"))
    else:
        with open(path, "w", newline="") as fh:
            for row in m:
                fh.write(",".join(repr(float(v)) for v in row))
                fh.write("\n")


def read_header(path):
    """Parse and validate the 24-byte binary header; return (rows, cols)."""
    with open(path, "rb") as fh:
        head = fh.read(HEADER_SIZE)
    size = os.path.getsize(path)
    return _parse_header(head, size)


def _parse_header(head, size):
    if len(head) < HEADER_SIZE:
        raise FormatError(f"truncated header: {len(head)} of {HEADER_SIZE} bytes", byte=len(head))
    magic, version, dtype, ndim, _reserved, rows, cols = HEADER.unpack(head)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", byte=0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", byte=4)
    if dtype != DTYPE_F64:
        raise FormatError(f"unsupported dtype code {dtype}", byte=5)
    if ndim != 2:
        raise FormatError(f"unsupported ndim {ndim}", byte=6)
    if rows < 1 or cols < 1:
        raise FormatError(f"empty dimensions {rows}x{cols}", byte=8)
    payload = rows * cols * 8
    if payload > 2**62:
        raise FormatError(f"dimension overflow {rows}x{cols}", byte=8)
    if size < HEADER_SIZE + payload:
        raise FormatError(
            f"truncated payload: expected {payload} bytes, found {size - HEADER_SIZE}",
            byte=size,
        )
    if size > HEADER_SIZE + payload:
        raise FormatError("trailing bytes after payload", byte=HEADER_SIZE + payload)
    return rows, cols


def read_matrix(path, fmt=None):
    fmt = _detect_format(path, fmt)
    if fmt == "binary":
        with open(path, "rb") as fh:
            blob = fh.read()
        rows, cols = _parse_header(blob[:HEADER_SIZE], len(blob))
        data = np.frombuffer(blob, dtype="<f8", offset=HEADER_SIZE).astype(np.float64)
        bad = np.flatnonzero(~np.isfinite(data))
        if bad.size:
            raise FormatError("non-finite value", byte=HEADER_SIZE + 8 * int(bad[0]))
        return data.reshape(rows, cols)
    return _read_csv(path)


def _read_csv(path):
    rows = []
    width = None
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            vals = []
            for col, cell in enumerate(cells, start=1):
                try:
                    v = float(cell)
                except ValueError:
                    raise FormatError(f"non-numeric cell {cell!r}", line=lineno, column=col) from None
                if not math.isfinite(v):
                    raise FormatError(f"non-finite cell {cell!r}", line=lineno, column=col)
                vals.append(v)
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise FormatError(
                    f"ragged row: {len(vals)} cells, expected {width}", line=lineno
                )
            rows.append(vals)
    if not rows:
        raise FormatError("empty CSV matrix", line=0)
    return np.array(rows, dtype=np.float64)
