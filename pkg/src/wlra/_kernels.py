import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def sgd_coordinate_pass(w, imp, a, b, rows, cols, eta, lam):
    """Apply sampled coordinate updates in order, mutating ``a`` and ``b``.

    The residual is taken before the pair update; ``b_j`` then sees the
    freshly updated ``a_i``.
    """
    r = a.shape[1]
    step = 2.0 * eta
    for k in range(rows.shape[0]):
        i = rows[k]
        j = cols[k]
        pred = 0.0
        for q in range(r):
            pred += a[i, q] * b[q, j]
        e = imp[i, j] * (w[i, j] - pred)
        for q in range(r):
            a[i, q] = a[i, q] + step * (e * b[q, j] - lam * a[i, q])
            b[q, j] = b[q, j] + step * (e * a[i, q] - lam * b[q, j])


def warmup():
    w = np.zeros((1, 1))
    a = np.zeros((1, 1))
    b = np.zeros((1, 1))
    idx = np.zeros(1, dtype=np.int64)
    sgd_coordinate_pass(w, w, a, b, idx, idx, 0.0, 0.0)
