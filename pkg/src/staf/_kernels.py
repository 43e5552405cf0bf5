"""Compiled inner loops.

The single-row updates in both stages are inherently sequential, so they are
written as explicit loops and jitted. Every kernel is generic over float64 and
complex128 arrays; callers pass the conjugated rows separately so the same code
serves both fields.
"""
import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def staf_sweep(A, A_conj, psi, sq_norms, z, idx, mu, kaczmarz, gamma):
    """Apply the truncated single-equation update for each index in ``idx``.

    Updates ``z`` in place. Returns the number of accepted (non-truncated)
    updates, or -1 if the iterate became non-finite.
    """
    n = A.shape[1]
    scale = 1.0 / (1.0 + gamma)
    accepted = 0
    for t in range(idx.shape[0]):
        i = idx[t]
        c = A_conj[i, 0] * z[0]
        for l in range(1, n):
            c += A_conj[i, l] * z[l]
        ac = abs(c)
        if ac >= psi[i] * scale:
            if ac > 0.0:
                ph = c / ac
            else:
                ph = c * 0.0 + 1.0
            r = c - psi[i] * ph
            if kaczmarz:
                step = 1.0 / sq_norms[i]
            else:
                step = mu
            sr = step * r
            for l in range(n):
                z[l] -= sr * A[i, l]
            accepted += 1
    for l in range(n):
        if not np.isfinite(abs(z[l])):
            return -1
    return accepted


@njit(cache=True, nogil=True)
def vr_opi_epoch(R, R_conj, u, anchor, w, eta, idx):
    """Run one inner loop of variance-reduced eigenvector iterations in place.

    ``R`` holds unit-norm rows, ``w`` is the full product at ``anchor``.
    Returns the number of steps whose update vector vanished (and were skipped).
    """
    n = R.shape[1]
    skipped = 0
    nu = np.empty_like(u)
    for t in range(idx.shape[0]):
        i = idx[t]
        c = R_conj[i, 0] * (u[0] - anchor[0])
        for l in range(1, n):
            c += R_conj[i, l] * (u[l] - anchor[l])
        s = 0.0
        for l in range(n):
            nu[l] = u[l] + eta * (R[i, l] * c + w[l])
            s += abs(nu[l]) ** 2
        if s == 0.0 or not np.isfinite(s):
            skipped += 1
            continue
        s = np.sqrt(s)
        for l in range(n):
            u[l] = nu[l] / s
    return skipped
