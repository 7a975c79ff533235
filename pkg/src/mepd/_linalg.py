"""Batched posterior solve: diag((A)^-1) and A^-1 r for symmetric A.

Positive-definite systems go through a compiled Cholesky kernel; the rest
(negative prior precisions can make A indefinite) fall back to a pivoted
LU inverse per matrix.
"""

from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True)
def _cholesky_moments(A, r, diag, u, ok):
    B, N, _ = A.shape
    L = np.zeros((N, N))
    w = np.empty(N)
    z = np.empty(N)
    for b in range(B):
        Ab = A[b]
        good = True
        for i in range(N):
            for j in range(i + 1):
                s = Ab[i, j]
                for k in range(j):
                    s -= L[i, k] * L[j, k]
                if i == j:
                    if not s > 0.0:
                        good = False
                        break
                    L[i, i] = np.sqrt(s)
                else:
                    L[i, j] = s / L[j, j]
            if not good:
                break
        ok[b] = good
        if not good:
            continue
        # column j of L^-1 by forward substitution; its squared norm is C[j, j]
        for j in range(N):
            w[j] = 1.0 / L[j, j]
            acc = w[j] * w[j]
            for i in range(j + 1, N):
                s = 0.0
                for k in range(j, i):
                    s -= L[i, k] * w[k]
                w[i] = s / L[i, i]
                acc += w[i] * w[i]
            diag[b, j] = acc
        for i in range(N):
            s = r[b, i]
            for k in range(i):
                s -= L[i, k] * z[k]
            z[i] = s / L[i, i]
        for i in range(N - 1, -1, -1):
            s = z[i]
            for k in range(i + 1, N):
                s -= L[k, i] * u[b, k]
            u[b, i] = s / L[i, i]


def posterior_moments(A: np.ndarray, r: np.ndarray):
    """Return ``(diag(A^-1), A^-1 r, ok)`` for a batch ``A`` of shape (B, N, N).

    ``ok`` is False where the matrix could not be inverted or produced
    non-finite output; those rows hold NaN.
    """
    A = np.ascontiguousarray(A, dtype=float)
    r = np.ascontiguousarray(r, dtype=float)
    B, N, _ = A.shape
    diag = np.full((B, N), np.nan)
    u = np.full((B, N), np.nan)
    ok = np.zeros(B, dtype=np.bool_)
    _cholesky_moments(A, r, diag, u, ok)
    for b in np.flatnonzero(~ok):
        try:
            C = np.linalg.inv(A[b])
        except np.linalg.LinAlgError:
            diag[b] = np.nan
            u[b] = np.nan
            continue
        diag[b] = np.diagonal(C)
        u[b] = C @ r[b]
        ok[b] = True
    ok &= np.isfinite(diag).all(axis=1) & np.isfinite(u).all(axis=1)
    diag[~ok] = np.nan
    u[~ok] = np.nan
    return diag, u, ok
