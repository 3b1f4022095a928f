"""Small dense linear-algebra utilities shared by the whole package.

Everything here operates on plain float64 numpy arrays of modest size
(system matrices are at most a few tens of rows), so directness beats
generality: the Lyapunov equation is solved by Kronecker vectorization,
the matrix exponential by scaling-and-squaring with a [6/6] Pade
approximant, and rank decisions by SVD with a relative tolerance.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch, NonFinite, NonHurwitz

RANK_TOL = 1e-10  # default relative rank tolerance (x sigma_max)

# [6/6] Pade coefficients of exp(x) and the Higham scaling threshold theta_6
_PADE6 = np.array([1.0, 1 / 2, 5 / 44, 1 / 66, 1 / 792, 1 / 15840, 1 / 665280])
_THETA6 = 0.9504178996162932


def _as_matrix(M) -> np.ndarray:
    A = np.asarray(M, dtype=float)
    if A.ndim == 1:
        A = A.reshape(-1, 1)
    if A.ndim != 2:
        raise DimensionMismatch(f"expected a matrix, got ndim={A.ndim}")
    return A


def expm(A) -> np.ndarray:
    """Matrix exponential via scaling-and-squaring with a Pade order-6 core."""
    A = _as_matrix(A)
    n, m = A.shape
    if n != m:
        raise DimensionMismatch(f"expm needs a square matrix, got {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NonFinite("expm: non-finite entries in input")
    norm = np.linalg.norm(A, np.inf)
    s = 0
    if norm > _THETA6:
        s = int(np.ceil(np.log2(norm / _THETA6)))
    As = A / (2.0 ** s)
    # U odd part, V even part of the Pade numerator; denominator is V - U
    A2 = As @ As
    U = As @ (_PADE6[1] * np.eye(n) + _PADE6[3] * A2 + _PADE6[5] * A2 @ A2)
    V = _PADE6[0] * np.eye(n) + _PADE6[2] * A2 + _PADE6[4] * A2 @ A2 + _PADE6[6] * A2 @ A2 @ A2
    F = np.linalg.solve(V - U, V + U)
    for _ in range(s):
        F = F @ F
    if not np.all(np.isfinite(F)):
        raise NonFinite("expm: overflow during squaring")
    return F


def lyapunov_solve(A, W) -> np.ndarray:
    """Solve A Q + Q A^T + W = 0 for symmetric Q (A Hurwitz, W symmetric).

    Vectorized Kronecker solve; fine for the <=6x6 matrices used here.
    """
    A = _as_matrix(A)
    W = _as_matrix(W)
    n = A.shape[0]
    if A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"A must be square, got {A.shape}")
    if W.shape != (n, n):
        raise DimensionMismatch(f"W shape {W.shape} does not match A {A.shape}")
    if np.linalg.norm(W - W.T) > 1e-10 * max(1.0, np.linalg.norm(W)):
        raise DimensionMismatch("W must be symmetric")
    eig = np.linalg.eigvals(A)
    if np.any(eig.real >= -1e-9):
        raise NonHurwitz(f"A is not Hurwitz: max Re(eig) = {eig.real.max():.3e}")
    K = np.kron(np.eye(n), A) + np.kron(A, np.eye(n))
    q = np.linalg.solve(K, -W.reshape(-1))
    Q = q.reshape(n, n)
    return 0.5 * (Q + Q.T)


def null_space_rows(M, tol: float = RANK_TOL) -> np.ndarray:
    """Orthonormal rows spanning the left null space of M.

    Returns an (r x rows(M)) array with r = rows(M) - rank(M); empty when M
    has full row rank. Each returned row v satisfies ||v M|| <= tol ||M||.
    """
    M = _as_matrix(M)
    U, s, _ = np.linalg.svd(M)
    smax = s[0] if s.size else 0.0
    rank = int(np.sum(s > tol * smax))
    return U[:, rank:].T.copy()


def matrix_rank(M, tol: float = RANK_TOL) -> int:
    M = _as_matrix(M)
    s = np.linalg.svd(M, compute_uv=False)
    if s.size == 0:
        return 0
    return int(np.sum(s > tol * s[0]))


def pinv(M, tol: float = RANK_TOL) -> np.ndarray:
    """Moore-Penrose pseudo-inverse, truncating singular values < tol*sigma_max."""
    M = _as_matrix(M)
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    smax = s[0] if s.size else 0.0
    keep = s > tol * smax
    inv = np.zeros_like(s)
    inv[keep] = 1.0 / s[keep]
    return (Vt.T * inv) @ U.T


def zoh_discretize(A, B, ts: float) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold discretization of (A, B) at sampling period ts.

    Ad = exp(A ts), Bd = int_0^ts exp(A tau) dtau B, computed jointly via the
    exponential of the augmented matrix [[A, B], [0, 0]].
    """
    A = _as_matrix(A)
    B = _as_matrix(B)
    n = A.shape[0]
    if A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"A must be square, got {A.shape}")
    if B.shape[0] != n:
        raise DimensionMismatch(f"B rows {B.shape[0]} != A dim {n}")
    if ts <= 0:
        raise DimensionMismatch("ts must be positive")
    m = B.shape[1]
    aug = np.zeros((n + m, n + m))
    aug[:n, :n] = A * ts
    aug[:n, n:] = B * ts
    E = expm(aug)
    return E[:n, :n], E[:n, n:]
