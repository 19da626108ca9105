"""Small dense kernels: Householder QR, one-sided Jacobi SVD, power iteration.

Everything here works on float64 numpy arrays and keeps no state, so the
functions can be called from any number of workers at once.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

# pivots below this fraction of ||A||_F are treated as exact zeros
RANK_TOL = 1e-12
_JACOBI_TOL = 1e-15
_JACOBI_MAX_SWEEPS = 80


def _as_matrix(A, name="A") -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise ValueError(f"{name} must be a 2-d array, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} contains non-finite entries")
    return A


def _householder(A: np.ndarray):
    """Factor A in place; returns (R-carrying work array, list of reflectors)."""
    m, k = A.shape
    R = A.copy()
    tol = RANK_TOL * np.linalg.norm(A)
    reflectors = []
    for j in range(k):
        x = R[j:, j]
        nrm = np.linalg.norm(x)
        if nrm <= tol:
            # deficient column: no reflection, so Q picks up a canonical
            # direction pushed through the earlier reflectors
            R[j + 1:, j] = 0.0
            reflectors.append(None)
            continue
        v = x.copy()
        v[0] += np.copysign(nrm, x[0])
        v /= np.linalg.norm(v)
        R[j:, j:] -= 2.0 * np.outer(v, v @ R[j:, j:])
        R[j + 1:, j] = 0.0
        reflectors.append(v)
    return R, reflectors


def _apply_reflectors(reflectors, Q: np.ndarray) -> np.ndarray:
    for j in range(len(reflectors) - 1, -1, -1):
        v = reflectors[j]
        if v is None:
            continue
        Q[j:, :] -= 2.0 * np.outer(v, v @ Q[j:, :])
    return Q


def qr_thin(A) -> tuple[np.ndarray, np.ndarray]:
    """Thin QR factorization ``A = Q R`` with ``diag(R) >= 0``.

    Rank-deficient columns still get an orthonormal Q column: the
    reflector for that step is skipped, so the column is the canonical
    basis vector mapped through the remaining reflectors.
    """
    A = _as_matrix(A)
    m, k = A.shape
    if m < k:
        raise ValueError(f"qr_thin needs rows >= cols, got {A.shape}")
    R, reflectors = _householder(A)
    R = np.triu(R[:k, :])
    Q = _apply_reflectors(reflectors, np.eye(m, k))
    signs = np.where(np.diag(R) < 0.0, -1.0, 1.0)
    return Q * signs, R * signs[:, None]


def complete_basis(Q: np.ndarray) -> np.ndarray:
    """Extend an orthonormal m x p block to an m x m orthogonal matrix.

    The first p columns of the result equal ``Q`` up to column signs.
    """
    Q = _as_matrix(Q, "Q")
    m, p = Q.shape
    _, reflectors = _householder(Q)
    return _apply_reflectors(reflectors, np.eye(m))


def _round_robin(k: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Disjoint column pairings covering every (i, j) once per sweep."""
    players = list(range(k)) + ([-1] if k % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[a], players[m - 1 - a]) for a in range(m // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a >= 0 and b >= 0]
        if pairs:
            ii, jj = zip(*pairs)
            rounds.append((np.array(ii), np.array(jj)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def svd_square(A) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """SVD of a square matrix by one-sided (Hestenes) Jacobi rotations.

    Returns ``P, sigma, Q`` with ``A = P @ diag(sigma) @ Q.T`` and sigma
    sorted in descending order. Columns of P belonging to (numerically)
    zero singular values are filled by an orthonormal completion.
    """
    A = _as_matrix(A)
    k, k2 = A.shape
    if k != k2:
        raise ValueError(f"svd_square needs a square matrix, got {A.shape}")
    if k == 0:
        raise ValueError("svd_square needs k >= 1")
    W = A.copy()
    Q = np.eye(k)
    schedule = _round_robin(k)
    for _ in range(_JACOBI_MAX_SWEEPS):
        rotated = False
        for i, j in schedule:
            wi = W[:, i]
            wj = W[:, j]
            alpha = np.einsum("ij,ij->j", wi, wi)
            beta = np.einsum("ij,ij->j", wj, wj)
            gamma = np.einsum("ij,ij->j", wi, wj)
            active = np.abs(gamma) > _JACOBI_TOL * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            g = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            t = np.where(active, np.copysign(1.0, zeta) / (np.abs(zeta) + np.hypot(1.0, zeta)), 0.0)
            c = 1.0 / np.hypot(1.0, t)
            s = c * t
            W[:, i], W[:, j] = c * wi - s * wj, s * wi + c * wj
            qi = Q[:, i]
            qj = Q[:, j]
            Q[:, i], Q[:, j] = c * qi - s * qj, s * qi + c * qj
        if not rotated:
            break

    sigma = np.linalg.norm(W, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    W = W[:, order]
    Q = Q[:, order]

    tiny = k * np.finfo(float).eps * (sigma[0] if sigma[0] > 0 else 1.0)
    good = sigma > tiny
    P = np.zeros((k, k))
    P[:, good] = W[:, good] / sigma[good]
    sigma = np.where(good, sigma, 0.0)
    n_good = int(good.sum())
    if n_good < k:
        # zero singular values sit at the tail after sorting
        full = complete_basis(P[:, :n_good]) if n_good else np.eye(k)
        P[:, n_good:] = full[:, n_good:]
    return P, sigma, Q


def spectral_norm(
    apply: Callable[[np.ndarray], np.ndarray],
    probe_shape: Sequence[int],
    iters: int = 100,
    seed=0,
    adjoint: Callable[[np.ndarray], np.ndarray] | None = None,
) -> float:
    """Estimate the largest singular value of a linear map on matrices.

    Power iteration on ``adjoint(apply(X))``; if no adjoint is supplied the
    map is assumed self-adjoint. The Rayleigh quotient of a PSD operator
    is non-decreasing along power iterates, so more iterations never give
    a smaller estimate (up to round-off).
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    adjoint = adjoint or apply
    rng = np.random.default_rng(seed)
    X = rng.standard_normal(tuple(probe_shape))
    X /= np.linalg.norm(X)
    estimate = 0.0
    for _ in range(iters):
        Y = adjoint(apply(X))
        rq = float(np.sum(X * Y))
        estimate = max(estimate, np.sqrt(max(rq, 0.0)))
        nrm = np.linalg.norm(Y)
        if nrm == 0.0:
            break
        X = Y / nrm
    return estimate
