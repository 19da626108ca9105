"""Low-rank factor state: initialization, basis augmentation, truncation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from fedlrt.linalg import complete_basis, qr_thin, svd_square

ORTHO_TOL = 1e-8
DEGENERATE_EPS = 1e-12


class ContractViolation(ValueError):
    """An input broke a documented precondition (e.g. non-orthonormal basis)."""


@dataclass(frozen=True)
class LowRankFactors:
    """``W = U @ S @ V.T`` with orthonormal U, V of shape (n, r)."""

    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    @property
    def rank(self) -> int:
        return self.S.shape[0]

    @property
    def n(self) -> int:
        return self.U.shape[0]


@dataclass(frozen=True)
class AugmentedState:
    """Bases shared by every client during one aggregation round.

    ``r`` is the rank before augmentation; ``U_aug[:, :r]`` is the old basis.
    """

    U_aug: np.ndarray
    V_aug: np.ndarray
    S_aug: np.ndarray
    r: int

    def with_coefficients(self, S_aug: np.ndarray) -> "AugmentedState":
        return AugmentedState(self.U_aug, self.V_aug, np.asarray(S_aug, dtype=float), self.r)


@dataclass(frozen=True)
class TruncationConfig:
    tau: float = 0.1
    r_min: int = 1
    r_max: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.tau < 1.0:
            raise ValueError(f"tau must lie in [0, 1), got {self.tau}")
        if self.r_min < 1:
            raise ValueError("r_min must be >= 1")
        if self.r_max is not None and self.r_max < self.r_min:
            raise ValueError("r_max must be >= r_min")


@dataclass(frozen=True)
class TruncationResult:
    factors: LowRankFactors
    theta: float
    sigma: np.ndarray
    degenerate: bool = False


def default_initial_rank(n: int) -> int:
    return math.ceil(n / 2)


def init_factors(n: int, r0: int, seed=0, scale: float = 1.0) -> LowRankFactors:
    """Random orthonormal U, V and ``S = scale * diag(1, 1/2, ..., 1/r0)``."""
    if not 1 <= r0 <= n:
        raise ValueError(f"need 1 <= r0 <= n, got r0={r0}, n={n}")
    if scale <= 0:
        raise ValueError("scale must be positive")
    rng = np.random.default_rng(seed)
    U, _ = qr_thin(rng.standard_normal((n, r0)))
    V, _ = qr_thin(rng.standard_normal((n, r0)))
    S = np.diag(scale / np.arange(1, r0 + 1, dtype=float))
    return LowRankFactors(U, S, V)


def check_orthonormal(B: np.ndarray, name: str = "basis", tol: float = ORTHO_TOL) -> None:
    k = B.shape[1]
    err = np.abs(B.T @ B - np.eye(k)).max() if k else 0.0
    if err > tol:
        raise ContractViolation(f"{name} is not orthonormal (max |B^T B - I| = {err:.3e})")


def basis_augment(U: np.ndarray, G: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormalize ``[U | G]`` and return ``(U_aug, U_bar)``.

    ``U_aug[:, :r]`` is ``U`` itself, bit for bit. ``U_bar`` has ``min(r, n - r)``
    columns. When G adds fewer than r new directions, the missing columns
    are an orthonormal completion taken from the Householder reflectors,
    so the block shapes stay fixed.
    """
    U = np.asarray(U, dtype=float)
    G = np.asarray(G, dtype=float)
    if U.shape != G.shape:
        raise ValueError(f"basis and gradient shapes differ: {U.shape} vs {G.shape}")
    check_orthonormal(U, "U")
    n, r = U.shape
    if 2 * r <= n:
        Q, _ = qr_thin(np.hstack([U, G]))
        U_bar = Q[:, r:]
    else:
        # only n - r directions remain, so the augmented basis is all of R^n
        U_bar = complete_basis(U)[:, r:]
    if U_bar.shape[1]:
        # one re-orthogonalization pass against the exact U
        U_bar, _ = qr_thin(U_bar - U @ (U.T @ U_bar))
    return np.hstack([U, U_bar]), U_bar


def assemble_augmented_coefficients(S: np.ndarray, size: int | None = None) -> np.ndarray:
    """Block matrix ``[[S, 0], [0, 0]]`` of shape ``(size, size)`` (default 2r)."""
    S = np.asarray(S, dtype=float)
    r = S.shape[0]
    size = 2 * r if size is None else size
    out = np.zeros((size, size))
    out[:r, :r] = S
    return out


def augment(factors: LowRankFactors, G_U: np.ndarray, G_V: np.ndarray) -> AugmentedState:
    U_aug, _ = basis_augment(factors.U, G_U)
    V_aug, _ = basis_augment(factors.V, G_V)
    S_aug = assemble_augmented_coefficients(factors.S, U_aug.shape[1])
    return AugmentedState(U_aug, V_aug, S_aug, factors.rank)


def aggregate_mean(matrices: Sequence[np.ndarray]) -> np.ndarray:
    """Entrywise mean, folded in client-index order."""
    if len(matrices) == 0:
        raise ValueError("cannot aggregate an empty list")
    first = np.asarray(matrices[0], dtype=float)
    total = first.copy()
    for M in matrices[1:]:
        M = np.asarray(M, dtype=float)
        if M.shape != first.shape:
            raise ValueError(f"shape mismatch in aggregate: {M.shape} vs {first.shape}")
        total += M
    return total / len(matrices)


def select_rank(sigma: np.ndarray, theta: float) -> int:
    """Smallest r' whose discarded tail ``||sigma[r':]||`` is below theta.

    A tail of exact zeros always counts as discardable, so ``theta = 0``
    keeps exactly the nonzero singular values.
    """
    tails = np.sqrt(np.cumsum(sigma[::-1] ** 2))[::-1]  # tails[i] = ||sigma[i:]||
    tails = np.append(tails, 0.0)
    for r in range(len(sigma) + 1):
        if tails[r] < theta or tails[r] == 0.0:
            return r
    return len(sigma)


def truncate(state: AugmentedState, cfg: TruncationConfig) -> TruncationResult:
    """Compress aggregated augmented coefficients back to a diagonal core.

    The threshold is ``theta = tau * ||S_aug||_F``; the tail of discarded
    singular values has 2-norm below theta, which bounds the Frobenius
    error of the compressed factorization by theta.
    """
    P, sigma, Q = svd_square(state.S_aug)
    dim = len(sigma)
    theta = cfg.tau * float(np.linalg.norm(sigma))
    upper = min(cfg.r_max or dim, dim)
    lower = min(cfg.r_min, upper)
    if sigma[0] == 0.0:
        r1 = lower
        U = state.U_aug @ P[:, :r1]
        V = state.V_aug @ Q[:, :r1]
        S = DEGENERATE_EPS * np.eye(r1)
        return TruncationResult(LowRankFactors(U, S, V), theta, sigma, degenerate=True)
    r1 = min(max(select_rank(sigma, theta), lower), upper)
    U = state.U_aug @ P[:, :r1]
    V = state.V_aug @ Q[:, :r1]
    return TruncationResult(LowRankFactors(U, np.diag(sigma[:r1]), V), theta, sigma)


def reconstruct(factors: LowRankFactors) -> np.ndarray:
    return factors.U @ factors.S @ factors.V.T


def reconstruct_augmented(state: AugmentedState) -> np.ndarray:
    return state.U_aug @ state.S_aug @ state.V_aug.T
