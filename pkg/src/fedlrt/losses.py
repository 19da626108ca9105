"""Client loss models, factor-gradient chain rules and the LLS test problems.

The least-squares problems fit ``f(x, y) = p(x)^T W p(y)`` where ``p`` is a
vector of Legendre polynomials. Client losses are quadratic in W, so each
model keeps the sufficient statistics (feature Gram matrix, right-hand side,
mean squared target) instead of touching the samples on every gradient call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from fedlrt.linalg import spectral_norm
from fedlrt.lowrank import LowRankFactors

COND_LIMIT = 1e12


class OracleError(RuntimeError):
    def __init__(self, message: str, condition: float):
        super().__init__(f"{message} (condition estimate {condition:.3e})")
        self.condition = condition


class LossModel(Protocol):
    n: int

    def loss(self, W: np.ndarray) -> float: ...

    def weight_gradient(self, W: np.ndarray) -> np.ndarray: ...


# -- Legendre features -------------------------------------------------------

def legendre_features(x: float, n: int, orthonormal: bool = False) -> np.ndarray:
    """``(P_0(x), ..., P_{n-1}(x))`` by the three-term recurrence.

    With ``orthonormal=True`` entry k is scaled by ``sqrt(2k + 1)``, which
    makes the features orthonormal under the uniform measure on [-1, 1].
    """
    if abs(x) > 1.0:
        raise ValueError(f"Legendre features need |x| <= 1, got {x}")
    return legendre_vander(np.array([x], dtype=float), n, orthonormal)[0]


def legendre_vander(x: np.ndarray, n: int, orthonormal: bool = False) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if n < 1:
        raise ValueError("n must be >= 1")
    if np.any(np.abs(x) > 1.0):
        raise ValueError("Legendre features need all |x| <= 1")
    P = np.empty((x.shape[0], n))
    P[:, 0] = 1.0
    if n > 1:
        P[:, 1] = x
    for k in range(1, n - 1):
        P[:, k + 1] = ((2 * k + 1) * x * P[:, k] - k * P[:, k - 1]) / (k + 1)
    if orthonormal:
        P *= np.sqrt(2.0 * np.arange(n) + 1.0)
    return P


@dataclass(frozen=True)
class LLSData:
    """Samples in feature form: row i is ``(p(x_i), p(y_i), f_i)``."""

    px: np.ndarray
    py: np.ndarray
    f: np.ndarray

    def __post_init__(self):
        if not (self.px.shape[0] == self.py.shape[0] == self.f.shape[0]):
            raise ValueError("feature and target lengths differ")
        if self.px.shape[1] != self.py.shape[1]:
            raise ValueError("x and y feature sizes differ")

    def __len__(self) -> int:
        return self.f.shape[0]

    @property
    def n(self) -> int:
        return self.px.shape[1]

    def subset(self, idx) -> "LLSData":
        return LLSData(self.px[idx], self.py[idx], self.f[idx])


def _residuals(W: np.ndarray, data: LLSData) -> np.ndarray:
    if len(data) == 0:
        raise ValueError("empty sample set")
    if W.shape != (data.n, data.n):
        raise ValueError(f"W has shape {W.shape}, expected {(data.n, data.n)}")
    return np.einsum("ni,ij,nj->n", data.px, W, data.py) - data.f


def lls_loss(W: np.ndarray, data: LLSData) -> float:
    """``(1 / 2N) * sum_i (p(x_i)^T W p(y_i) - f_i)^2``, evaluated sample by sample."""
    r = _residuals(np.asarray(W, dtype=float), data)
    return 0.5 * float(np.mean(r * r))


def lls_weight_gradient(W: np.ndarray, data: LLSData) -> np.ndarray:
    r = _residuals(np.asarray(W, dtype=float), data)
    return (data.px * r[:, None]).T @ data.py / len(data)


class LLSLoss:
    """Quadratic LLS loss held as ``0.5 w^T H w - b^T w + 0.5 mean(f^2)``.

    ``w`` is W flattened row-major and ``H = mean_i kron(p(x_i), p(y_i))``
    outer products. Agrees with :func:`lls_loss` up to round-off.
    """

    def __init__(self, data: LLSData):
        if len(data) == 0:
            raise ValueError("empty sample set")
        self.n = data.n
        self.num_samples = len(data)
        phi = np.einsum("ni,nj->nij", data.px, data.py).reshape(len(data), -1)
        self.hessian = phi.T @ phi / len(data)
        self.rhs = phi.T @ data.f / len(data)
        self.f_sq = float(data.f @ data.f) / len(data)
        self.data = data

    def loss(self, W: np.ndarray) -> float:
        w = np.asarray(W, dtype=float).reshape(-1)
        return 0.5 * float(w @ (self.hessian @ w)) - float(self.rhs @ w) + 0.5 * self.f_sq

    def weight_gradient(self, W: np.ndarray) -> np.ndarray:
        w = np.asarray(W, dtype=float).reshape(-1)
        return (self.hessian @ w - self.rhs).reshape(self.n, self.n)

    def hessian_apply(self, D: np.ndarray) -> np.ndarray:
        return (self.hessian @ np.asarray(D, dtype=float).reshape(-1)).reshape(self.n, self.n)


class DiagonalQuadratic:
    """``0.5 * sum(curvature * (W - center)^2)``; a toy model with a known minimizer."""

    def __init__(self, center: np.ndarray, curvature: np.ndarray | float = 1.0):
        self.center = np.asarray(center, dtype=float)
        self.curvature = np.broadcast_to(np.asarray(curvature, dtype=float), self.center.shape).copy()
        self.n = self.center.shape[0]

    def loss(self, W):
        d = np.asarray(W, dtype=float) - self.center
        return 0.5 * float(np.sum(self.curvature * d * d))

    def weight_gradient(self, W):
        return self.curvature * (np.asarray(W, dtype=float) - self.center)

    def hessian_apply(self, D):
        return self.curvature * np.asarray(D, dtype=float)


# -- chain rules ------------------------------------------------------------

def factor_gradients(factors: LowRankFactors, model: LossModel):
    """Gradients of ``L(U S V^T)`` with respect to U, V and S."""
    U, S, V = factors.U, factors.S, factors.V
    G = model.weight_gradient(U @ S @ V.T)
    return G @ V @ S.T, G.T @ U @ S, U.T @ G @ V


def coefficient_gradient(U_aug: np.ndarray, S_aug: np.ndarray, V_aug: np.ndarray, model: LossModel) -> np.ndarray:
    return U_aug.T @ model.weight_gradient(U_aug @ S_aug @ V_aug.T) @ V_aug


def _hessian_map(model: LossModel):
    if hasattr(model, "hessian_apply"):
        return model.hessian_apply
    zero = model.weight_gradient(np.zeros((model.n, model.n)))
    # exact for quadratics: the gradient is affine in W
    return lambda D: model.weight_gradient(D) - zero


def estimate_smoothness(model: LossModel, probes: int = 200, seed=0) -> float:
    """Largest Hessian eigenvalue of a quadratic loss, by power iteration."""
    return spectral_norm(_hessian_map(model), (model.n, model.n), iters=probes, seed=seed)


# -- federated problems -----------------------------------------------------

@dataclass
class FederatedProblem:
    kind: str
    clients: list
    client_data: list
    targets: list
    n: int
    _w_star: np.ndarray | None = field(default=None, repr=False)

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    def global_loss(self, W: np.ndarray) -> float:
        return float(np.mean([m.loss(W) for m in self.clients]))

    def global_gradient(self, W: np.ndarray) -> np.ndarray:
        grads = [m.weight_gradient(W) for m in self.clients]
        return sum(grads[1:], grads[0].copy()) / len(grads)

    def smoothness(self, probes: int = 200, seed=0) -> float:
        """Smoothness constant shared by all client losses and the global loss."""
        ests = [estimate_smoothness(m, probes, seed) for m in self.clients]
        glob = spectral_norm(
            lambda D: sum(_hessian_map(m)(D) for m in self.clients) / len(self.clients),
            (self.n, self.n), iters=probes, seed=seed,
        )
        return max(ests + [glob])


def _unit_low_rank(rng: np.random.Generator, n: int, r: int) -> np.ndarray:
    W = rng.standard_normal((n, r)) @ rng.standard_normal((n, r)).T
    return W / np.linalg.norm(W)


def _sample_points(rng, num_samples, n, orthonormal):
    x = rng.uniform(-1.0, 1.0, num_samples)
    y = rng.uniform(-1.0, 1.0, num_samples)
    return legendre_vander(x, n, orthonormal), legendre_vander(y, n, orthonormal)


def make_homogeneous(n: int = 20, r_target: int = 4, num_samples: int = 10_000, clients: int = 4,
                     seed=0, orthonormal: bool = True) -> FederatedProblem:
    """One low-rank target; samples shuffled and split into equal contiguous shards."""
    if num_samples % clients:
        raise ValueError(f"{num_samples} samples do not split evenly over {clients} clients")
    if not 1 <= r_target <= n:
        raise ValueError("need 1 <= r_target <= n")
    rng = np.random.default_rng(seed)
    W_target = _unit_low_rank(rng, n, r_target)
    px, py = _sample_points(rng, num_samples, n, orthonormal)
    f = np.einsum("ni,ij,nj->n", px, W_target, py)
    full = LLSData(px, py, f)
    perm = rng.permutation(num_samples)
    shards = [full.subset(idx) for idx in np.split(perm, clients)]
    return FederatedProblem("homogeneous", [LLSLoss(d) for d in shards], shards,
                            [W_target] * clients, n, W_target)


def make_heterogeneous(n: int = 10, clients: int = 4, num_samples: int = 10_000, seed=0,
                       r_target: int = 1, orthonormal: bool = True,
                       targets: Sequence[np.ndarray] | None = None) -> FederatedProblem:
    """Shared samples, one rank-``r_target`` unit-norm target per client."""
    rng = np.random.default_rng(seed)
    if targets is None:
        targets = [_unit_low_rank(rng, n, r_target) for _ in range(clients)]
    targets = [np.asarray(T, dtype=float) for T in targets]
    px, py = _sample_points(rng, num_samples, n, orthonormal)
    data = [LLSData(px, py, np.einsum("ni,ij,nj->n", px, T, py)) for T in targets]
    return FederatedProblem("heterogeneous", [LLSLoss(d) for d in data], data, targets, n)


def oracle_minimizer(problem: FederatedProblem) -> np.ndarray:
    """Global minimizer of the averaged LLS objective.

    The homogeneous target is realizable, so it is returned directly.
    Otherwise the vectorized normal equations are assembled from the raw
    samples and solved densely.
    """
    if problem.kind == "homogeneous" and problem._w_star is not None:
        return problem._w_star.copy()
    n = problem.n
    A = np.zeros((n * n, n * n))
    b = np.zeros(n * n)
    for data in problem.client_data:
        phi = (data.px[:, :, None] * data.py[:, None, :]).reshape(len(data), -1)
        A += phi.T @ phi / len(data)
        b += phi.T @ data.f / len(data)
    A /= problem.num_clients
    b /= problem.num_clients
    cond = float(np.linalg.cond(A))
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise OracleError("normal equations are singular", cond)
    return np.linalg.solve(A, b).reshape(n, n)
