"""Federated round drivers with metered server/client messaging.

Clients are simulated in-process. Every payload that would cross the
network goes through a :class:`CommLedger`, which counts floats in each
direction; a communication round is closed by each client-to-server
upload (the broadcast that precedes it belongs to the same round).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from fedlrt.losses import LossModel, coefficient_gradient, factor_gradients
from fedlrt.lowrank import (
    AugmentedState,
    LowRankFactors,
    TruncationConfig,
    aggregate_mean,
    assemble_augmented_coefficients,
    basis_augment,
    truncate,
)

VARIANCE_MODES = ("none", "full", "simplified")
ALGORITHMS = ("fedavg", "fedlin", "fedlrt-none", "fedlrt-full", "fedlrt-simplified", "fedlrt-naive")
LOW_RANK_ALGORITHMS = ("fedlrt-none", "fedlrt-full", "fedlrt-simplified", "fedlrt-naive")


@dataclass(frozen=True)
class FederationConfig:
    s_star: int = 20
    lr: float = 1e-3
    rounds: int = 1
    variance_mode: str = "none"
    truncation: TruncationConfig = field(default_factory=TruncationConfig)
    seed: int = 0

    def __post_init__(self):
        if self.s_star < 1:
            raise ValueError("s_star must be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.variance_mode not in VARIANCE_MODES:
            raise ValueError(f"unknown variance mode {self.variance_mode!r}")


class Payload(NamedTuple):
    down: int
    up: int
    comm_rounds: int

    @property
    def total(self) -> int:
        return self.down + self.up


class CommLedger:
    """Float counts per aggregation round and cumulatively.

    Broadcasts count once per payload; uploads count once per client.
    """

    def __init__(self):
        self.history: list[Payload] = []
        self._down = self._up = self._rounds = 0
        self._open = False

    def begin_round(self) -> None:
        if self._open:
            self.end_round()
        self._down = self._up = self._rounds = 0
        self._open = True

    def end_round(self) -> Payload:
        p = Payload(self._down, self._up, self._rounds)
        self.history.append(p)
        self._open = False
        return p

    def broadcast(self, *matrices: np.ndarray) -> None:
        self._down += sum(int(np.size(M)) for M in matrices)

    def gather(self, payloads: Sequence[Sequence[np.ndarray]]) -> None:
        self._up += sum(int(np.size(M)) for client in payloads for M in client)
        self._rounds += 1

    @property
    def current(self) -> Payload:
        return Payload(self._down, self._up, self._rounds)

    @property
    def cumulative(self) -> Payload:
        down = sum(p.down for p in self.history)
        up = sum(p.up for p in self.history)
        rounds = sum(p.comm_rounds for p in self.history)
        if self._open:
            down, up, rounds = down + self._down, up + self._up, rounds + self._rounds
        return Payload(down, up, rounds)


@dataclass(frozen=True)
class RoundStats:
    """Per-round diagnostics; ``grad_norm`` is the global coefficient
    (or weight) gradient at the start of the round."""

    max_drift: float
    grad_norm: float
    theta: float = 0.0
    degenerate: bool = False
    payload: Payload | None = None


def _aggregate(ledger: CommLedger, payloads: list[tuple[np.ndarray, ...]]) -> list[np.ndarray]:
    ledger.gather(payloads)
    return [aggregate_mean([p[i] for p in payloads]) for i in range(len(payloads[0]))]


def _start(ledger: CommLedger | None) -> CommLedger:
    ledger = ledger if ledger is not None else CommLedger()
    ledger.begin_round()
    return ledger


# -- full-weight baselines --------------------------------------------------

def fedavg_round(W: np.ndarray, models: Sequence[LossModel], cfg: FederationConfig,
                 ledger: CommLedger | None = None) -> tuple[np.ndarray, RoundStats]:
    ledger = _start(ledger)
    ledger.broadcast(W)
    grad_norm = float(np.linalg.norm(aggregate_mean([m.weight_gradient(W) for m in models])))
    finals, drift = [], 0.0
    for m in models:
        Wc = W.copy()
        for _ in range(cfg.s_star):
            Wc = Wc - cfg.lr * m.weight_gradient(Wc)
            drift = max(drift, float(np.linalg.norm(Wc - W)))
        finals.append((Wc,))
    (W_new,) = _aggregate(ledger, finals)
    return W_new, RoundStats(drift, grad_norm, payload=ledger.end_round())


def fedlin_round(W: np.ndarray, models: Sequence[LossModel], cfg: FederationConfig,
                 ledger: CommLedger | None = None) -> tuple[np.ndarray, RoundStats]:
    ledger = _start(ledger)
    ledger.broadcast(W)
    local_grads = [m.weight_gradient(W) for m in models]
    (G,) = _aggregate(ledger, [(g,) for g in local_grads])
    ledger.broadcast(G)
    finals, drift = [], 0.0
    for m, Gc in zip(models, local_grads):
        correction = G - Gc
        Wc = W.copy()
        for _ in range(cfg.s_star):
            Wc = Wc - cfg.lr * (m.weight_gradient(Wc) + correction)
            drift = max(drift, float(np.linalg.norm(Wc - W)))
        finals.append((Wc,))
    (W_new,) = _aggregate(ledger, finals)
    return W_new, RoundStats(drift, float(np.linalg.norm(G)), payload=ledger.end_round())


# -- low-rank rounds --------------------------------------------------------

def _coefficient_steps(state: AugmentedState, model: LossModel, cfg: FederationConfig,
                       correction: np.ndarray | None) -> tuple[np.ndarray, float]:
    S0 = state.S_aug
    Sc = S0.copy()
    drift = 0.0
    for _ in range(cfg.s_star):
        g = coefficient_gradient(state.U_aug, Sc, state.V_aug, model)
        if correction is not None:
            g = g + correction
        Sc = Sc - cfg.lr * g
        drift = max(drift, float(np.linalg.norm(Sc - S0)))
    return Sc, drift


def fedlrt_round(factors: LowRankFactors, models: Sequence[LossModel], cfg: FederationConfig,
                 ledger: CommLedger | None = None) -> tuple[LowRankFactors, RoundStats]:
    """One aggregation round of federated dynamical low-rank training.

    ``cfg.variance_mode`` picks the client update: plain coefficient descent
    (``"none"``), the full 2r x 2r correction with its own extra
    communication round (``"full"``), or the r x r block correction that
    piggybacks on the basis-gradient upload (``"simplified"``).
    """
    mode = cfg.variance_mode
    ledger = _start(ledger)
    U, S, V = factors.U, factors.S, factors.V
    r = factors.rank

    ledger.broadcast(U, V, S)
    local = [factor_gradients(factors, m) for m in models]
    if mode == "simplified":
        G_U, G_V, G_S = _aggregate(ledger, [(gu, gv, gs) for gu, gv, gs in local])
    else:
        G_U, G_V = _aggregate(ledger, [(gu, gv) for gu, gv, _ in local])

    U_aug, U_bar = basis_augment(U, G_U)
    V_aug, V_bar = basis_augment(V, G_V)
    if mode == "simplified":
        ledger.broadcast(U_bar, V_bar, G_S)
    else:
        ledger.broadcast(U_bar, V_bar)

    dim = U_aug.shape[1]
    state = AugmentedState(U_aug, V_aug, assemble_augmented_coefficients(S, dim), r)
    coef_grads = [coefficient_gradient(U_aug, state.S_aug, V_aug, m) for m in models]
    if mode == "full":
        (G_aug,) = _aggregate(ledger, [(g,) for g in coef_grads])
        ledger.broadcast(G_aug)
        corrections = [G_aug - g for g in coef_grads]
    elif mode == "simplified":
        corrections = [assemble_augmented_coefficients(G_S - gs, dim) for _, _, gs in local]
        G_aug = aggregate_mean(coef_grads)
    else:
        corrections = [None] * len(models)
        G_aug = aggregate_mean(coef_grads)

    finals, drift = [], 0.0
    for m, corr in zip(models, corrections):
        Sc, d = _coefficient_steps(state, m, cfg, corr)
        finals.append((Sc,))
        drift = max(drift, d)
    (S_star,) = _aggregate(ledger, finals)

    result = truncate(state.with_coefficients(S_star), cfg.truncation)
    stats = RoundStats(drift, float(np.linalg.norm(G_aug)), result.theta, result.degenerate,
                       ledger.end_round())
    return result.factors, stats


def fedlrt_simplified_round(factors: LowRankFactors, models: Sequence[LossModel], cfg: FederationConfig,
                            ledger: CommLedger | None = None) -> tuple[LowRankFactors, RoundStats]:
    return fedlrt_round(factors, models, replace(cfg, variance_mode="simplified"), ledger)


def naive_fedlrt_round(factors: LowRankFactors, models: Sequence[LossModel], cfg: FederationConfig,
                       ledger: CommLedger | None = None) -> tuple[LowRankFactors, RoundStats]:
    """Per-client bases, then a dense average and an n x n SVD on the server.

    Each client augments the broadcast basis with its *own* gradients and
    trains its coefficients there, so the client factorizations no longer
    share a basis and the server has to rebuild the full matrix.
    """
    ledger = _start(ledger)
    ledger.broadcast(factors.U, factors.V, factors.S)
    n, r = factors.n, factors.rank
    uploads, drift, grads = [], 0.0, []
    for m in models:
        gu, gv, _ = factor_gradients(factors, m)
        U_aug, _ = basis_augment(factors.U, gu)
        V_aug, _ = basis_augment(factors.V, gv)
        state = AugmentedState(U_aug, V_aug, assemble_augmented_coefficients(factors.S, U_aug.shape[1]), r)
        grads.append(coefficient_gradient(U_aug, state.S_aug, V_aug, m))
        Sc, d = _coefficient_steps(state, m, cfg, None)
        drift = max(drift, d)
        uploads.append((U_aug, Sc, V_aug))
    ledger.gather(uploads)
    W_star = aggregate_mean([Uc @ Sc @ Vc.T for Uc, Sc, Vc in uploads])
    eye = np.eye(n)
    result = truncate(AugmentedState(eye, eye, W_star, r), cfg.truncation)
    grad_norm = float(np.linalg.norm(aggregate_mean(grads)))
    return result.factors, RoundStats(drift, grad_norm, result.theta, result.degenerate, ledger.end_round())


ROUND_FUNCTIONS = {
    "fedavg": fedavg_round,
    "fedlin": fedlin_round,
    "fedlrt-none": fedlrt_round,
    "fedlrt-full": fedlrt_round,
    "fedlrt-simplified": fedlrt_round,
    "fedlrt-naive": naive_fedlrt_round,
}


def variance_mode_for(algorithm: str) -> str:
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}; choose from {', '.join(ALGORITHMS)}")
    if algorithm.startswith("fedlrt-") and algorithm != "fedlrt-naive":
        return algorithm.split("-", 1)[1]
    return "none"


def ledger_expected_floats(algorithm: str, n: int, r: int = 0, clients: int = 1) -> Payload:
    """Floats one round of ``algorithm`` moves, from the payload shapes alone.

    ``r`` is the rank at the start of the round; augmentation adds
    ``min(r, n - r)`` columns, giving an augmented size ``d``.
    """
    C = clients
    if algorithm == "fedavg":
        return Payload(n * n, C * n * n, 1)
    if algorithm == "fedlin":
        return Payload(2 * n * n, 2 * C * n * n, 2)
    if algorithm not in LOW_RANK_ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    k = min(r, n - r)
    d = r + k
    start = 2 * n * r + r * r
    if algorithm == "fedlrt-naive":
        return Payload(start, C * (2 * n * d + d * d), 1)
    down = start + 2 * n * k
    up = C * 2 * n * r + C * d * d
    rounds = 2
    if algorithm == "fedlrt-full":
        up += C * d * d
        down += d * d
        rounds = 3
    elif algorithm == "fedlrt-simplified":
        up += C * r * r
        down += r * r
    return Payload(down, up, rounds)
