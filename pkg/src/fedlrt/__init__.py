"""Federated dynamical low-rank training on factorized weights ``W = U S V^T``."""

from fedlrt.algorithms import (
    ALGORITHMS,
    CommLedger,
    FederationConfig,
    Payload,
    fedavg_round,
    fedlin_round,
    fedlrt_round,
    fedlrt_simplified_round,
    ledger_expected_floats,
    naive_fedlrt_round,
)
from fedlrt.harness import ExperimentConfig, check_run, check_theorems, compare_summary, run_experiment
from fedlrt.lowrank import LowRankFactors, TruncationConfig, augment, init_factors, reconstruct, truncate

__all__ = [
    "ALGORITHMS", "CommLedger", "ExperimentConfig", "FederationConfig", "LowRankFactors", "Payload",
    "TruncationConfig", "augment", "check_run", "check_theorems", "compare_summary", "fedavg_round",
    "fedlin_round", "fedlrt_round", "fedlrt_simplified_round", "init_factors", "ledger_expected_floats",
    "naive_fedlrt_round", "reconstruct", "run_experiment", "truncate",
]
