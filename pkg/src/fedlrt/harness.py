"""Experiment orchestration: seeded runs, CSV metrics, theorem checks, summaries."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

from fedlrt.algorithms import (
    ALGORITHMS,
    LOW_RANK_ALGORITHMS,
    ROUND_FUNCTIONS,
    CommLedger,
    FederationConfig,
    variance_mode_for,
)
from fedlrt.losses import FederatedProblem, make_heterogeneous, make_homogeneous, oracle_minimizer
from fedlrt.lowrank import LowRankFactors, TruncationConfig, default_initial_rank, init_factors, reconstruct

log = logging.getLogger(__name__)

METRICS_FIELDS = ("seed", "round", "rank", "global_loss", "dist_to_oracle", "max_drift",
                  "grad_norm", "floats_down", "floats_up", "comm_rounds_cum")
SUMMARY_FIELDS = ("algorithm", "experiment", "clients", "seeds", "median_final_loss",
                  "median_rounds_to_threshold", "cumulative_floats")
SMOOTHNESS_SAFETY = 1.05
CHECK_SLACK = 1e-9
LOSS_THRESHOLD = 1e-4
EXPERIMENTS = ("homogeneous", "heterogeneous")

_DEFAULTS = {
    "homogeneous": dict(n=20, r_target=4, samples=10_000, clients=4, local_iters=20, lr=1e-3,
                        tau=0.1, rounds=2000),
    "heterogeneous": dict(n=10, r_target=1, samples=10_000, clients=4, local_iters=100, lr=1e-3,
                          tau=0.1, rounds=300),
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str = "homogeneous"
    algorithm: str = "fedlrt-full"
    n: int = 20
    r_target: int = 4
    samples: int = 10_000
    clients: int = 4
    local_iters: int = 20
    lr: float = 1e-3
    tau: float = 0.1
    rank_init: int | None = None
    rounds: int = 2000
    seeds: list[int] = field(default_factory=lambda: list(range(20)))
    out: str = "metrics.csv"
    init_scale: float = 0.1
    r_min: int = 1
    r_max: int | None = None
    orthonormal_features: bool = True
    jobs: int = 1

    @classmethod
    def for_experiment(cls, experiment: str = "homogeneous", **overrides) -> "ExperimentConfig":
        if experiment not in _DEFAULTS:
            raise ConfigError(f"unknown experiment {experiment!r}; choose from {', '.join(EXPERIMENTS)}")
        values = dict(_DEFAULTS[experiment], experiment=experiment)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        values = dict(values)
        if "seeds" in values:
            values["seeds"] = _parse_seeds(values["seeds"])
        try:
            cfg = cls(**values)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    @property
    def initial_rank(self) -> int:
        return self.rank_init if self.rank_init is not None else default_initial_rank(self.n)

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; choose from {', '.join(ALGORITHMS)}")
        for name in ("n", "r_target", "samples", "clients", "local_iters", "r_min", "jobs"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not 0 <= self.tau < 1:
            raise ConfigError("tau must lie in [0, 1)")
        if not 1 <= self.initial_rank <= self.n:
            raise ConfigError("rank_init must lie in [1, n]")
        if self.r_target > self.n:
            raise ConfigError("r_target must be <= n")
        if self.r_max is not None and not self.r_min <= self.r_max <= self.n:
            raise ConfigError("need r_min <= r_max <= n")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.experiment == "homogeneous" and self.samples % self.clients:
            raise ConfigError("samples must split evenly over clients")
        if not self.init_scale > 0:
            raise ConfigError("init_scale must be positive")

    def federation(self) -> FederationConfig:
        trunc = TruncationConfig(self.tau, self.r_min, self.r_max)
        return FederationConfig(self.local_iters, self.lr, self.rounds,
                                variance_mode_for(self.algorithm), trunc)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _parse_seeds(value) -> list[int]:
    if isinstance(value, int):
        return [value]
    if isinstance(value, str):
        value = value.strip()
        if ".." in value:
            lo, hi = value.split("..")
            return list(range(int(lo), int(hi) + 1))
        return [int(v) for v in value.split(",") if v.strip()]
    return [int(v) for v in value]


def load_config(path: str | os.PathLike | None, **overrides) -> ExperimentConfig:
    """Read a flat YAML mapping; keyword overrides that are not None win."""
    values = {}
    if path is not None:
        try:
            with open(path) as fh:
                values = yaml.safe_load(fh) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError("config must be a key-value mapping")
    experiment = overrides.pop("experiment", None) or values.pop("experiment", "homogeneous")
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.for_experiment(experiment, **values)


# -- running ------------------------------------------------------------------

@dataclass
class SeedRun:
    seed: int
    rows: list[dict]
    theta: list[float]
    initial_loss: float
    smoothness: float
    status: str = "ok"
    failed_round: int | None = None
    reason: str = ""


def build_problem(cfg: ExperimentConfig, seed) -> FederatedProblem:
    if cfg.experiment == "homogeneous":
        return make_homogeneous(cfg.n, cfg.r_target, cfg.samples, cfg.clients, seed,
                                cfg.orthonormal_features)
    return make_heterogeneous(cfg.n, cfg.clients, cfg.samples, seed, cfg.r_target,
                              cfg.orthonormal_features)


def _seed_streams(seed: int):
    data_ss, init_ss = np.random.SeedSequence(seed).spawn(2)
    return data_ss, init_ss


def run_seed(cfg: ExperimentConfig, seed: int) -> SeedRun:
    data_ss, init_ss = _seed_streams(seed)
    problem = build_problem(cfg, data_ss)
    W_star = oracle_minimizer(problem)
    loss_star = problem.global_loss(W_star)
    L_hat = problem.smoothness()
    fed = cfg.federation()
    factors = init_factors(cfg.n, cfg.initial_rank, init_ss, cfg.init_scale)
    low_rank = cfg.algorithm in LOW_RANK_ALGORITHMS
    state: LowRankFactors | np.ndarray = factors if low_rank else reconstruct(factors)
    step = ROUND_FUNCTIONS[cfg.algorithm]
    ledger = CommLedger()
    W0 = reconstruct(factors)
    run = SeedRun(seed, [], [], problem.global_loss(W0) - loss_star, L_hat)

    for t in range(1, cfg.rounds + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                state, stats = step(state, problem.clients, fed, ledger)
            except ValueError as exc:
                # the kernels refuse non-finite input, which is how divergence shows up
                log.warning("seed %d: round %d failed: %s", seed, t, exc)
                run.status, run.failed_round, run.reason = "failed", t, str(exc)
                break
            W = reconstruct(state) if low_rank else state
            gap = problem.global_loss(W) - loss_star
            dist = float(np.linalg.norm(W - W_star))
        rank = state.rank if low_rank else cfg.n
        values = (gap, dist, stats.max_drift, stats.grad_norm, stats.theta)
        if not all(math.isfinite(v) for v in values) or not np.all(np.isfinite(W)):
            log.warning("seed %d: non-finite state at round %d, aborting seed", seed, t)
            run.status, run.failed_round, run.reason = "failed", t, "non-finite metrics"
            break
        cum = ledger.cumulative
        run.rows.append(dict(seed=seed, round=t, rank=rank, global_loss=gap, dist_to_oracle=dist,
                             max_drift=stats.max_drift, grad_norm=stats.grad_norm,
                             floats_down=cum.down, floats_up=cum.up, comm_rounds_cum=cum.comm_rounds))
        run.theta.append(stats.theta)
    return run


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def meta_path_for(metrics_path: str | os.PathLike) -> Path:
    p = Path(metrics_path)
    return p.with_name(p.name + ".meta.json")


def render_metrics(runs: Iterable[SeedRun]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_FIELDS)
    for run in runs:
        for row in run.rows:
            writer.writerow([_fmt(row[k]) for k in METRICS_FIELDS])
    return buf.getvalue()


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    runs: list[SeedRun]
    metrics_path: Path
    meta_path: Path

    @property
    def failed(self) -> bool:
        return any(r.status != "ok" for r in self.runs)


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Run every seed and write the metrics CSV plus a JSON sidecar.

    The sidecar holds what the theorem checker needs beyond the CSV: the
    smoothness estimate, the initial loss gap and the per-round truncation
    threshold of each seed, and each seed's status.
    """
    cfg.validate()
    if cfg.jobs > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            runs = list(pool.map(run_seed, [cfg] * len(cfg.seeds), cfg.seeds))
    else:
        runs = [run_seed(cfg, s) for s in cfg.seeds]

    out = Path(cfg.out)
    meta = {
        "config": cfg.to_dict(),
        "smoothness_safety": SMOOTHNESS_SAFETY,
        "seeds": {
            str(r.seed): {
                "status": r.status,
                "failed_round": r.failed_round,
                "reason": r.reason,
                "smoothness": r.smoothness,
                "initial_loss": r.initial_loss,
                "theta": r.theta,
            }
            for r in runs
        },
    }
    meta_path = meta_path_for(out)
    _atomic_write(out, render_metrics(runs))
    _atomic_write(meta_path, json.dumps(meta, indent=1))
    return ExperimentResult(cfg, runs, out, meta_path)


def read_metrics(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != METRICS_FIELDS:
            raise ConfigError(f"{path}: unexpected metrics header {header}")
        rows = []
        for rec in reader:
            row = dict(zip(header, rec))
            for key in ("seed", "round", "rank", "floats_down", "floats_up", "comm_rounds_cum"):
                row[key] = int(row[key])
            for key in ("global_loss", "dist_to_oracle", "max_drift", "grad_norm"):
                row[key] = float(row[key])
            rows.append(row)
    return rows


def read_meta(path: str | os.PathLike) -> dict:
    with open(path) as fh:
        return json.load(fh)


# -- theorem checks -----------------------------------------------------------

@dataclass
class RoundCheck:
    seed: int
    round: int
    drift_lhs: float
    drift_rhs: float
    descent_lhs: float
    descent_rhs: float

    @property
    def drift_ok(self) -> bool:
        return self.drift_lhs <= self.drift_rhs

    @property
    def descent_ok(self) -> bool:
        return self.descent_lhs <= self.descent_rhs


@dataclass
class TheoremReport:
    algorithm: str
    checks: list[RoundCheck]
    drift_applicable: dict[int, bool]
    descent_applicable: dict[int, bool]
    reason: str = ""

    @property
    def applicable(self) -> bool:
        return any(self.drift_applicable.values()) or any(self.descent_applicable.values())

    def violations(self, kind: str, applicable_only: bool = True) -> list[RoundCheck]:
        gate = self.drift_applicable if kind == "drift" else self.descent_applicable
        ok = (lambda c: c.drift_ok) if kind == "drift" else (lambda c: c.descent_ok)
        return [c for c in self.checks if not ok(c) and (gate.get(c.seed, False) or not applicable_only)]

    @property
    def verdict(self) -> str:
        if not self.applicable:
            return "not applicable"
        if self.violations("drift") or self.violations("descent"):
            return "fail"
        return "pass"

    def render(self) -> str:
        lines = [f"theorem check for {self.algorithm}: {self.verdict}"]
        if self.reason:
            lines.append(f"  note: {self.reason}")
        for seed in sorted(self.drift_applicable):
            lines.append(f"  seed {seed}: drift bound {'applies' if self.drift_applicable[seed] else 'not applicable'}, "
                         f"descent bound {'applies' if self.descent_applicable[seed] else 'not applicable'}")
        for c in self.checks:
            lines.append(
                f"  seed {c.seed} round {c.round}: drift {'PASS' if c.drift_ok else 'FAIL'} "
                f"({c.drift_lhs:.3e} <= {c.drift_rhs:.3e}); descent {'PASS' if c.descent_ok else 'FAIL'} "
                f"({c.descent_lhs:.3e} <= {c.descent_rhs:.3e})")
        lines.append(f"  drift violations: {len(self.violations('drift'))} "
                     f"(all rounds, ignoring applicability: {len(self.violations('drift', False))})")
        lines.append(f"  descent violations: {len(self.violations('descent'))} "
                     f"(all rounds, ignoring applicability: {len(self.violations('descent', False))})")
        return "\n".join(lines)


def check_theorems(rows: Sequence[dict], meta: dict) -> TheoremReport:
    """Evaluate the client-drift and loss-descent inequalities round by round.

    Drift: ``max_drift <= e * s * lr * grad_norm`` needs ``lr <= 1 / (L s)``.
    Descent: ``loss change <= -s lr (1 - 12 s lr L) grad_norm^2 + L theta``
    needs ``lr <= 1 / (12 L s)``. ``L`` is the stored smoothness estimate
    times the safety factor. Rounds whose precondition fails are still
    evaluated but do not count toward the verdict.
    """
    cfg = meta["config"]
    algorithm = cfg["algorithm"]
    s, lr = cfg["local_iters"], cfg["lr"]
    safety = meta.get("smoothness_safety", SMOOTHNESS_SAFETY)
    if algorithm != "fedlrt-full":
        return TheoremReport(algorithm, [], {}, {}, "bounds are stated for full variance correction only")
    checks, drift_ok, descent_ok = [], {}, {}
    by_seed: dict[int, list[dict]] = {}
    for row in rows:
        by_seed.setdefault(row["seed"], []).append(row)
    for seed, seed_rows in sorted(by_seed.items()):
        info = meta["seeds"][str(seed)]
        L = safety * info["smoothness"]
        drift_ok[seed] = lr <= 1.0 / (L * s)
        descent_ok[seed] = lr <= 1.0 / (12.0 * L * s)
        prev = info["initial_loss"]
        for row, theta in zip(sorted(seed_rows, key=lambda r: r["round"]), info["theta"]):
            g = row["grad_norm"]
            checks.append(RoundCheck(
                seed, row["round"],
                row["max_drift"], math.e * s * lr * g + CHECK_SLACK,
                row["global_loss"] - prev,
                -s * lr * (1.0 - 12.0 * s * lr * L) * g * g + L * theta + CHECK_SLACK,
            ))
            prev = row["global_loss"]
    report = TheoremReport(algorithm, checks, drift_ok, descent_ok)
    if not report.applicable:
        report.reason = "learning rate outside the range the bounds assume"
    return report


def check_run(metrics_path: str | os.PathLike, meta_path: str | os.PathLike | None = None) -> TheoremReport:
    meta = read_meta(meta_path or meta_path_for(metrics_path))
    return check_theorems(read_metrics(metrics_path), meta)


# -- summaries ----------------------------------------------------------------

def _rounds_to_threshold(rows: list[dict], threshold: float) -> float:
    for row in sorted(rows, key=lambda r: r["round"]):
        if row["global_loss"] <= threshold:
            return float(row["round"])
    return math.inf


def compare_summary(metrics_paths: Sequence[str | os.PathLike], out: str | os.PathLike | None = None,
                    threshold: float = LOSS_THRESHOLD) -> list[dict]:
    """One row per (algorithm, clients) with medians over seeds."""
    if not metrics_paths:
        raise ConfigError("need at least one metrics file")
    groups: dict[tuple, list[list[dict]]] = {}
    for path in metrics_paths:
        rows = read_metrics(path)
        cfg = read_meta(meta_path_for(path))["config"]
        key = (cfg["algorithm"], cfg["experiment"], cfg["clients"])
        by_seed: dict[int, list[dict]] = {}
        for row in rows:
            by_seed.setdefault(row["seed"], []).append(row)
        groups.setdefault(key, []).extend(by_seed.values())
    summary = []
    for (algorithm, experiment, clients), seed_rows in groups.items():
        seed_rows = [rs for rs in seed_rows if rs]
        finals = [max(rs, key=lambda r: r["round"]) for rs in seed_rows]
        reach = float(np.median([_rounds_to_threshold(rs, threshold) for rs in seed_rows])) if seed_rows else math.inf
        summary.append(dict(
            algorithm=algorithm, experiment=experiment, clients=clients, seeds=len(seed_rows),
            median_final_loss=float(np.median([f["global_loss"] for f in finals])) if finals else math.nan,
            median_rounds_to_threshold="not reached" if math.isinf(reach) else reach,
            cumulative_floats=float(np.median([f["floats_down"] + f["floats_up"] for f in finals])) if finals else 0,
        ))
    if out is not None:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(SUMMARY_FIELDS)
        for row in summary:
            writer.writerow([_fmt(row[k]) for k in SUMMARY_FIELDS])
        _atomic_write(Path(out), buf.getvalue())
    return summary
