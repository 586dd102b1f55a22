"""Seeded Monte Carlo sweeps.

Three experiment kinds share one config schema (YAML or JSON):

* ``single_snapshot_sweep`` - success of the legitimate decoder (true
  structure) and the eavesdropper (no structure) against the determinantal
  ratio ``alpha = M / (pN)``.
* ``moment_sweep`` - success of the moment attack at recovering the
  structure against the number of snapshots ``L``, for several ``alpha``.
* ``concentration_study`` - spectral error of the empirical lifted covariance
  against ``L``, with a log-log slope fit.

Every trial draws from its own stream derived from
``(seed, kind, grid index, trial index)``, so results do not depend on
execution order or the number of workers.
"""
from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml
from scipy import stats

from .decoders import BLOCK_SOLVERS, PLAIN_SOLVERS, SolverConfig, recovery_success, solve
from .errors import ParameterError
from .model import (
    derive_rng,
    derive_seed,
    sample_block_structure,
    sample_channel,
    sample_message,
    sample_messages,
)
from .moments import (
    CovarianceAccumulator,
    expected_v,
    indicator_from_covariance,
    indicator_to_structure,
    l_crit,
    lift_snapshots,
    sigma_v_oracle,
)

log = logging.getLogger(__name__)

KINDS = ("single_snapshot_sweep", "moment_sweep", "concentration_study")
CSV_HEADER = "grid_value,party,success_rate,ci_low,ci_high,trials,seed"
CONCENTRATION_HEADER = "grid_value,party,spectral_error,ci_low,ci_high,trials,seed"
SNAPSHOT_CHUNK = 8192


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    N: int
    M: int
    d: int
    trials: int
    seed: int
    alpha_grid: tuple = ()
    L_grid: tuple = ()
    p: Optional[float] = None
    bob_solver: str = "block_bp"
    eve_solver: str = "bp"
    sparsity_budget: Optional[int] = None
    method: str = "exact"
    gain: float = 3.0
    validation_L: int = 1_000_000
    validation_sigmas: float = 5.0
    output: Optional[str] = None
    workers: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.trials < 1:
            raise ParameterError("trials must be at least 1")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ParameterError("seed must be a 64-bit unsigned integer")
        if self.N % self.d:
            raise ParameterError(f"d={self.d} does not divide N={self.N}")
        if not 0 < self.M < self.N:
            raise ParameterError("need 0 < M < N")
        if self.workers < 1:
            raise ParameterError("workers must be at least 1")
        needs = {"single_snapshot_sweep": ("alpha_grid",),
                 "moment_sweep": ("alpha_grid", "L_grid"),
                 "concentration_study": ("L_grid",)}[self.kind]
        for name in needs:
            grid = getattr(self, name)
            if not grid:
                raise ParameterError(f"{name} must be non-empty for {self.kind}")
            if any(b <= a for a, b in zip(grid, grid[1:])):
                raise ParameterError(f"{name} must be strictly increasing")
        if self.kind != "concentration_study" and any(a <= 1 for a in self.alpha_grid):
            raise ParameterError("every alpha must exceed 1")
        if self.kind == "concentration_study" and (self.p is None or not 0 < self.p < 1):
            raise ParameterError("concentration_study needs 0 < p < 1")
        if self.kind == "moment_sweep" and any(int(L) < 1 for L in self.L_grid):
            raise ParameterError("snapshot counts must be positive")
        for name in (self.bob_solver,):
            if name not in BLOCK_SOLVERS:
                raise ParameterError(f"unknown block solver {name!r}")
        if self.eve_solver not in PLAIN_SOLVERS:
            raise ParameterError(f"unknown solver {self.eve_solver!r}")
        if "iht" in (self.bob_solver + self.eve_solver) and self.sparsity_budget is None:
            raise ParameterError("IHT solvers need sparsity_budget")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        for key in ("alpha_grid", "L_grid"):
            if key in data:
                data[key] = tuple(data[key])
        if "L_grid" in data:
            data["L_grid"] = tuple(int(v) for v in data["L_grid"])
        try:
            return cls(**data)
        except TypeError as exc:
            raise ParameterError(str(exc)) from None

    def solver_config(self) -> SolverConfig:
        return SolverConfig(sparsity_budget=self.sparsity_budget)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ParameterError(f"{path}: expected a mapping at the top level")
    return ExperimentConfig.from_dict(data)


@dataclass
class TrialRecord:
    grid_value: float
    trial: int
    outcomes: dict
    seed: int
    wall_time: float = field(default=0.0, compare=False)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list
    records: list
    summary: dict

    def csv_text(self) -> str:
        header = CONCENTRATION_HEADER if self.config.kind == "concentration_study" else CSV_HEADER
        lines = [header] + [",".join(_fmt(v) for v in row) for row in self.rows]
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def wilson_interval(successes: int, trials: int) -> tuple[float, float]:
    """95% Wilson score interval."""
    if trials == 0:
        return math.nan, math.nan
    ci = stats.binomtest(successes, trials).proportion_ci(confidence_level=0.95, method="wilson")
    return float(ci.low), float(ci.high)


def _map(fn, jobs, workers):
    if workers == 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*jobs)))


# -- single snapshot ------------------------------------------------------------------

def single_snapshot_trial(cfg: ExperimentConfig, grid_index: int, trial: int) -> TrialRecord:
    alpha = cfg.alpha_grid[grid_index]
    p = cfg.M / (alpha * cfg.N)
    rng = derive_rng(cfg.seed, cfg.kind, grid_index, trial)
    start = time.perf_counter()
    bs = sample_block_structure(cfg.N, cfg.d, rng)
    A = sample_channel(cfg.M, cfg.N, rng)
    x = sample_message(bs, p, rng).values
    y = A @ x
    scfg = cfg.solver_config()
    bob = solve(cfg.bob_solver, y, A, bs, scfg)
    eve = solve(cfg.eve_solver, y, A, None, scfg)
    outcomes = {"bob": recovery_success(x, bob.estimate), "eve": recovery_success(x, eve.estimate)}
    return TrialRecord(alpha, trial, outcomes, derive_seed(cfg.seed, cfg.kind, grid_index, trial),
                       time.perf_counter() - start)


def run_single_snapshot_sweep(cfg: ExperimentConfig) -> ExperimentResult:
    flagged = []
    jobs = []
    for g, alpha in enumerate(cfg.alpha_grid):
        if cfg.M / (alpha * cfg.N) > 1:
            flagged.append(alpha)
            continue
        jobs.extend((cfg, g, t) for t in range(cfg.trials))
    records = _map(single_snapshot_trial, jobs, cfg.workers)
    rows = []
    for alpha in cfg.alpha_grid:
        recs = [r for r in records if r.grid_value == alpha]
        for party in ("bob", "eve"):
            if alpha in flagged:
                rows.append((float(alpha), party, math.nan, math.nan, math.nan, 0, cfg.seed))
                continue
            k = sum(r.outcomes[party] for r in recs)
            lo, hi = wilson_interval(k, len(recs))
            rows.append((float(alpha), party, k / len(recs), lo, hi, len(recs), cfg.seed))
    summary = {
        "kind": cfg.kind,
        "infeasible_alpha": flagged,
        "p": {repr(float(a)): cfg.M / (a * cfg.N) for a in cfg.alpha_grid},
    }
    return ExperimentResult(cfg, rows, records, summary)


# -- moment sweep ---------------------------------------------------------------------

def _stream_checkpoints(bs, A, p, checkpoints, rng, on_checkpoint, mean_v=None):
    """Feed fresh snapshots into a covariance accumulator, calling
    ``on_checkpoint(L, accumulator)`` after exactly each ``L`` in ``checkpoints``."""
    acc = CovarianceAccumulator(expected_v(A, p) if mean_v is None else mean_v)
    done = 0
    for L in checkpoints:
        while done < L:
            c = min(SNAPSHOT_CHUNK, L - done)
            X = sample_messages(bs, p, c, rng)
            acc.add(lift_snapshots(A, A @ X))
            done += c
        on_checkpoint(L, acc)


def moment_trial(cfg: ExperimentConfig, alpha_index: int, trial: int) -> list:
    alpha = cfg.alpha_grid[alpha_index]
    p = cfg.M / (alpha * cfg.N)
    rng = derive_rng(cfg.seed, cfg.kind, alpha_index, trial)
    seed = derive_seed(cfg.seed, cfg.kind, alpha_index, trial)
    bs = sample_block_structure(cfg.N, cfg.d, rng)
    A = sample_channel(cfg.M, cfg.N, rng)
    out = []
    start = time.perf_counter()

    def check(L, acc):
        _, B_hat = indicator_from_covariance(acc.covariance(), A, p, cfg.method, cfg.gain)
        found, _ = indicator_to_structure(B_hat, cfg.d)
        ok = found is not None and found.same_partition(bs)
        out.append(TrialRecord(L, trial, {"alpha": alpha, "eve": ok}, seed, time.perf_counter() - start))

    _stream_checkpoints(bs, A, p, cfg.L_grid, rng, check)
    return out


def fifty_percent_L(Ls, rates) -> Optional[float]:
    """Smallest grid L whose recovery rate reaches one half (None if never)."""
    for L, r in zip(Ls, rates):
        if r >= 0.5:
            return float(L)
    return None


def run_moment_sweep(cfg: ExperimentConfig) -> ExperimentResult:
    flagged = [a for a in cfg.alpha_grid if cfg.M / (a * cfg.N) >= 1]
    jobs = [(cfg, g, t) for g, a in enumerate(cfg.alpha_grid) if a not in flagged for t in range(cfg.trials)]
    records = [r for batch in _map(moment_trial, jobs, cfg.workers) for r in batch]
    rows = []
    halfway = {}
    for alpha in cfg.alpha_grid:
        party = f"eve@alpha={float(alpha)!r}"
        rates = []
        for L in cfg.L_grid:
            if alpha in flagged:
                rows.append((int(L), party, math.nan, math.nan, math.nan, 0, cfg.seed))
                continue
            recs = [r for r in records if r.outcomes["alpha"] == alpha and r.grid_value == L]
            k = sum(r.outcomes["eve"] for r in recs)
            lo, hi = wilson_interval(k, len(recs))
            rates.append(k / len(recs))
            rows.append((int(L), party, k / len(recs), lo, hi, len(recs), cfg.seed))
        halfway[repr(float(alpha))] = fifty_percent_L(cfg.L_grid, rates) if rates else None
    summary = {
        "kind": cfg.kind,
        "infeasible_alpha": flagged,
        "l_crit": l_crit(cfg.N, cfg.M, cfg.d),
        "l_crit_log": "natural",
        "fifty_percent_L": halfway,
        "p": {repr(float(a)): cfg.M / (a * cfg.N) for a in cfg.alpha_grid},
        "method": cfg.method,
    }
    return ExperimentResult(cfg, rows, records, summary)


# -- concentration --------------------------------------------------------------------

def validate_sigma_oracle(A, bs, p, L, rng, sigmas=5.0) -> dict:
    """Compare :func:`sigma_v_oracle` with a Monte Carlo covariance entry by entry.

    Passes when every entry lies within ``sigmas`` standard errors.
    """
    mean_v = expected_v(A, p)
    N = mean_v.size
    total = np.zeros((N, N))
    square = np.zeros((N, N))
    done = 0
    while done < L:
        c = min(SNAPSHOT_CHUNK * 4, L - done)
        D = lift_snapshots(A, A @ sample_messages(bs, p, c, rng)) - mean_v[:, None]
        total += D @ D.T
        D2 = D * D
        square += D2 @ D2.T
        done += c
    est = total / L
    se = np.sqrt(np.maximum(square / L - est * est, 0.0) / L)
    oracle = sigma_v_oracle(A, bs, p)
    z = np.abs(est - oracle) / np.where(se > 0, se, np.inf)
    return {"passed": bool(z.max() <= sigmas), "max_z": float(z.max()), "L": int(L), "sigmas": sigmas,
            "estimate": est, "standard_error": se, "oracle": oracle}


def concentration_trial(cfg: ExperimentConfig, trial: int) -> list:
    rng = derive_rng(cfg.seed, cfg.kind, 0, trial)
    seed = derive_seed(cfg.seed, cfg.kind, 0, trial)
    bs = sample_block_structure(cfg.N, cfg.d, rng)
    A = sample_channel(cfg.M, cfg.N, rng)
    oracle = sigma_v_oracle(A, bs, cfg.p)
    out = []
    start = time.perf_counter()

    def check(L, acc):
        err = float(np.linalg.norm(acc.covariance() - oracle, 2))
        out.append(TrialRecord(L, trial, {"spectral_error": err}, seed, time.perf_counter() - start))

    _stream_checkpoints(bs, A, cfg.p, cfg.L_grid, rng, check)
    return out


class OracleValidationError(RuntimeError):
    pass


def run_concentration_study(cfg: ExperimentConfig) -> ExperimentResult:
    gate_rng = derive_rng(cfg.seed, cfg.kind + ":gate", 0, 0)
    bs = sample_block_structure(cfg.N, cfg.d, gate_rng)
    A = sample_channel(cfg.M, cfg.N, gate_rng)
    gate = validate_sigma_oracle(A, bs, cfg.p, cfg.validation_L, gate_rng, cfg.validation_sigmas)
    if not gate["passed"]:
        raise OracleValidationError(
            f"closed-form covariance disagrees with Monte Carlo: max deviation {gate['max_z']:.2f} "
            f"standard errors > {cfg.validation_sigmas} at L={cfg.validation_L}")
    records = [r for batch in _map(concentration_trial, [(cfg, t) for t in range(cfg.trials)], cfg.workers)
               for r in batch]
    rows = []
    means = []
    for L in cfg.L_grid:
        errs = np.array([r.outcomes["spectral_error"] for r in records if r.grid_value == L])
        mean = float(errs.mean())
        half = float(stats.t.ppf(0.975, errs.size - 1) * errs.std(ddof=1) / math.sqrt(errs.size)) \
            if errs.size > 1 else math.nan
        means.append(mean)
        rows.append((int(L), "sigma_v", mean, mean - half, mean + half, int(errs.size), cfg.seed))
    if len(cfg.L_grid) > 1:
        xs = np.log([r.grid_value for r in records])
        ys = np.log([r.outcomes["spectral_error"] for r in records])
        fit = stats.linregress(xs, ys)
        slope, stderr, intercept, r2 = fit.slope, fit.stderr, fit.intercept, fit.rvalue ** 2
        slope_of_means = np.polyfit(np.log(cfg.L_grid), np.log(means), 1)[0]
    else:
        # a single snapshot count carries no rate information
        slope = stderr = intercept = r2 = slope_of_means = math.nan
    per_trial = {}
    for t in range(cfg.trials):
        errs = [r.outcomes["spectral_error"] for r in records if r.trial == t]
        per_trial[t] = bool(errs[-1] < errs[0])
    summary = {
        "kind": cfg.kind,
        "slope": float(slope),
        "slope_stderr": float(stderr),
        "intercept": float(intercept),
        "r_squared": float(r2),
        "slope_of_means": float(slope_of_means),
        "last_below_first_every_trial": all(per_trial.values()),
        "oracle_gate": {"passed": gate["passed"], "max_z": gate["max_z"], "L": gate["L"]},
    }
    return ExperimentResult(cfg, rows, records, summary)


RUNNERS = {
    "single_snapshot_sweep": run_single_snapshot_sweep,
    "moment_sweep": run_moment_sweep,
    "concentration_study": run_concentration_study,
}


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    log.info("running %s with %d trials", cfg.kind, cfg.trials)
    return RUNNERS[cfg.kind](cfg)


def plot_script(result: ExperimentResult, csv_name: str) -> str:
    """gnuplot script drawing the CSV as one curve per party."""
    cfg = result.config
    parties = list(dict.fromkeys(row[1] for row in result.rows))
    if cfg.kind == "single_snapshot_sweep":
        xlabel, ylabel, logx = "alpha = M/(pN)", "success rate", False
    elif cfg.kind == "moment_sweep":
        xlabel, ylabel, logx = "snapshots L", "structure recovery rate", True
    else:
        xlabel, ylabel, logx = "snapshots L", "spectral error", True
    lines = [
        "set datafile separator ','",
        f"set xlabel '{xlabel}'",
        f"set ylabel '{ylabel}'",
        "set key left top",
        "set grid",
    ]
    if logx:
        lines.append("set logscale x")
    if cfg.kind == "concentration_study":
        lines.append("set logscale y")
    else:
        lines.append("set yrange [-0.05:1.05]")
    curves = [
        f"'{csv_name}' every ::1 using 1:(strcol(2) eq '{party}' ? $3 : 1/0):4:5 with yerrorlines title '{party}'"
        for party in parties
    ]
    lines.append("plot " + ", \\\n     ".join(curves))
    return "\n".join(lines) + "\n"


def _json_safe(value):
    """Replace non-finite floats by None so the summary stays strict JSON."""
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


def write_outputs(result: ExperimentResult, output: Optional[str] = None) -> dict:
    """Write the CSV, a JSON summary and a gnuplot script next to each other."""
    path = Path(output or result.config.output or f"{result.config.kind}.csv")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(result.csv_text())
    summary_path = path.with_suffix(".summary.json")
    summary = dict(result.summary)
    summary["config"] = {k: (list(v) if isinstance(v, tuple) else v)
                         for k, v in asdict(result.config).items() if k not in ("output", "workers")}
    summary_path.write_text(json.dumps(_json_safe(summary), indent=2, sort_keys=True, allow_nan=False) + "\n")
    plot_path = path.with_suffix(".gp")
    plot_path.write_text(plot_script(result, path.name))
    return {"csv": str(path), "summary": str(summary_path), "plot": str(plot_path)}
