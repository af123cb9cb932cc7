"""Data ingestion, run configuration and on-disk artefacts."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .diagnostics import RunSummary, aggregate_runs, kde_export, summarize_cloud, write_density_csv
from .engine import EngineAbort, EngineConfig, TemperRecord, estimate_log_marginal_likelihood, run_aisil
from .factor import FactorHmcKernel, FactorPgKernel, FactorSvModel, normalize_loading_signs
from .hmc import HmcConfig
from .rng import RngStream
from .ssm import ConfigError
from .sv import SvHmcKernel, SvModel, SvPgKernel

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)


class DataError(ValueError):
    """Malformed or unusable input data."""


# -- CSV ----------------------------------------------------------------------------

def load_returns(path, mode: str = "returns") -> Tuple[np.ndarray, List[str]]:
    """Read a CSV with a header row of series names.

    ``mode="prices"`` converts to log returns (one row fewer); ``"returns"``
    passes values through.  Returns ``(y, names)`` with ``y`` of shape ``(T, S)``.
    """
    if mode not in ("prices", "returns"):
        raise ConfigError(f"mode must be 'prices' or 'returns', got {mode!r}")
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise DataError(f"{path}: empty file")
        names = [h.strip() for h in header]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(names):
                raise DataError(f"{path}:{lineno}: expected {len(names)} fields, found {len(row)}")
            vals = []
            for col, cell in enumerate(row):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: non-numeric value {cell!r} in column {names[col]!r}") from None
                if not np.isfinite(v):
                    raise DataError(f"{path}:{lineno}: missing or non-finite value in column {names[col]!r}")
                vals.append(v)
            rows.append(vals)
    data = np.array(rows, dtype=float).reshape(len(rows), len(names))
    if mode == "prices":
        if data.shape[0] < 3:
            raise DataError(f"{path}: prices mode needs at least 3 rows, found {data.shape[0]}")
        if np.any(data <= 0):
            raise DataError(f"{path}: prices must be positive")
        data = np.diff(np.log(data), axis=0)
    elif data.shape[0] < 2:
        raise DataError(f"{path}: need at least 2 return rows, found {data.shape[0]}")
    return data, names


def write_matrix_csv(path, header: Sequence[str], matrix) -> None:
    """Write with shortest round-trip float formatting so reloads are bit-exact."""
    m = np.atleast_2d(np.asarray(matrix, dtype=float))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in m:
            w.writerow([repr(float(v)) for v in row])


# -- configuration --------------------------------------------------------------------


@dataclass
class RunConfig:
    model: str = "sv"
    n_factors: int = 1
    kernel: str = "pg"
    n_cloud: int = 560
    n_particles: int = 250
    n_moves: int = 10
    n_leapfrog: int = 100
    step_size: float = 0.1
    target_accept: float = 0.65
    adapt_gain: float = 1.0
    ess_fraction: float = 0.8
    grid_size: int = 1000
    max_stages: int = 5000
    seeds: List[int] = field(default_factory=lambda: [1])
    data: Optional[str] = None
    mode: str = "returns"
    out: str = "runs"
    block_rows: int = 64

    def validate(self) -> None:
        if self.model not in ("sv", "factor"):
            raise ConfigError(f"model must be 'sv' or 'factor', got {self.model!r}")
        if self.kernel not in ("pg", "hmc"):
            raise ConfigError(f"kernel must be 'pg' or 'hmc', got {self.kernel!r}")
        for name in ("n_cloud", "n_particles", "n_moves", "n_leapfrog", "grid_size", "max_stages", "block_rows"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.model == "factor" and self.n_factors < 1:
            raise ConfigError("n_factors must be >= 1")
        if not 0.0 < self.ess_fraction < 1.0:
            raise ConfigError("ess_fraction must lie in (0, 1)")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be a non-empty list of distinct integers")
        if self.mode not in ("prices", "returns"):
            raise ConfigError(f"mode must be 'prices' or 'returns', got {self.mode!r}")

    def engine_config(self) -> EngineConfig:
        return EngineConfig(n_particles=self.n_cloud, ess_fraction=self.ess_fraction, grid_size=self.grid_size,
                            n_moves=self.n_moves, max_stages=self.max_stages)

    def hmc_config(self) -> HmcConfig:
        return HmcConfig(n_leapfrog=self.n_leapfrog, step_size=self.step_size,
                         target_accept=self.target_accept, adapt_gain=self.adapt_gain)


def load_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    """Flat TOML file plus overrides (``None`` values are ignored)."""
    values: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                values = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.validate()
    return cfg


# -- experiments ----------------------------------------------------------------------

def build_model_and_kernel(cfg: RunConfig, y: np.ndarray):
    if cfg.model == "sv":
        if y.ndim == 2:
            if y.shape[1] != 1:
                raise ConfigError(f"sv model needs a single series, data has {y.shape[1]}")
            y = y[:, 0]
        model = SvModel(y)
        kernel = SvPgKernel(model, cfg.n_particles, cfg.block_rows) if cfg.kernel == "pg" else SvHmcKernel(model, cfg.hmc_config())
    else:
        model = FactorSvModel(y, cfg.n_factors)
        kernel = (FactorPgKernel(model, cfg.n_particles, cfg.block_rows) if cfg.kernel == "pg"
                  else FactorHmcKernel(model, cfg.hmc_config()))
    return model, kernel


def _param_columns(thetas: Dict[str, np.ndarray]):
    names, cols = [], []
    for k, v in thetas.items():
        v = np.asarray(v, float)
        if v.ndim == 1:
            names.append(k)
            cols.append(v)
        else:
            flat = v.reshape(v.shape[0], -1)
            for j, idx in enumerate(np.ndindex(*v.shape[1:])):
                names.append(k + "_" + "_".join(str(i + 1) for i in idx))
                cols.append(flat[:, j])
    return names, np.column_stack(cols)


def run_single(cfg: RunConfig, y: np.ndarray, seed: int, run_dir: Path) -> RunSummary:
    """One tempering run; writes draws, ladder, summary, timing and densities."""
    run_dir.mkdir(parents=True, exist_ok=True)
    model, kernel = build_model_and_kernel(cfg, y)
    t0 = time.perf_counter()
    try:
        cloud, record = run_aisil(model, kernel, cfg.engine_config(), RngStream(seed))
    except EngineAbort as exc:
        (run_dir / "ladder.json").write_text(exc.record.to_json(indent=2))
        (run_dir / "PARTIAL").write_text(str(exc) + "\n")
        raise
    elapsed = time.perf_counter() - t0
    logz = estimate_log_marginal_likelihood(record)
    if cfg.model == "factor":
        thetas, states = normalize_loading_signs(cloud.thetas, cloud.states)
        cloud = dataclasses.replace(cloud, thetas=thetas, states=states)
    summary = summarize_cloud(cloud, seed, logz, record.n_stages, cfg.model)

    names, mat = _param_columns(cloud.thetas)
    write_matrix_csv(run_dir / "draws.csv", names + ["weight"], np.column_stack([mat, cloud.weights]))
    for key, paths in cloud.states.items():
        paths = np.asarray(paths, float)
        mean = np.tensordot(cloud.weights, paths, axes=(0, 0)).reshape(-1, paths.shape[-1]).T
        header = [key] if mean.shape[1] == 1 else [f"{key}_{i + 1}" for i in range(mean.shape[1])]
        write_matrix_csv(run_dir / f"state_mean_{key}.csv", header, mean)
    (run_dir / "ladder.json").write_text(record.to_json(indent=2))
    (run_dir / "summary.json").write_text(summary.to_json())
    (run_dir / "timing.json").write_text(json.dumps({"seconds": elapsed, "stages": record.n_stages}, indent=2))
    kde_dir = run_dir / "kde"
    kde_dir.mkdir(exist_ok=True)
    for j, name in enumerate(names):
        grid, dens = kde_export(mat[:, j], weights=cloud.weights)
        write_density_csv(kde_dir / f"{name}.csv", grid, dens)
    return summary


def run_experiment(cfg: RunConfig) -> dict:
    """Run every seed into ``out/seed_<seed>`` and write the aggregate table."""
    if cfg.data is None:
        raise ConfigError("no data path configured")
    y, names = load_returns(cfg.data, cfg.mode)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(dataclasses.asdict(cfg), indent=2, sort_keys=True))
    summaries = [run_single(cfg, y, s, out / f"seed_{s}") for s in cfg.seeds]
    agg = aggregate_runs(summaries)
    write_aggregate(agg, out)
    return agg


def write_aggregate(agg: dict, out: Path) -> None:
    (out / "aggregate.json").write_text(json.dumps(agg, indent=2, sort_keys=True))
    with open(out / "aggregate.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["parameter", "posterior_mean", "posterior_sd", "between_run_sd"])
        for k, means in agg["posterior_mean"].items():
            for i, m in enumerate(means):
                label = k if len(means) == 1 else f"{k}_{i + 1}"
                w.writerow([label, repr(m), repr(agg["posterior_sd"][k][i]), repr(agg["between_run_sd"][k][i])])
        w.writerow(["log_evidence", repr(agg["log_evidence_mean"]), "", repr(agg["log_evidence_sd"])])
        w.writerow(["stages", repr(agg["mean_stages"]), "", ""])


def load_summaries(paths: Sequence) -> List[RunSummary]:
    """Summaries from run directories (or directories holding ``seed_*`` runs)."""
    found = []
    for p in map(Path, paths):
        files = [p / "summary.json"] if (p / "summary.json").exists() else sorted(p.glob("seed_*/summary.json"))
        if not files:
            raise DataError(f"no summary.json under {p}")
        found.extend(files)
    try:
        return [RunSummary.from_json(f.read_text()) for f in found]
    except (ValueError, TypeError) as exc:
        raise DataError(f"unreadable summary: {exc}") from exc
