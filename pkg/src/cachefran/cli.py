"""Command-line harness: single runs, Monte-Carlo sweeps and initial-point checks.

Subcommands::

    cachefran run        one scenario, one or more schemes
    cachefran sweep      eta x fronthaul grid, paired trials, aggregate CSV
    cachefran init-check initial-point search only

Sweep outputs (in ``--out``)::

    trials.csv              one row per (scheme, eta, fronthaul, trial)
    aggregate.csv           mean / std over successful trials
    convergence_<tag>.csv   iterate logs, only with ``--trace``
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import math
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .driver import SCHEMES, RunResult, algorithm2_init, run_scheme
from .scenario import ConfigError, ScenarioConfig, load_config, make_scenario

log = logging.getLogger("cachefran")

DEFAULT_ETAS = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2)
DEFAULT_FRONTHAUL = (50.0, 1000.0)
DESK_TRIALS = 20
FULL_TRIALS = 100

TRIAL_COLUMNS = (
    "scheme", "eta", "fronthaul_mbps", "trial", "seed", "status", "sum_rate_mbps",
    "p_busy_w", "p_total_w", "objective", "n_outer", "n_middle", "n_inner", "n_expand",
    "active_errh", "active_links",
)
AGGREGATE_COLUMNS = (
    "scheme", "eta", "fronthaul_mbps", "trials", "failures",
    "sum_rate_mean", "sum_rate_std", "p_busy_mean", "p_busy_std",
    "objective_mean", "objective_std", "n_outer_mean", "n_middle_mean", "n_inner_mean",
    "active_errh_mean",
)
CONVERGENCE_COLUMNS = ("section", "outer", "middle", "index", "objective", "max_slack", "millis")
CONVERGENCE_SECTIONS = ("inner", "middle", "outer")


# ----------------------------------------------------------------------------
# Sweep description
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepSpec:
    etas: tuple[float, ...] = DEFAULT_ETAS
    fronthaul_mbps: tuple[float, ...] = DEFAULT_FRONTHAUL
    trials: int = DESK_TRIALS
    schemes: tuple[str, ...] = SCHEMES
    seed_base: int = 0
    out_dir: str = "results"

    def __post_init__(self):
        if not self.etas or not self.fronthaul_mbps or not self.schemes:
            raise ConfigError("sweep lists (etas, fronthaul_mbps, schemes) must be non-empty")
        if int(self.trials) < 1:
            raise ConfigError("trials must be >= 1")
        unknown = [s for s in self.schemes if s not in SCHEMES]
        if unknown:
            raise ConfigError(f"unknown scheme {unknown[0]!r}; expected a subset of {SCHEMES}")
        if any(not (e >= 0 and math.isfinite(e)) for e in self.etas):
            raise ConfigError("eta values must be finite and non-negative")
        if any(not (c > 0 and math.isfinite(c)) for c in self.fronthaul_mbps):
            raise ConfigError("fronthaul capacities must be finite and positive")

    @classmethod
    def from_mapping(cls, data: dict) -> "SweepSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown sweep key: {unknown[0]}")
        kw = dict(data)
        for key in ("etas", "fronthaul_mbps"):
            if key in kw:
                kw[key] = tuple(float(v) for v in _as_list(kw[key]))
        if "schemes" in kw:
            kw["schemes"] = tuple(str(v) for v in _as_list(kw["schemes"]))
        for key in ("trials", "seed_base"):
            if key in kw:
                kw[key] = int(kw[key])
        return cls(**kw)

    @classmethod
    def from_yaml(cls, path: str | Path) -> "SweepSpec":
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError("sweep file must be a mapping")
        return cls.from_mapping(data)


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


# ----------------------------------------------------------------------------
# Records
# ----------------------------------------------------------------------------

@dataclass
class TrialRecord:
    scheme: str
    eta: float
    fronthaul_mbps: float
    trial: int
    seed: int
    status: str
    sum_rate_mbps: float
    p_busy_w: float
    p_total_w: float
    objective: float
    n_outer: int
    n_middle: int
    n_inner: int
    n_expand: int
    active_errh: int
    active_links: int

    @property
    def ok(self) -> bool:
        return self.status in ("converged", "max-iterations")

    def row(self) -> list[str]:
        return [_fmt(getattr(self, c)) for c in TRIAL_COLUMNS]


@dataclass
class AggregateRow:
    scheme: str
    eta: float
    fronthaul_mbps: float
    trials: int
    failures: int
    sum_rate_mean: float
    sum_rate_std: float
    p_busy_mean: float
    p_busy_std: float
    objective_mean: float
    objective_std: float
    n_outer_mean: float
    n_middle_mean: float
    n_inner_mean: float
    active_errh_mean: float

    def row(self) -> list[str]:
        return [_fmt(getattr(self, c)) for c in AGGREGATE_COLUMNS]


@dataclass
class SweepResult:
    aggregates: list[AggregateRow]
    trials: list[TrialRecord]
    runs: dict[tuple, RunResult] = field(default_factory=dict)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def record_of(run: RunResult, eta: float, fronthaul: float, trial: int, seed: int) -> TrialRecord:
    return TrialRecord(
        scheme=run.scheme, eta=float(eta), fronthaul_mbps=float(fronthaul), trial=int(trial),
        seed=int(seed), status=run.status, sum_rate_mbps=float(run.sum_rate),
        p_busy_w=float(run.p_busy), p_total_w=float(run.p_total), objective=float(run.objective),
        n_outer=run.n_outer, n_middle=run.n_middle, n_inner=run.n_inner, n_expand=run.n_expand,
        active_errh=run.active_errh, active_links=int(np.sum(run.association)))


def aggregate(records: list[TrialRecord]) -> list[AggregateRow]:
    """Mean / population std per (scheme, eta, fronthaul); failed trials only counted."""
    groups: dict[tuple, list[TrialRecord]] = {}
    for r in records:
        groups.setdefault((r.scheme, r.eta, r.fronthaul_mbps), []).append(r)
    rows = []
    for (scheme, eta, fh), recs in groups.items():
        good = [r for r in recs if r.ok]

        def stat(name, fn):
            vals = np.array([getattr(r, name) for r in good], dtype=float)
            return float(fn(vals)) if vals.size else math.nan

        rows.append(AggregateRow(
            scheme=scheme, eta=eta, fronthaul_mbps=fh, trials=len(good),
            failures=len(recs) - len(good),
            sum_rate_mean=stat("sum_rate_mbps", np.mean), sum_rate_std=stat("sum_rate_mbps", np.std),
            p_busy_mean=stat("p_busy_w", np.mean), p_busy_std=stat("p_busy_w", np.std),
            objective_mean=stat("objective", np.mean), objective_std=stat("objective", np.std),
            n_outer_mean=stat("n_outer", np.mean), n_middle_mean=stat("n_middle", np.mean),
            n_inner_mean=stat("n_inner", np.mean), active_errh_mean=stat("active_errh", np.mean)))
    return rows


# ----------------------------------------------------------------------------
# Output
# ----------------------------------------------------------------------------

def write_atomic(path: str | Path, text: str) -> Path:
    """Write via a temporary sibling file and rename; nothing is left on failure."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def convergence_rows(run: RunResult) -> list[list[str]]:
    rows = []
    for section in CONVERGENCE_SECTIONS:
        for r in run.log.level(section):
            rows.append([section, str(r.outer), str(r.middle), str(r.index), repr(r.objective),
                         repr(r.max_slack), f"{r.millis:.3f}"])
    return rows


def emit_convergence(run: RunResult, path: str | Path) -> Path:
    """Inner, middle and outer objective sequences as one sectioned CSV."""
    return write_atomic(path, _csv_text(CONVERGENCE_COLUMNS, convergence_rows(run)))


def write_sweep(result: SweepResult, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trials = write_atomic(out / "trials.csv",
                          _csv_text(TRIAL_COLUMNS, [r.row() for r in result.trials]))
    agg = write_atomic(out / "aggregate.csv",
                       _csv_text(AGGREGATE_COLUMNS, [a.row() for a in result.aggregates]))
    return agg, trials


# ----------------------------------------------------------------------------
# Sweep execution
# ----------------------------------------------------------------------------

def _trial_job(job):
    """Every scheme and grid point of one trial index on one set of draws."""
    cfg, spec, trial, keep_runs = job
    seed = spec.seed_base + trial
    base = make_scenario(cfg, seed)
    out = []
    for fh in spec.fronthaul_mbps:
        for eta in spec.etas:
            sc = base.with_config(eta=eta, fronthaul_capacity=fh)
            for scheme in spec.schemes:
                try:
                    run = run_scheme(scheme, sc)
                except Exception as exc:  # recorded as a failed trial
                    log.warning("trial %d %s eta=%g fh=%g failed: %s", trial, scheme, eta, fh, exc)
                    out.append((TrialRecord(scheme, eta, fh, trial, seed, "error", *[math.nan] * 4,
                                            0, 0, 0, 0, 0, 0), None))
                    continue
                out.append((record_of(run, eta, fh, trial, seed), run if keep_runs else None))
    return out


def run_sweep(spec: SweepSpec, cfg: ScenarioConfig | None = None, workers: int = 1,
              keep_runs: bool = False) -> SweepResult:
    """Paired Monte-Carlo trials: all schemes of a trial share one channel and cache draw."""
    cfg = cfg or ScenarioConfig()
    jobs = [(cfg, spec, t, keep_runs) for t in range(spec.trials)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_trial_job, jobs))
    else:
        results = [_trial_job(j) for j in jobs]
    records, runs = [], {}
    for trial_out in results:
        for rec, run in trial_out:
            records.append(rec)
            if run is not None:
                runs[(rec.scheme, rec.eta, rec.fronthaul_mbps, rec.trial)] = run
    order = {s: i for i, s in enumerate(spec.schemes)}
    records.sort(key=lambda r: (r.fronthaul_mbps, r.eta, order[r.scheme], r.trial))
    return SweepResult(aggregates=aggregate(records), trials=records, runs=runs)


# ----------------------------------------------------------------------------
# Command line
# ----------------------------------------------------------------------------

def _config(args) -> ScenarioConfig:
    cfg = load_config(args.config) if args.config else ScenarioConfig()
    changes = {}
    if getattr(args, "eta", None) is not None:
        changes["eta"] = args.eta
    if getattr(args, "fronthaul_mbps", None) is not None:
        changes["fronthaul_capacity"] = args.fronthaul_mbps
    return cfg.replace(**changes) if changes else cfg


def _summary(run: RunResult) -> str:
    return (f"{run.scheme:8s} {run.status:15s} sum_rate={run.sum_rate:8.2f} Mb/s "
            f"P_busy={run.p_busy:8.2f} W  P1={run.objective:10.4f}  "
            f"outer={run.n_outer} middle={run.n_middle} inner={run.n_inner} "
            f"active_errh={run.active_errh}"
            f"\n         fronthaul exact={np.round(run.fronthaul, 2).tolist()}"
            f"\n         fronthaul approx={np.round(run.fronthaul_approx, 2).tolist()}")


def cmd_run(args) -> int:
    cfg = _config(args)
    seed = cfg.rng_seed if args.seed is None else args.seed
    scenario = make_scenario(cfg, seed)
    schemes = args.scheme or ["alg1-c"]
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    status = 0
    for scheme in schemes:
        run = run_scheme(scheme, scenario)
        print(_summary(run))
        if not run.ok:
            status = 1
        if args.trace:
            if out is None:
                raise SystemExit("--trace needs --out")
            path = emit_convergence(run, out / f"convergence_{scheme}_seed{seed}.csv")
            print(f"wrote {path}")
    return status


def cmd_sweep(args) -> int:
    cfg = _config(args)
    spec = SweepSpec.from_yaml(args.spec) if args.spec else SweepSpec()
    changes = {}
    if args.trials is not None:
        changes["trials"] = args.trials
    elif args.full:
        changes["trials"] = FULL_TRIALS
    if args.seed is not None:
        changes["seed_base"] = args.seed
    if args.out:
        changes["out_dir"] = args.out
    if args.scheme:
        changes["schemes"] = tuple(args.scheme)
    if args.eta is not None:
        changes["etas"] = (args.eta,)
    if args.fronthaul_mbps is not None:
        changes["fronthaul_mbps"] = (args.fronthaul_mbps,)
    spec = dataclasses.replace(spec, **changes)
    result = run_sweep(spec, cfg, workers=args.workers, keep_runs=args.trace)
    agg, trials = write_sweep(result, spec.out_dir)
    for (scheme, eta, fh, trial), run in sorted(result.runs.items()):
        emit_convergence(run, Path(spec.out_dir) / f"convergence_{scheme}_eta{eta:g}_fh{fh:g}_{trial}.csv")
    for a in result.aggregates:
        print(f"{a.scheme:8s} eta={a.eta:<8g} C_fh={a.fronthaul_mbps:<7g} "
              f"rate={a.sum_rate_mean:8.2f}+-{a.sum_rate_std:6.2f}  "
              f"P_busy={a.p_busy_mean:8.2f}+-{a.p_busy_std:6.2f}  failures={a.failures}")
    print(f"wrote {agg} and {trials}")
    return 0


def cmd_init_check(args) -> int:
    cfg = _config(args)
    seed = cfg.rng_seed if args.seed is None else args.seed
    trials = args.trials or 1
    bad = 0
    for t in range(trials):
        sc = make_scenario(cfg, seed + t)
        init = algorithm2_init(sc)
        worst = init.feasibility.worst if init.feasibility is not None else math.nan
        print(f"seed={seed + t} status={init.status} min_ratio={init.min_ratio:.6f} "
              f"sum_rate={float(np.sum(init.R)):.2f} worst_slack={worst:.3e} "
              f"retried={init.retried}")
        bad += not init.ok
    return 1 if bad else 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file with scenario constants")
    common.add_argument("--seed", type=int, help="draw seed (sweep: seed base)")
    common.add_argument("--eta", type=float, help="rate/power trade-off weight")
    common.add_argument("--fronthaul-mbps", type=float, help="fronthaul capacity of every eRRH")
    common.add_argument("--scheme", action="append", choices=SCHEMES,
                        help="scheme to run; repeat for several")
    common.add_argument("--out", help="output directory")
    common.add_argument("--trace", action="store_true", help="write convergence CSV files")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="cachefran", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", parents=[common], help="one scenario")
    run.set_defaults(func=cmd_run)
    sw = sub.add_parser("sweep", parents=[common], help="Monte-Carlo sweep")
    sw.add_argument("spec", nargs="?", help="sweep YAML (etas, fronthaul_mbps, trials, ...)")
    sw.add_argument("--trials", type=int)
    sw.add_argument("--full", action="store_true", help=f"{FULL_TRIALS} trials")
    sw.add_argument("--workers", type=int, default=1)
    sw.set_defaults(func=cmd_sweep)
    ic = sub.add_parser("init-check", parents=[common], help="initial-point search only")
    ic.add_argument("--trials", type=int)
    ic.set_defaults(func=cmd_init_check)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
