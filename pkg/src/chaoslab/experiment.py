"""Sweep orchestration: plans, the chaos-rate pipeline, rate fits, and
CSV/manifest emission.

A plan sweeps the particle count n (the expensive axis); each sweep point
solves the mean-field law once, reuses it for every (k, t) requested, and
emits entropy, bound, horizon and consistency-check rows. Points run in a
worker pool but derive all randomness from value-based stream keys and are
assembled in plan order, so output is identical for any thread count.
"""

from __future__ import annotations

import csv
import json
import math
import os
import traceback
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from .bounds import constant_C, estimate_beta, hierarchy_ode_solve, short_time_horizon, theorem_bound
from .core import ConfigError, RngStream, SimConfig, config_from_dict, _pop_key
from .dynamics import (
    BlowupError,
    extract_marginal,
    sample_reference_marginals,
    simulate_particle_system,
    solve_mckean_vlasov_picard,
)
from .measure import (
    entropy_girsanov,
    entropy_knn,
    girsanov_weight,
    pinsker_and_subadditivity_check,
    tv_histogram,
)

_ESTIMATORS = ("girsanov", "knn", "histogram_tv")
# universal constant of the fractional-horizon bound; the proof does not
# pin a value, this matches the worked arithmetic examples
_HORIZON_C = 16.0


@dataclass(frozen=True)
class ExperimentPlan:
    base: SimConfig
    sweep_n: tuple[int, ...]
    sweep_k: tuple[int, ...]
    sweep_t: tuple[float, ...]
    estimators: tuple[str, ...] = ("girsanov",)
    picard_m: int = 10_000
    picard_iters: int = 3
    knn_neighbors: int = 4
    knn_samples: int = 10_000
    tv_bins: int = 32
    bound_c0: float = 0.05
    bound_gamma: float = 1.0
    bound_m: float = 1.0
    kappa: float = 1.0
    label: str = "run"

    def __post_init__(self):
        for est in self.estimators:
            if est not in _ESTIMATORS:
                raise ConfigError(f"unknown estimator {est!r}; valid: {_ESTIMATORS}")
        if self.sweep_n and not self.sweep_t:
            raise ConfigError("sweep_t must not be empty when sweep_n is nonempty")
        for n in self.sweep_n:
            if n < 2:
                raise ConfigError("swept n must be >= 2")
        kmax = min(self.sweep_n) if self.sweep_n else None
        for k in self.sweep_k:
            if k < 1:
                raise ConfigError("swept k must be >= 1")
            if kmax is not None and k > kmax:
                raise ConfigError(f"swept k = {k} exceeds the smallest swept n = {kmax}")
        grid_times = self.base.grid.times()
        for t in self.sweep_t:
            if float(np.min(np.abs(grid_times - t))) > 1e-9:
                raise ConfigError(f"sweep time {t} is not a grid point")
        if self.picard_m < 100:
            raise ConfigError("picard_m must be >= 100")
        if self.picard_iters < 1:
            raise ConfigError("picard_iters must be >= 1")


def plan_from_dict(data: dict) -> ExperimentPlan:
    """Fail-closed plan parsing: unknown keys are errors, types checked."""
    if not isinstance(data, dict):
        raise ConfigError("plan must be a JSON object")
    work = dict(data)
    base = config_from_dict(_pop_key(work, "base", dict))
    # nested sections are copied before popping so caller dicts stay intact
    sweep = dict(_pop_key(work, "sweep", dict))
    sweep_n = tuple(int(v) for v in _pop_key(sweep, "n", list))
    sweep_k = tuple(int(v) for v in _pop_key(sweep, "k", list, default=[1]))
    sweep_t = tuple(float(v) for v in _pop_key(sweep, "t", list, default=[base.grid.terminal]))
    if sweep:
        raise ConfigError(f"unknown sweep keys: {sorted(sweep)}")
    estimators = tuple(str(v) for v in _pop_key(work, "estimators", list, default=["girsanov"]))
    picard = dict(_pop_key(work, "picard", dict, default={}))
    picard_m = int(_pop_key(picard, "m", (int, float), default=10_000))
    picard_iters = int(_pop_key(picard, "iters", (int, float), default=3))
    if picard:
        raise ConfigError(f"unknown picard keys: {sorted(picard)}")
    knn = dict(_pop_key(work, "knn", dict, default={}))
    knn_neighbors = int(_pop_key(knn, "neighbors", (int, float), default=4))
    knn_samples = int(_pop_key(knn, "samples", (int, float), default=10_000))
    if knn:
        raise ConfigError(f"unknown knn keys: {sorted(knn)}")
    tv = dict(_pop_key(work, "tv", dict, default={}))
    tv_bins = int(_pop_key(tv, "bins", (int, float), default=32))
    if tv:
        raise ConfigError(f"unknown tv keys: {sorted(tv)}")
    bounds = dict(_pop_key(work, "bounds", dict, default={}))
    bound_c0 = float(_pop_key(bounds, "C0", (int, float), default=0.05))
    bound_gamma = float(_pop_key(bounds, "gamma", (int, float), default=1.0))
    bound_m = float(_pop_key(bounds, "M", (int, float), default=1.0))
    kappa = float(_pop_key(bounds, "kappa", (int, float), default=1.0))
    if bounds:
        raise ConfigError(f"unknown bounds keys: {sorted(bounds)}")
    label = str(_pop_key(work, "label", str, default="run"))
    if work:
        raise ConfigError(f"unknown plan keys: {sorted(work)}")
    return ExperimentPlan(
        base=base,
        sweep_n=sweep_n,
        sweep_k=sweep_k,
        sweep_t=sweep_t,
        estimators=estimators,
        picard_m=picard_m,
        picard_iters=picard_iters,
        knn_neighbors=knn_neighbors,
        knn_samples=knn_samples,
        tv_bins=tv_bins,
        bound_c0=bound_c0,
        bound_gamma=bound_gamma,
        bound_m=bound_m,
        kappa=kappa,
        label=label,
    )


def load_plan(path: str) -> ExperimentPlan:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    return plan_from_dict(data)


@dataclass
class RunResult:
    entropy_rows: list[dict] = field(default_factory=list)
    bound_rows: list[dict] = field(default_factory=list)
    horizon_rows: list[dict] = field(default_factory=list)
    check_rows: list[dict] = field(default_factory=list)
    manifest: dict = field(default_factory=dict)
    errors: list[dict] = field(default_factory=list)
    any_blowup: bool = False
    any_unreliable: bool = False
    any_check_failed: bool = False


def _point_rows(plan: ExperimentPlan, n: int) -> dict:
    """All rows for one sweep point. Randomness is keyed by (seed, n), so
    the result is independent of scheduling."""
    cfg = replace(plan.base, n_particles=n)
    rng = RngStream(cfg.seed, counter=n)
    grid = cfg.grid
    ks = [k for k in plan.sweep_k if k <= n]
    t_steps = [grid.index_of(t) for t in plan.sweep_t]
    times = grid.times()

    out = {
        "entropy": [],
        "bounds": [],
        "horizons": [],
        "checks": [],
        "unreliable": False,
        "check_failed": False,
        "provenance": {
            "n": n,
            "seed": cfg.seed,
            "dt": grid.dt,
            "eps": cfg.effective_eps,
            "replicas": cfg.replicas,
            "picard_m": plan.picard_m,
            "picard_iters": plan.picard_iters,
            "knn_neighbors": plan.knn_neighbors,
            "knn_samples": plan.knn_samples,
            "tv_bins": plan.tv_bins,
        },
    }

    mf = solve_mckean_vlasov_picard(
        cfg, rng, m=plan.picard_m, iters=plan.picard_iters, snapshot_times=plan.sweep_t
    )
    out["provenance"]["picard_residuals"] = [float(r) for r in mf.residuals]
    out["provenance"]["picard_non_convergent"] = mf.non_convergent

    def entropy_row(t, k, estimator, value, stderr, ess):
        out["entropy"].append(
            {
                "t": t,
                "n": n,
                "k": k,
                "estimator": estimator,
                "value": value,
                "stderr": stderr,
                "ess": ess,
                "eps": cfg.effective_eps,
                "dt": grid.dt,
                "seed": cfg.seed,
            }
        )

    gw = None
    full_reports = {}
    if "girsanov" in plan.estimators:
        gw = girsanov_weight(cfg, mf, rng)
        for step in t_steps:
            t = float(times[step])
            mean_z, se_z, z_score = gw.martingale_check(step)
            ok = abs(z_score) <= 3.0
            out["checks"].append(
                {
                    "n": n,
                    "k": n,
                    "t": t,
                    "check": "martingale",
                    "passed": ok,
                    "margin": 3.0 - abs(z_score),
                    "value": mean_z,
                    "threshold": 1.0,
                }
            )
            if not ok:
                out["check_failed"] = True
            full = entropy_girsanov(gw, k=n, step=step)
            full_reports[step] = full
            if full.unreliable:
                out["unreliable"] = True
            for k in ks:
                rep = entropy_girsanov(gw, k=k, step=step)
                entropy_row(t, k, "girsanov", rep.value, rep.stderr, rep.params["ess"])

        regime = "fractional" if cfg.noise.kind == "fbm" else "brownian"
        energy = gw.volterra_energy if gw.volterra_energy is not None else gw.drift_energy
        hurst = cfg.noise.hurst if cfg.noise.kind == "fbm" else None
        bf = estimate_beta(energy, n=n, delta=grid.terminal - grid.t0, hurst=hurst)
        hz = short_time_horizon(plan.kappa, bf.beta, regime=regime, hurst=hurst, C=_HORIZON_C)
        out["horizons"].append(
            {
                "n": n,
                "regime": regime,
                "kappa": plan.kappa,
                "beta": bf.beta,
                "hurst": "" if hurst is None else hurst,
                "delta_star": hz.delta_star,
                "fit_residual": bf.residual,
            }
        )

    knn_reports = {}
    tv_reports = {}
    if "knn" in plan.estimators or "histogram_tv" in plan.estimators:
        ens = simulate_particle_system(cfg, rng, snapshot_times=plan.sweep_t)
        max_k = max(ks)
        refs = sample_reference_marginals(
            cfg, mf, plan.knn_samples * max_k, rng, snapshot_times=plan.sweep_t
        )
        torus = cfg.domain.is_torus
        d = cfg.domain.dim
        for step in t_steps:
            t = float(times[step])
            for k in ks:
                p_samp = extract_marginal(ens, k, t)
                q_samp = refs[step][: plan.knn_samples * k].reshape(plan.knn_samples, k * d)
                if "knn" in plan.estimators:
                    rep = entropy_knn(p_samp, q_samp, neighbors=plan.knn_neighbors, torus=torus)
                    rep.k, rep.n, rep.t = k, n, t
                    knn_reports[(step, k)] = rep
                    entropy_row(t, k, "knn", rep.value, rep.stderr, "")
                if "histogram_tv" in plan.estimators and k * d <= 4:
                    rep = tv_histogram(p_samp, q_samp, bins_per_dim=plan.tv_bins, torus=torus)
                    rep.k, rep.n, rep.t = k, n, t
                    tv_reports[(step, k)] = rep
                    entropy_row(t, k, "histogram_tv", rep.value, rep.stderr, "")

    # consistency: Pinsker + subadditivity when all three reports exist
    for step in t_steps:
        t = float(times[step])
        full = full_reports.get(step)
        if full is None:
            continue
        for k in ks:
            rep_h = knn_reports.get((step, k))
            if rep_h is None:
                rep_h = entropy_girsanov(gw, k=k, step=step)
            rep_tv = tv_reports.get((step, k))
            if rep_tv is None:
                continue
            # sparse histograms (many bins per sample) inflate TV by pure
            # binning noise; the ceiling comparison is only meaningful with
            # ~10+ samples per bin, so skip the check (the TV row remains)
            bins_total = plan.tv_bins ** (k * cfg.domain.dim)
            if bins_total * 10 > min(cfg.replicas, plan.knn_samples):
                continue
            rec = pinsker_and_subadditivity_check(rep_h, rep_tv, full)
            out["checks"].append(
                {
                    "n": n,
                    "k": k,
                    "t": t,
                    "check": "pinsker",
                    "passed": rec.pinsker_margin >= 0,
                    "margin": rec.pinsker_margin,
                    "value": rec.details["tv"],
                    "threshold": rec.details["pinsker_ceiling"],
                }
            )
            out["checks"].append(
                {
                    "n": n,
                    "k": k,
                    "t": t,
                    "check": "subadditivity",
                    "passed": rec.subadditivity_margin >= 0,
                    "margin": rec.subadditivity_margin,
                    "value": rec.details["h_k"],
                    "threshold": rec.details["subadditivity_rhs"],
                }
            )
            if not rec.passed:
                out["check_failed"] = True

    # closed-form and cascade envelopes on the same (k, t) lattice
    t_max = max(plan.sweep_t)
    gamma = plan.bound_gamma
    h0 = np.array([plan.bound_c0 * k * k / (n * n) for k in range(1, n + 1)])
    casc_dt = grid.dt if gamma <= 0 else min(grid.dt, 1.0 / (2.0 * gamma * n))
    cascade = hierarchy_ode_solve(n, plan.bound_m, gamma, h0, t_max, casc_dt)
    for t in plan.sweep_t:
        c_t = constant_C(plan.bound_c0, gamma, plan.bound_m, t)
        ci = int(np.argmin(np.abs(cascade.times - t)))
        for k in ks:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                closed = theorem_bound(c_t, gamma, t, n, k)
            out["bounds"].append(
                {
                    "n": n,
                    "k": k,
                    "t": t,
                    "closed_form": closed,
                    "cascade": cascade.at(k, ci),
                    "C": c_t,
                    "gamma": gamma,
                    "M": plan.bound_m,
                }
            )
    return out


def run_experiment(plan: ExperimentPlan, threads: int = 1) -> RunResult:
    """Execute every sweep point, assemble rows in plan order.

    A failing point is recorded (with its exception) and the remaining
    points still run; nothing is written to disk here, see write_result.
    """
    threads = max(1, int(threads))
    result = RunResult()
    point_results: dict[int, dict] = {}
    point_errors: dict[int, dict] = {}

    def _safe(n: int):
        try:
            return n, _point_rows(plan, n), None
        except Exception as exc:  # noqa: BLE001 - per-point isolation is the contract
            kind = (
                "blowup"
                if isinstance(exc, BlowupError)
                else "config"
                if isinstance(exc, ConfigError)
                else "runtime"
            )
            return n, None, {"n": n, "kind": kind, "error": repr(exc), "trace": traceback.format_exc(limit=5)}

    if threads == 1 or len(plan.sweep_n) <= 1:
        outcomes = [_safe(n) for n in plan.sweep_n]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(_safe, plan.sweep_n))
    for n, rows, err in outcomes:
        if err is not None:
            point_errors[n] = err
        else:
            point_results[n] = rows

    provenance = {}
    for n in plan.sweep_n:
        if n in point_errors:
            result.errors.append(point_errors[n])
            if point_errors[n]["kind"] == "blowup":
                result.any_blowup = True
            continue
        rows = point_results[n]
        result.entropy_rows.extend(rows["entropy"])
        result.bound_rows.extend(rows["bounds"])
        result.horizon_rows.extend(rows["horizons"])
        result.check_rows.extend(rows["checks"])
        result.any_unreliable |= rows["unreliable"]
        result.any_check_failed |= rows["check_failed"]
        provenance[str(n)] = rows["provenance"]

    result.entropy_rows.sort(key=lambda r: (r["t"], r["n"], r["k"], r["estimator"]))
    result.bound_rows.sort(key=lambda r: (r["n"], r["k"], r["t"]))
    result.check_rows.sort(key=lambda r: (r["n"], r["k"], r["t"], r["check"]))
    result.horizon_rows.sort(key=lambda r: r["n"])

    result.manifest = {
        "label": plan.label,
        "version": __version__,
        "seed": plan.base.seed,
        "sweep": {"n": list(plan.sweep_n), "k": list(plan.sweep_k), "t": list(plan.sweep_t)},
        "estimators": list(plan.estimators),
        "bounds": {
            "C0": plan.bound_c0,
            "gamma": plan.bound_gamma,
            "M": plan.bound_m,
            "kappa": plan.kappa,
        },
        "grid": {"t0": plan.base.grid.t0, "dt": plan.base.grid.dt, "steps": plan.base.grid.steps},
        "noise": {"kind": plan.base.noise.kind, "hurst": plan.base.noise.hurst},
        "points": provenance,
        "errors": result.errors,
        "row_counts": {
            "entropy": len(result.entropy_rows),
            "bounds": len(result.bound_rows),
            "horizons": len(result.horizon_rows),
            "checks": len(result.check_rows),
        },
    }
    return result


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    # np.float64 subclasses float but reprs as np.float64(...); coerce first
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def _write_csv(path: str, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c, "")) for c in columns])


def write_result(result: RunResult, out_dir: str) -> dict[str, str]:
    """Write entropy/bounds/horizons/checks CSVs and manifest.json."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    spec = {
        "entropy.csv": (result.entropy_rows, ["t", "n", "k", "estimator", "value", "stderr", "ess", "eps", "dt", "seed"]),
        "bounds.csv": (result.bound_rows, ["n", "k", "t", "closed_form", "cascade", "C", "gamma", "M"]),
        "horizons.csv": (result.horizon_rows, ["n", "regime", "kappa", "beta", "hurst", "delta_star", "fit_residual"]),
        "checks.csv": (result.check_rows, ["n", "k", "t", "check", "passed", "margin", "value", "threshold"]),
    }
    for name, (rows, cols) in spec.items():
        path = os.path.join(out_dir, name)
        _write_csv(path, rows, cols)
        paths[name] = path
    mpath = os.path.join(out_dir, "manifest.json")
    with open(mpath, "w", encoding="utf-8") as fh:
        json.dump(result.manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths["manifest.json"] = mpath
    return paths


@dataclass(frozen=True)
class RateFit:
    """OLS power-law fit on (log x, log H)."""

    slope: float
    intercept: float
    r_squared: float
    residuals: np.ndarray
    axis: str
    n_points: int
    n_excluded: int
    no_trend: bool = False


def fit_rate(points, axis: str = "n") -> RateFit:
    """Least-squares slope of log H against log x.

    Points with H <= 0 (or non-finite entries) are excluded and counted;
    at least 3 usable points are required. A constant H yields slope 0
    with r_squared 0 and the no_trend flag set.
    """
    pts = [(float(x), float(h)) for x, h in points]
    usable = [(x, h) for x, h in pts if h > 0 and math.isfinite(h) and x > 0 and math.isfinite(x)]
    excluded = len(pts) - len(usable)
    if len(usable) < 3:
        raise ValueError(f"need >= 3 usable points, have {len(usable)} ({excluded} excluded)")
    lx = np.log([x for x, _ in usable])
    lh = np.log([h for _, h in usable])
    design = np.column_stack([lx, np.ones_like(lx)])
    coef, *_ = np.linalg.lstsq(design, lh, rcond=None)
    slope, intercept = float(coef[0]), float(coef[1])
    fitted = design @ coef
    resid = lh - fitted
    ss_res = float(np.sum(resid**2))
    ss_tot = float(np.sum((lh - lh.mean()) ** 2))
    if ss_tot == 0.0:
        return RateFit(0.0, float(lh[0]), 0.0, resid, axis, len(usable), excluded, no_trend=True)
    r2 = max(0.0, min(1.0, 1.0 - ss_res / ss_tot))
    return RateFit(slope, intercept, r2, resid, axis, len(usable), excluded)
