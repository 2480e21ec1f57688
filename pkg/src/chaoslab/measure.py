"""Chaos diagnostics: change-of-measure weights, entropy and
total-variation estimators, and the concentration-inequality toolkit.

The central construction simulates n independent copies of the
(approximate) mean-field law and tilts them by the exponential martingale
of the drift difference

    delta_b(t, X) = (n-1)^{-1} sum_{j != i} b(t, X^i, X^j) - <b(t, X^i, .), mu_t>.

Because delta_b is evaluated at the current reference state, the tilted
law is exactly the interacting particle law (up to Euler error), so
E_Q[Z log Z] estimates H(P^(n) | mu^{x n}). For Hurst index H != 1/2 the
tilt lives on the underlying Brownian driver: the running drift integral
is pushed through the inverse Volterra transform and integrated against
the retained driver increments. In both cases the integrand at step s
depends only on draws strictly before s, so E[Z] = 1 holds exactly in
distribution, at every step size.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .core import RngStream, SimConfig, TimeGrid, sample_initial, wrap_torus_unchecked
from .dynamics import (
    BLOCK_REPLICAS,
    BlowupError,
    MeanFieldLaw,
    _P_WEIGHT,
    _P_WEIGHT_FBM,
    _first_nonfinite,
)
from .kernels import build_drift
from .noise import sample_fbm_batch, volterra_inverse_apply

__all__ = [
    "GirsanovWeight",
    "EntropyReport",
    "CheckRecord",
    "log_weights_from_deltas",
    "girsanov_weight",
    "entropy_girsanov",
    "entropy_knn",
    "tv_histogram",
    "concentration_bounds",
    "pinsker_and_subadditivity_check",
    "reduced_pinsker_check",
]

_JITTER_SEED = 12345
_ESS_FLOOR = 0.05


@dataclass
class GirsanovWeight:
    """Per-replica log-weights log Z_t on the grid (replicas, steps+1)."""

    grid: TimeGrid
    log_z: np.ndarray
    n: int
    noise_kind: str
    hurst: float
    drift_name: str
    seed: int
    quality_flag: str | None = None
    # per-(replica, particle) int_0^T |delta_b|^2 dt, for beta moment fits
    drift_energy: np.ndarray | None = None  # (replicas, n)
    # fractional only: same integral for the transformed integrand delta_K
    volterra_energy: np.ndarray | None = None  # (replicas, n)

    @property
    def replicas(self) -> int:
        return self.log_z.shape[0]

    def weights_at(self, step: int) -> np.ndarray:
        return np.exp(self.log_z[:, step])

    def martingale_check(self, step: int | None = None) -> tuple[float, float, float]:
        """(mean Z, stderr, z-score of the deviation from 1)."""
        idx = self.grid.steps if step is None else step
        z = self.weights_at(idx)
        mean = float(np.mean(z))
        stderr = float(np.std(z, ddof=1) / math.sqrt(z.size))
        score = 0.0 if stderr == 0 else (mean - 1.0) / stderr
        return mean, stderr, score


@dataclass
class EntropyReport:
    kind: str  # "girsanov" | "knn" | "histogram_tv"
    value: float
    stderr: float
    k: int
    n: int
    t: float
    params: dict = field(default_factory=dict)
    unreliable: bool = False


def log_weights_from_deltas(delta: np.ndarray, dw: np.ndarray, dt: float) -> np.ndarray:
    """Accumulate log Z on the grid from drift-difference and driver
    increments of shape (..., steps, q): left-point Ito sums

        log Z_{s+1} = log Z_s + delta_s . dW_s - |delta_s|^2 dt / 2.
    """
    if delta.shape != dw.shape:
        raise ValueError("delta and dw must have matching shapes")
    incr = np.sum(delta * dw, axis=-1) - 0.5 * dt * np.sum(delta * delta, axis=-1)
    zeros = np.zeros(incr.shape[:-1] + (1,))
    return np.concatenate([zeros, np.cumsum(incr, axis=-1)], axis=-1)


def girsanov_weight(
    config: SimConfig,
    mean_field: MeanFieldLaw,
    rng: RngStream,
    n: int | None = None,
    replicas: int | None = None,
    noise_method: str = "cholesky",
) -> GirsanovWeight:
    """Simulate replicas of n independent mean-field copies and accumulate
    the exponential-martingale log-weight of the interacting system
    relative to them.

    The reference copies evolve with drift b0 + <b(t, x, .), mu_t-hat>;
    the weight integrand is the pairwise interaction evaluated on those
    same copies minus the mean-field term (b0 cancels). Fractional noise
    retains the underlying Brownian driver and pushes the running drift
    integral through the inverse Volterra transform first.
    """
    drift = mean_field.drift
    if drift.name != build_drift(config).name:
        raise ValueError("mean_field was built for a different drift")
    n = config.n_particles if n is None else int(n)
    r_total = config.replicas if replicas is None else int(replicas)
    if n < 2:
        raise ValueError("interacting weight needs n >= 2")
    grid = config.grid
    d = config.domain.dim
    torus = config.domain.is_torus
    dt = grid.dt
    times = grid.times()
    steps = grid.steps
    fractional = config.noise.kind == "fbm" and config.noise.hurst != 0.5
    hurst = config.noise.hurst if fractional else 0.5

    log_z = np.empty((r_total, steps + 1))
    energy = np.empty((r_total, n))
    k_energy = np.empty((r_total, n)) if fractional else None
    quality = None
    if fractional:
        quality = "fractional weight: inverse Volterra transform carries O(dt) quadrature error"

    for block_idx, lo in enumerate(range(0, r_total, BLOCK_REPLICAS)):
        b = min(BLOCK_REPLICAS, r_total - lo)
        stream = rng.for_replica(block_idx)
        gen = stream.for_particle(_P_WEIGHT).generator()
        states = sample_initial(config.initial_law, config.domain, (b, n), gen)
        if torus:
            states = wrap_torus_unchecked(states)

        if fractional:
            vals, w_paths, fell_back = sample_fbm_batch(
                grid, hurst, d, b * n, stream.for_particle(_P_WEIGHT_FBM), method=noise_method, with_driver=True
            )
            if fell_back:
                quality = "fractional weight: circulant embedding not PSD, dense factor used"
            db_incr = np.diff(vals, axis=1).reshape(b, n, steps, d)
            dw_incr = np.diff(w_paths, axis=1).reshape(b, n, steps, d)
            delta_store = np.empty((b, n, d, steps))
        else:
            lz = np.zeros(b)
            en = np.zeros((b, n))
            lz_path = np.empty((b, steps + 1))
            lz_path[:, 0] = 0.0

        if fractional:
            for s in range(steps):
                t = float(times[s])
                delta = drift.pair_mean_generic(t, states) - mean_field.mean_drift_at(s, t, states)
                delta_store[..., s] = delta
                ref = mean_field.reference_drift_at(s, t, states)
                states = states + dt * ref + db_incr[:, :, s, :]
                if torus:
                    states = wrap_torus_unchecked(states)
                if not np.all(np.isfinite(states)):
                    _first_nonfinite(states, s + 1)
            # running integral of delta_b, then the inverse Volterra map
            h = np.concatenate(
                [np.zeros((b, n, d, 1)), np.cumsum(delta_store * dt, axis=-1)], axis=-1
            )
            dk = volterra_inverse_apply(h, hurst, grid)  # (b, n, d, steps)
            dwt = dw_incr.transpose(0, 1, 3, 2)  # (b, n, d, steps)
            incr = np.sum(dk * dwt, axis=(1, 2)) - 0.5 * dt * np.sum(dk * dk, axis=(1, 2))
            lz_path = np.concatenate(
                [np.zeros((b, 1)), np.cumsum(incr, axis=-1)], axis=-1
            )
            en = dt * np.sum(delta_store * delta_store, axis=(2, 3))
            k_energy[lo : lo + b] = dt * np.sum(dk * dk, axis=(2, 3))
        else:
            for s in range(steps):
                t = float(times[s])
                delta = drift.pair_mean_generic(t, states) - mean_field.mean_drift_at(s, t, states)
                dw = math.sqrt(dt) * gen.standard_normal((b, n, d))
                lz += np.sum(delta * dw, axis=(1, 2)) - 0.5 * dt * np.sum(delta * delta, axis=(1, 2))
                en += dt * np.sum(delta * delta, axis=2)
                ref = mean_field.reference_drift_at(s, t, states)
                states = states + dt * ref + dw
                if torus:
                    states = wrap_torus_unchecked(states)
                if not np.all(np.isfinite(states)):
                    _first_nonfinite(states, s + 1)
                lz_path[:, s + 1] = lz

        if not np.all(np.isfinite(lz_path)):
            bad = np.argwhere(~np.isfinite(lz_path))[0]
            raise BlowupError(int(bad[1]), int(bad[0]))
        log_z[lo : lo + b] = lz_path
        energy[lo : lo + b] = en

    return GirsanovWeight(
        grid=grid,
        log_z=log_z,
        n=n,
        noise_kind=config.noise.kind,
        hurst=hurst,
        drift_name=drift.name,
        seed=rng.root_seed,
        quality_flag=quality,
        drift_energy=energy,
        volterra_energy=k_energy,
    )


def entropy_girsanov(
    weights: GirsanovWeight,
    k: int,
    t: float | None = None,
    step: int | None = None,
) -> EntropyReport:
    """Importance-weighted entropy estimate E_Q[Z log Z] with the
    (k/n)-scaled subadditivity surrogate for the k-marginal.

    Z - 1 has exact mean zero (the weight is a martingale by
    construction), so it serves as a control variate: the reported value
    is mean(Z log Z - lambda (Z - 1)) with the plug-in optimal lambda,
    which removes the dominant O(sqrt(H)) noise term and leaves O(H)
    fluctuations. The raw mean is kept in params. The estimator is a
    replica mean, so the jackknife standard error coincides with
    std/sqrt(R) up to the lambda plug-in; the effective sample size
    (sum Z)^2 / sum Z^2 below 5% of replicas flags the report.
    """
    n = weights.n
    if not 1 <= k <= n:
        raise ValueError("need 1 <= k <= n")
    if step is None:
        step = weights.grid.steps if t is None else weights.grid.index_of(t)
    t_val = float(weights.grid.times()[step])
    r = weights.replicas
    if r < 1000:
        warnings.warn(f"only {r} replicas; the estimator is designed for >= 1000", stacklevel=2)
    lz = weights.log_z[:, step]
    z = np.exp(lz)
    y = z * lz
    raw_h = float(np.mean(y))
    raw_stderr = float(np.std(y, ddof=1) / math.sqrt(r))
    ctrl = z - 1.0
    var_c = float(np.var(ctrl))
    lam = float(np.mean((y - y.mean()) * ctrl) / var_c) if var_c > 0 else 0.0
    yc = y - lam * ctrl
    h_full = float(np.mean(yc))
    stderr_full = float(np.std(yc, ddof=1) / math.sqrt(r))
    ess = float(np.sum(z) ** 2 / np.sum(z * z)) if np.any(z > 0) else 0.0
    unreliable = ess < _ESS_FLOOR * r
    mean_z = float(np.mean(z))
    stderr_z = float(np.std(z, ddof=1) / math.sqrt(r))
    frac = k / n
    return EntropyReport(
        kind="girsanov",
        value=frac * h_full,
        stderr=frac * stderr_full,
        k=k,
        n=n,
        t=t_val,
        params={
            "replicas": r,
            "ess": ess,
            "h_full": h_full,
            "stderr_full": stderr_full,
            "raw_h_full": raw_h,
            "raw_stderr_full": raw_stderr,
            "control_lambda": lam,
            "mean_z": mean_z,
            "stderr_z": stderr_z,
            "surrogate": "subadditivity",
            "quality_flag": weights.quality_flag,
        },
        unreliable=unreliable,
    )


def _knn_distances(tree: cKDTree, pts: np.ndarray, k: int, exclude_self: bool) -> np.ndarray:
    kk = k + 1 if exclude_self else k
    dist, _ = tree.query(pts, k=kk, workers=1)
    return dist[:, -1]


def entropy_knn(
    samples_p: np.ndarray,
    samples_q: np.ndarray,
    neighbors: int = 4,
    torus: bool = False,
) -> EntropyReport:
    """k-nearest-neighbor KL divergence estimate D(P || Q) from samples.

    Wang-Kulkarni-Verdu form: (d/N) sum log(nu_k / rho_k) + log(M/(N-1)),
    with rho_k the in-sample and nu_k the cross-sample k-NN distances.
    Torus samples use wrapped distances. Duplicate points are jittered at
    1e-12 scale with a fixed-seed generator and the event is recorded.
    """
    p = np.ascontiguousarray(np.atleast_2d(np.asarray(samples_p, dtype=float)))
    q = np.ascontiguousarray(np.atleast_2d(np.asarray(samples_q, dtype=float)))
    if p.ndim != 2 or q.ndim != 2 or p.shape[1] != q.shape[1]:
        raise ValueError("sample sets must be 2-d with matching dimension")
    n_p, dim = p.shape
    n_q = q.shape[0]
    if min(n_p, n_q) < 100:
        raise ValueError("need at least 100 samples on each side")
    if not 1 <= neighbors < min(n_p, n_q):
        raise ValueError("neighbors out of range")

    jittered = False
    for _ in range(2):
        if torus:
            boxsize = 1.0
            p_t = np.mod(p + 0.5, 1.0)
            q_t = np.mod(q + 0.5, 1.0)
            tree_p = cKDTree(p_t, boxsize=boxsize)
            tree_q = cKDTree(q_t, boxsize=boxsize)
            rho = _knn_distances(tree_p, p_t, neighbors, exclude_self=True)
            nu = _knn_distances(tree_q, p_t, neighbors, exclude_self=False)
        else:
            tree_p = cKDTree(p)
            tree_q = cKDTree(q)
            rho = _knn_distances(tree_p, p, neighbors, exclude_self=True)
            nu = _knn_distances(tree_q, p, neighbors, exclude_self=False)
        if np.all(rho > 0) and np.all(nu > 0):
            break
        gen = np.random.Generator(np.random.Philox(_JITTER_SEED))
        p = p + 1e-12 * gen.standard_normal(p.shape)
        q = q + 1e-12 * gen.standard_normal(q.shape)
        jittered = True
    else:
        raise ValueError("zero nearest-neighbor distances persist after jitter")

    logs = np.log(nu / rho)
    value = float(dim * np.mean(logs) + math.log(n_q / (n_p - 1)))
    stderr = float(dim * np.std(logs, ddof=1) / math.sqrt(n_p))
    return EntropyReport(
        kind="knn",
        value=value,
        stderr=stderr,
        k=1,
        n=0,
        t=math.nan,
        params={
            "neighbors": neighbors,
            "size_p": n_p,
            "size_q": n_q,
            "dim": dim,
            "torus": torus,
            "jittered": jittered,
            "bias_note": "stderr covers MC scatter only, not the kNN bias",
        },
    )


def tv_histogram(
    samples_p: np.ndarray,
    samples_q: np.ndarray,
    bins_per_dim: int = 64,
    ranges: list[tuple[float, float]] | None = None,
    torus: bool = False,
) -> EntropyReport:
    """Half-L1 distance between normalized histograms on shared bins.

    Refuses dimension > 4: the histogram partition is hopeless there,
    use entropy_knn with the Pinsker inequality instead.
    """
    p = np.atleast_2d(np.asarray(samples_p, dtype=float))
    q = np.atleast_2d(np.asarray(samples_q, dtype=float))
    if p.ndim != 2 or q.ndim != 2 or p.shape[1] != q.shape[1]:
        raise ValueError("sample sets must be 2-d with matching dimension")
    dim = p.shape[1]
    if dim > 4:
        raise ValueError("histogram TV refuses dim > 4; use entropy_knn plus Pinsker")
    if bins_per_dim < 2:
        raise ValueError("need at least 2 bins per dimension")
    if torus:
        ranges = [(-0.5, 0.5)] * dim
    elif ranges is None:
        lo = np.minimum(p.min(axis=0), q.min(axis=0))
        hi = np.maximum(p.max(axis=0), q.max(axis=0))
        pad = 1e-9 * np.maximum(1.0, np.abs(hi))
        ranges = [(float(a), float(b + c)) for a, b, c in zip(lo, hi, pad)]
    edges = [np.linspace(a, b, bins_per_dim + 1) for a, b in ranges]
    hp, _ = np.histogramdd(p, bins=edges)
    hq, _ = np.histogramdd(q, bins=edges)
    fp = hp / p.shape[0]
    fq = hq / q.shape[0]
    value = 0.5 * float(np.sum(np.abs(fp - fq)))
    var = np.sum(fp * (1 - fp)) / p.shape[0] + np.sum(fq * (1 - fq)) / q.shape[0]
    stderr = 0.5 * math.sqrt(max(var, 0.0))
    return EntropyReport(
        kind="histogram_tv",
        value=value,
        stderr=stderr,
        k=1,
        n=0,
        t=math.nan,
        params={
            "bins_per_dim": bins_per_dim,
            "size_p": p.shape[0],
            "size_q": q.shape[0],
            "dim": dim,
            "ranges": [list(r) for r in ranges],
            "mass_p": float(np.sum(fp)),
            "mass_q": float(np.sum(fq)),
        },
    )


def concentration_bounds(kind: str, **params) -> float:
    """Evaluate one of the closed-form concentration bounds exactly.

    kinds: "hoeffding" (n, eps, b), "moment" (q, v),
    "drift_integral" (p, beta, delta, n), "fractional" (p, beta, delta,
    n, hurst). Overflow returns +inf with a warning.
    """

    def _pos(name):
        v = float(params[name])
        if v <= 0:
            raise ValueError(f"{name} must be positive")
        return v

    def _int_ge1(name):
        v = params[name]
        if int(v) != v or int(v) < 1:
            raise ValueError(f"{name} must be an integer >= 1")
        return int(v)

    try:
        if kind == "hoeffding":
            n, eps, b = _int_ge1("n"), _pos("eps"), _pos("b")
            return math.exp(-n * eps * eps / (2.0 * b * b))
        if kind == "moment":
            q, v = _int_ge1("q"), _pos("v")
            return 2.0 * math.factorial(q) * (2.0 * v) ** q
        if kind == "drift_integral":
            p, beta, delta, n = _int_ge1("p"), _pos("beta"), _pos("delta"), _int_ge1("n")
            return math.factorial(p) * beta**p * delta**p / n**p
        if kind == "fractional":
            p, beta, delta, n = _int_ge1("p"), _pos("beta"), _pos("delta"), _int_ge1("n")
            hurst = float(params["hurst"])
            if not 0.0 < hurst < 1.0:
                raise ValueError("hurst must lie in (0, 1)")
            return math.factorial(p) * beta**p * delta ** ((2.0 - 2.0 * hurst) * p) / n**p
    except OverflowError:
        warnings.warn(f"{kind} bound overflowed to +inf", stacklevel=2)
        return math.inf
    raise ValueError(f"unknown bound kind {kind!r}")


@dataclass(frozen=True)
class CheckRecord:
    passed: bool
    pinsker_margin: float
    subadditivity_margin: float
    details: dict


def pinsker_and_subadditivity_check(
    report_h: EntropyReport,
    report_tv: EntropyReport,
    h_full: EntropyReport,
    tolerance: float | None = None,
) -> CheckRecord:
    """Assert TV <= sqrt(2 H_k) and H_k <= (k/n) H_full, with margins.

    When tolerance is None, each comparison absorbs 3 standard errors of
    the quantities involved; an explicit tolerance replaces that slack.
    """
    if (report_h.k, report_h.n) != (report_tv.k, report_tv.n) and report_tv.n != 0:
        raise ValueError("k/n metadata mismatch between entropy and TV reports")
    if h_full.n != report_h.n or h_full.k != h_full.n:
        raise ValueError("h_full must be the full-system report for the same n")
    if not math.isnan(report_tv.t) and abs(report_tv.t - report_h.t) > 1e-9:
        raise ValueError("time mismatch between entropy and TV reports")

    h_k = max(report_h.value, 0.0)
    if tolerance is None:
        ceiling = math.sqrt(2.0 * max(h_k + 3.0 * report_h.stderr, 0.0)) + 3.0 * report_tv.stderr
    else:
        ceiling = math.sqrt(2.0 * h_k) + tolerance
    pinsker_margin = ceiling - report_tv.value

    frac = report_h.k / report_h.n
    if tolerance is None:
        slack = 3.0 * (report_h.stderr + frac * h_full.params.get("stderr_full", h_full.stderr))
    else:
        slack = tolerance
    sub_rhs = frac * h_full.params.get("h_full", h_full.value) + slack
    subadd_margin = sub_rhs - report_h.value

    passed = pinsker_margin >= 0.0 and subadd_margin >= 0.0
    return CheckRecord(
        passed=passed,
        pinsker_margin=pinsker_margin,
        subadditivity_margin=subadd_margin,
        details={
            "tv": report_tv.value,
            "pinsker_ceiling": ceiling,
            "h_k": report_h.value,
            "subadditivity_rhs": sub_rhs,
            "k": report_h.k,
            "n": report_h.n,
        },
    )


def reduced_pinsker_check(
    samples_mu: np.ndarray,
    samples_nu: np.ndarray,
    phi,
    h_est: float,
) -> dict:
    """Weighted-Pinsker residual: RHS - LHS of
    (int phi d(mu - nu))^2 <= 4 [ (1/6) int phi^2 dmu + (1/3) int phi^2 dnu ] H.

    Both sides are Monte Carlo estimates; the residual should be >=
    -(sampling tolerance). Note the left side uses the signed difference
    of means, a lower bound for the |mu - nu| integral the inequality
    controls.
    """
    fm = np.asarray(phi(np.asarray(samples_mu)), dtype=float).ravel()
    fn = np.asarray(phi(np.asarray(samples_nu)), dtype=float).ravel()
    lhs = float((np.mean(fm) - np.mean(fn)) ** 2)
    c = float(np.mean(fm**2) / 6.0 + np.mean(fn**2) / 3.0)
    rhs = float(4.0 * c * h_est)
    return {"lhs": lhs, "rhs": rhs, "C": c, "h": h_est, "residual": rhs - lhs}
