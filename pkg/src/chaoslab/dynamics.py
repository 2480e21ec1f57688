"""Euler-Maruyama integration of the n-particle system and Picard
construction of the approximate mean-field reference law.

Replicas are integrated in fixed-size blocks (BLOCK_REPLICAS); each block
owns one value-keyed random stream, so results are independent of memory
layout, scheduling and thread count. Block size is part of the sampling
scheme and is never adapted at runtime.

Interacting drifts go through DriftSpec.pair_mean_generic: built-ins with
separable structure (linear, trigonometric kernels) use exact O(n)
rearrangements of the pairwise sum; everything else takes the O(n^2) path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import RngStream, SimConfig, TimeGrid, sample_initial, wrap_torus_unchecked
from .kernels import DriftSpec, build_drift
from .noise import sample_fbm_batch

BLOCK_REPLICAS = 1024
PATH_BLOCK = 4096
# Generic (non-separable) mean-field drifts need the whole Picard ensemble
# in memory; refuse silently huge requests.
MAX_ENSEMBLE_ELEMENTS = 8_000_000

# Internal stream keying: every consumer of randomness gets a dedicated id
# in the particle slot, with the caller's counter preserved, so keys are
# (block, purpose, caller_counter). Distinct purposes or distinct caller
# counters can never collide, and the arity-3 spawn key keeps internals
# independent of any generator made directly from a caller-level stream.
_P_SIM = 0
_P_SIM_FBM = 1
_P_REF = 2
_P_REF_FBM = 3
_P_PICARD_INIT = 4
_P_WEIGHT = 8
_P_WEIGHT_FBM = 9
_P_PICARD_BASE = 100  # + iterate index
_P_PICARD_FBM_BASE = 200  # + iterate index


class BlowupError(RuntimeError):
    """Simulation produced a non-finite state."""

    def __init__(self, step: int, particle: int):
        super().__init__(f"non-finite state at step {step}, particle {particle}")
        self.step = step
        self.particle = particle


def _first_nonfinite(states: np.ndarray, step: int) -> None:
    bad = ~np.isfinite(states)
    if bad.any():
        idx = np.argwhere(bad)[0]
        particle = int(idx[-2]) if states.ndim >= 2 else 0
        raise BlowupError(step, particle)


@dataclass
class ParticleEnsemble:
    grid: TimeGrid
    domain_kind: str
    n: int
    replicas: int
    drift_name: str
    eps: float
    truncation_radius: int
    noise_kind: str
    hurst: float
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)  # step -> (R, n, d)
    paths: np.ndarray | None = None  # (R, n, steps+1, d) when retained
    sup_x: np.ndarray | None = None  # (R, n) running sup of |X| at T
    sup_w: np.ndarray | None = None  # (R, n) running sup of |W| at T

    def positions_at(self, step: int) -> np.ndarray:
        if self.paths is not None:
            return self.paths[:, :, step, :]
        if step in self.snapshots:
            return self.snapshots[step]
        raise KeyError(f"step {step} was not recorded; request it via snapshot_times")


def extract_marginal(ensemble: ParticleEnsemble, k: int, t: float) -> np.ndarray:
    """Positions of the first k particles at time t, one row per replica.

    Shape (replicas, k*d); exchangeability makes the choice of the first k
    representative.
    """
    if not 1 <= k <= ensemble.n:
        raise ValueError("need 1 <= k <= n")
    idx = ensemble.grid.index_of(t)
    pos = ensemble.positions_at(idx)
    r = pos.shape[0]
    return pos[:, :k, :].reshape(r, -1).copy()


def _snapshot_steps(grid: TimeGrid, snapshot_times) -> list[int]:
    if snapshot_times is None:
        return [grid.steps]
    steps = sorted({grid.index_of(float(t)) for t in snapshot_times} | {grid.steps})
    return steps


def _block_noise_brownian(gen: np.random.Generator, shape: tuple[int, ...], dt: float) -> np.ndarray:
    return math.sqrt(dt) * gen.standard_normal(shape)


def simulate_particle_system(
    config: SimConfig,
    rng: RngStream,
    snapshot_times=None,
    retain_paths: bool = False,
    track_sups: bool = False,
    noise_method: str = "circulant",
) -> ParticleEnsemble:
    """Integrate the interacting n-particle system over all replicas.

    Initial positions are i.i.d. from the configured initial law. The drift
    is b0 plus the (n-1)^{-1}-normalized pairwise interaction; torus states
    are wrapped every step. Non-finite states abort with the offending
    (step, particle).
    """
    drift = build_drift(config)
    grid = config.grid
    n, d = config.n_particles, config.domain.dim
    r_total = config.replicas
    torus = config.domain.is_torus
    dt = grid.dt
    times = grid.times()
    snap_steps = set(_snapshot_steps(grid, snapshot_times)) | {0}

    ens = ParticleEnsemble(
        grid=grid,
        domain_kind=config.domain.kind,
        n=n,
        replicas=r_total,
        drift_name=drift.name,
        eps=config.effective_eps,
        truncation_radius=config.truncation_radius,
        noise_kind=config.noise.kind,
        hurst=config.noise.hurst if config.noise.kind == "fbm" else 0.5,
    )
    for s in snap_steps:
        ens.snapshots[s] = np.empty((r_total, n, d))
    if retain_paths:
        if r_total * n * (grid.steps + 1) * d > MAX_ENSEMBLE_ELEMENTS:
            raise MemoryError("retain_paths would exceed the in-memory budget; record snapshot_times instead")
        ens.paths = np.empty((r_total, n, grid.steps + 1, d))
    if track_sups:
        if torus:
            raise ValueError("running sup norms are tracked on R^d only")
        ens.sup_x = np.empty((r_total, n))
        ens.sup_w = np.empty((r_total, n))

    fractional = config.noise.kind == "fbm" and config.noise.hurst != 0.5

    for block_idx, lo in enumerate(range(0, r_total, BLOCK_REPLICAS)):
        b = min(BLOCK_REPLICAS, r_total - lo)
        stream = rng.for_replica(block_idx)
        gen = stream.for_particle(_P_SIM).generator()
        states = sample_initial(config.initial_law, config.domain, (b, n), gen)
        if torus:
            states = wrap_torus_unchecked(states)

        fbm_incr = None
        if fractional:
            # One fGn series per (replica, particle, coordinate), drawn from
            # a dedicated stream so the step loop stays Brownian-free.
            vals, _, _ = sample_fbm_batch(
                grid, config.noise.hurst, d, b * n, stream.for_particle(_P_SIM_FBM), method=noise_method
            )
            fbm_incr = np.diff(vals, axis=1).reshape(b, n, grid.steps, d)

        if track_sups:
            sup_x = np.linalg.norm(states, axis=-1)
            sup_w = np.zeros((b, n))
            w_cum = np.zeros((b, n, d))

        if 0 in snap_steps:
            ens.snapshots[0][lo : lo + b] = states
        if retain_paths:
            ens.paths[lo : lo + b, :, 0, :] = states

        for s in range(grid.steps):
            t = float(times[s])
            total = drift.pair_mean_generic(t, states) if drift.pair_state is not None else np.zeros_like(states)
            if drift.b0_state is not None:
                total = total + drift.b0_state(t, states)
            dw = fbm_incr[:, :, s, :] if fractional else _block_noise_brownian(gen, (b, n, d), dt)
            states = states + dt * total + dw
            if torus:
                states = wrap_torus_unchecked(states)
            elif track_sups:
                w_cum += dw
                np.maximum(sup_x, np.linalg.norm(states, axis=-1), out=sup_x)
                np.maximum(sup_w, np.linalg.norm(w_cum, axis=-1), out=sup_w)
            if not np.all(np.isfinite(states)):
                _first_nonfinite(states, s + 1)
            if (s + 1) in snap_steps:
                ens.snapshots[s + 1][lo : lo + b] = states
            if retain_paths:
                ens.paths[lo : lo + b, :, s + 1, :] = states

        if track_sups:
            ens.sup_x[lo : lo + b] = sup_x
            ens.sup_w[lo : lo + b] = sup_w
    return ens


# ---------------------------------------------------------------------------
# Mean-field reference law
# ---------------------------------------------------------------------------


@dataclass
class MeanFieldLaw:
    """Ensemble approximation of the McKean-Vlasov law.

    The drift of a fresh independent copy is b0 + mean_drift_at; the mean
    field enters either through small per-step summaries (separable
    built-ins, exact rearrangement) or through the retained ensemble states
    (generic drifts).
    """

    grid: TimeGrid
    domain_kind: str
    drift: DriftSpec
    m: int
    iters: int
    residuals: list[float]
    non_convergent: bool
    summaries: np.ndarray | None  # (steps+1, q)
    ens_paths: np.ndarray | None  # (m, steps+1, d)
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)  # step -> (m, d)

    def mean_drift_at(self, idx: int, t: float, x: np.ndarray) -> np.ndarray:
        """<b(t, x, .), mu_t-hat>: the interaction averaged over the ensemble."""
        if self.drift.pair_state is None:
            return np.zeros_like(x)
        if self.summaries is not None:
            return self.drift.mf_drift(t, x, self.summaries[idx])
        assert self.ens_paths is not None
        return self.drift.mean_field_drift(t, x, self.ens_paths[:, idx, :], None)

    def reference_drift_at(self, idx: int, t: float, x: np.ndarray) -> np.ndarray:
        total = self.mean_drift_at(idx, t, x)
        if self.drift.b0_state is not None:
            total = total + self.drift.b0_state(t, x)
        return total


def _w1_marginal(a: np.ndarray, b: np.ndarray) -> float:
    """Max over coordinates of the 1-d Wasserstein-1 distance between
    equally sized samples (sorted-difference formula)."""
    out = 0.0
    for c in range(a.shape[-1]):
        out = max(out, float(np.mean(np.abs(np.sort(a[:, c]) - np.sort(b[:, c])))))
    return out


def solve_mckean_vlasov_picard(
    config: SimConfig,
    rng: RngStream,
    m: int = 10_000,
    iters: int = 3,
    snapshot_times=None,
) -> MeanFieldLaw:
    """Picard iteration over empirical laws.

    Iterate j drives m fresh independent paths with the interaction averaged
    against iterate j-1 (iterate 0 is the initial law held constant in
    time). The residual between successive iterates is the max-over-
    coordinates W1 distance of terminal marginals; an increase flags
    non-convergence.
    """
    drift = build_drift(config)
    grid = config.grid
    d = config.domain.dim
    torus = config.domain.is_torus
    dt = grid.dt
    times = grid.times()
    snap_steps = set(_snapshot_steps(grid, snapshot_times)) | {0}
    coupled = drift.pair_state is not None
    separable = drift.mf_summary is not None
    if coupled and not separable and m * (grid.steps + 1) * d > MAX_ENSEMBLE_ELEMENTS:
        raise MemoryError("generic mean-field drift retains the full ensemble; reduce m or steps")

    fractional = config.noise.kind == "fbm" and config.noise.hurst != 0.5
    hurst = config.noise.hurst if fractional else 0.5

    # Iterate 0: initial draws held constant in time. The same draws seed
    # every iterate, so only the interaction estimate changes between them.
    gen0 = rng.for_particle(_P_PICARD_INIT).generator()
    init_states = sample_initial(config.initial_law, config.domain, (m,), gen0)
    if torus:
        init_states = wrap_torus_unchecked(init_states)

    effective_iters = max(1, iters) if coupled else 1
    if effective_iters >= _P_PICARD_FBM_BASE - _P_PICARD_BASE:
        raise ValueError("iteration count exceeds the stream-keying budget")

    prev_summaries: np.ndarray | None = None
    prev_paths: np.ndarray | None = None
    if coupled and separable:
        prev_summaries = np.tile(drift.mf_summary(init_states), (grid.steps + 1, 1))
    elif coupled:
        prev_paths = np.broadcast_to(init_states[:, None, :], (m, grid.steps + 1, d)).copy()

    prev_terminal: np.ndarray | None = None
    residuals: list[float] = []
    snapshots: dict[int, np.ndarray] = {}

    for it in range(1, effective_iters + 1):
        keep_paths = coupled and not separable
        cur_paths = np.empty((m, grid.steps + 1, d)) if keep_paths else None
        # mf_summary values are means of per-particle features, so the full
        # ensemble summary is the size-weighted average of block summaries.
        summary_acc: np.ndarray | None = None
        terminal = np.empty((m, d))
        want_snaps = it == effective_iters
        if want_snaps:
            snapshots = {s: np.empty((m, d)) for s in snap_steps}

        for block_idx, lo in enumerate(range(0, m, PATH_BLOCK)):
            b = min(PATH_BLOCK, m - lo)
            stream = rng.for_replica(block_idx)
            gen = stream.for_particle(_P_PICARD_BASE + it).generator()
            states = init_states[lo : lo + b].copy()

            fbm_incr = None
            if fractional:
                vals, _, _ = sample_fbm_batch(
                    grid, hurst, d, b, stream.for_particle(_P_PICARD_FBM_BASE + it), method="circulant"
                )
                fbm_incr = np.diff(vals, axis=1)

            if want_snaps:
                snapshots[0][lo : lo + b] = states
            if keep_paths:
                cur_paths[lo : lo + b, 0, :] = states
            if coupled and separable:
                if summary_acc is None:
                    summary_acc = np.zeros((grid.steps + 1, prev_summaries.shape[1]))
                summary_acc[0] += b * drift.mf_summary(states)

            for s in range(grid.steps):
                t = float(times[s])
                if coupled:
                    if separable:
                        total = drift.mf_drift(t, states, prev_summaries[s])
                    else:
                        total = drift.mean_field_drift(t, states, prev_paths[:, s, :], None)
                else:
                    total = np.zeros_like(states)
                if drift.b0_state is not None:
                    total = total + drift.b0_state(t, states)
                dw = fbm_incr[:, s, :] if fractional else _block_noise_brownian(gen, (b, d), dt)
                states = states + dt * total + dw
                if torus:
                    states = wrap_torus_unchecked(states)
                if not np.all(np.isfinite(states)):
                    _first_nonfinite(states, s + 1)
                if want_snaps and (s + 1) in snap_steps:
                    snapshots[s + 1][lo : lo + b] = states
                if keep_paths:
                    cur_paths[lo : lo + b, s + 1, :] = states
                if coupled and separable:
                    summary_acc[s + 1] += b * drift.mf_summary(states)
            terminal[lo : lo + b] = states

        if prev_terminal is not None:
            residuals.append(_w1_marginal(prev_terminal, terminal))
        prev_terminal = terminal
        if coupled and separable:
            prev_summaries = summary_acc / m
        prev_paths = cur_paths

    non_convergent = len(residuals) >= 2 and residuals[-1] > residuals[-2]
    return MeanFieldLaw(
        grid=grid,
        domain_kind=config.domain.kind,
        drift=drift,
        m=m,
        iters=effective_iters,
        residuals=residuals,
        non_convergent=non_convergent,
        summaries=prev_summaries if coupled and separable else None,
        ens_paths=prev_paths,
        snapshots=snapshots,
    )


def sample_reference_marginals(
    config: SimConfig,
    mean_field: MeanFieldLaw,
    count: int,
    rng: RngStream,
    snapshot_times=None,
) -> dict[int, np.ndarray]:
    """Marginal samples of a fresh independent copy driven by the frozen
    mean-field drift, recorded at the requested grid steps.

    These are the comparison samples for nonparametric divergence
    estimates: the same law the change-of-measure reference uses.
    """
    grid = mean_field.grid
    d = init_dim = config.domain.dim
    torus = config.domain.is_torus
    dt = grid.dt
    times = grid.times()
    snap_steps = set(_snapshot_steps(grid, snapshot_times)) | {0}
    out = {s: np.empty((count, init_dim)) for s in snap_steps}
    fractional = config.noise.kind == "fbm" and config.noise.hurst != 0.5

    for block_idx, lo in enumerate(range(0, count, PATH_BLOCK)):
        b = min(PATH_BLOCK, count - lo)
        stream = rng.for_replica(block_idx)
        gen = stream.for_particle(_P_REF).generator()
        states = sample_initial(config.initial_law, config.domain, (b,), gen)
        if torus:
            states = wrap_torus_unchecked(states)
        fbm_incr = None
        if fractional:
            vals, _, _ = sample_fbm_batch(
                grid, config.noise.hurst, d, b, stream.for_particle(_P_REF_FBM), method="circulant"
            )
            fbm_incr = np.diff(vals, axis=1)
        out[0][lo : lo + b] = states
        for s in range(grid.steps):
            t = float(times[s])
            total = mean_field.reference_drift_at(s, t, states)
            dw = fbm_incr[:, s, :] if fractional else _block_noise_brownian(gen, (b, d), dt)
            states = states + dt * total + dw
            if torus:
                states = wrap_torus_unchecked(states)
            if not np.all(np.isfinite(states)):
                _first_nonfinite(states, s + 1)
            if (s + 1) in snap_steps:
                out[s + 1][lo : lo + b] = states
    return out
