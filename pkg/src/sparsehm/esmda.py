"""ES-MDA engine and the two assimilation drivers.

The update is the classic multiple-data-assimilation form: every state
vector is assimilated N_a times against observations whose error
covariance is inflated by alpha_p (sum of 1/alpha_p equal to one), with
the Kalman gain regularized by a truncated SVD keeping the leading
singular values up to a given energy fraction.

Two drivers share the machinery: the baseline arm updates raw ln-K state
vectors against production data only; the sparse-coded arm updates OMP
dictionary coefficients against production data plus truncated-DCT
impedance coefficients at survey times, decoding to ln-K fields before
every simulation batch.

Observation perturbations are drawn per member from counter-based
streams keyed by (run seed, assimilation, member, datum block), so
parallel scheduling cannot change any result and the production-block
draws are identical across arms.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import dct2
from .flowsim import FluidProps, Numerics, Schedule, SimOutput, simulate
from .geostat import model_from_lnKx
from .gridmodel import Ensemble, Grid, devectorize
from .metrics import rmse
from .pem import FluidModuli, RockPhysicsParams, impedance_map
from .seeding import mix64, stream
from .sparsedict import Dictionary, decode_ensemble, encode_ensemble

__all__ = [
    "MdaSchedule",
    "ObservationSet",
    "NoiseSpec",
    "AssimilationResult",
    "validate_schedule",
    "perturb_observations",
    "member_perturbation_seeds",
    "tsvd_pinv",
    "esmda_update",
    "assemble_observations",
    "select_dct_indices",
    "synthesize_observations",
    "MemberForward",
    "run_baseline_esmda",
    "run_shm_ked",
]

_TAG_PERTURB = 0x70657274  # 'pert'
_TAG_OBSNOISE = 0x6F627320  # 'obs '

PRODUCTION_BLOCK = 0
IMPEDANCE_BLOCK = 1


@dataclass(frozen=True)
class MdaSchedule:
    """Inflation coefficients; one assimilation per entry."""

    alphas: tuple

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))

    @property
    def n_assimilations(self) -> int:
        return len(self.alphas)

    @classmethod
    def constant(cls, n_assimilations: int) -> "MdaSchedule":
        return cls(alphas=(float(n_assimilations),) * n_assimilations)


def validate_schedule(schedule: MdaSchedule, tol: float = 1e-12) -> None:
    """Accept iff all alphas are positive and sum(1/alpha) == 1 within tol."""
    if schedule.n_assimilations < 1:
        raise ValueError("schedule needs at least one assimilation")
    if any(a <= 0 for a in schedule.alphas):
        raise ValueError(f"all inflation coefficients must be positive: {schedule.alphas}")
    total = sum(1.0 / a for a in schedule.alphas)
    if abs(total - 1.0) > tol:
        raise ValueError(
            f"inflation coefficients must satisfy sum(1/alpha) = 1, got {total!r}"
        )


@dataclass(frozen=True)
class ObservationSet:
    """Stacked observation vector with per-datum noise and layout.

    kinds is 'bhp', 'wct' or 'impedance' per datum; times carries the
    report/survey time; labels the well name or coefficient position.
    blocks groups data for perturbation streams (production=0,
    impedance=1).
    """

    values: np.ndarray
    sigma: np.ndarray
    kinds: np.ndarray
    times: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        s = np.asarray(self.sigma, dtype=float)
        k = np.asarray(self.kinds)
        t = np.asarray(self.times, dtype=float)
        l = np.asarray(self.labels)
        if not (v.shape == s.shape == k.shape == t.shape == l.shape) or v.ndim != 1:
            raise ValueError("observation layout must cover every entry exactly once")
        if np.any(s <= 0):
            raise ValueError("all observation sigmas must be positive")
        for name, arr in (("values", v), ("sigma", s), ("times", t)):
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "kinds", k)
        object.__setattr__(self, "labels", l)

    @property
    def n_data(self) -> int:
        return self.values.size

    @property
    def blocks(self) -> np.ndarray:
        return np.where(self.kinds == "impedance", IMPEDANCE_BLOCK, PRODUCTION_BLOCK)

    @property
    def production_mask(self) -> np.ndarray:
        return self.kinds != "impedance"

    def production_subset(self) -> "ObservationSet":
        m = self.production_mask
        return ObservationSet(
            values=self.values[m],
            sigma=self.sigma[m],
            kinds=self.kinds[m],
            times=self.times[m],
            labels=self.labels[m],
        )


@dataclass(frozen=True)
class NoiseSpec:
    """Observation noise levels for the twin experiment.

    BHP noise in bar (flowing wells; the shut-in level is kept for
    configs that model shut-ins).  Water-cut noise switches from the
    pre- to the post-breakthrough level at the truth run's first report
    time with WCT above breakthrough_wct.  Impedance-coefficient noise
    is relative to each true coefficient with a floor expressed as a
    fraction of the mean kept-coefficient magnitude.
    """

    bhp_sigma_bar: float = 3.0
    bhp_shut_in_sigma_bar: float = 1.0
    wct_sigma_pre: float = 0.02
    wct_sigma_post: float = 0.05
    breakthrough_wct: float = 0.01
    impedance_rel: float = 0.05
    impedance_floor_frac: float = 0.01


def member_perturbation_seeds(run_seed: int, assimilation: int, n_members: int):
    return [mix64(run_seed, _TAG_PERTURB, assimilation, i) for i in range(n_members)]


def perturb_observations(d_obs, sigma, alpha_p, member_seeds, blocks=None) -> np.ndarray:
    """d_obs + sqrt(alpha_p) * sigma * z per member, z ~ N(0, I).

    Each member draws from its own stream; within a member, each datum
    block draws from a separate sub-stream so that adding a block (e.g.
    impedance data) leaves the other blocks' perturbations unchanged.
    """
    d_obs = np.asarray(d_obs, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if blocks is None:
        blocks = np.zeros(d_obs.size, dtype=int)
    blocks = np.asarray(blocks)
    out = np.empty((len(member_seeds), d_obs.size))
    scale = np.sqrt(alpha_p) * sigma
    for i, ms in enumerate(member_seeds):
        z = np.empty(d_obs.size)
        for b in np.unique(blocks):
            sel = blocks == b
            z[sel] = stream(ms, int(b)).standard_normal(int(sel.sum()))
        out[i] = d_obs + scale * z
    return out


def tsvd_pinv(a: np.ndarray, energy: float = 0.999) -> np.ndarray:
    """Pseudo-inverse keeping the minimal leading singular set with the
    requested fraction of the total singular-value energy."""
    u, s, vt = np.linalg.svd(a)
    total = s.sum()
    if total == 0.0:
        return np.zeros_like(a.T)
    if energy >= 1.0:
        r = int(np.sum(s > s[0] * 1e-14))
    else:
        r = int(np.searchsorted(np.cumsum(s) / total, energy) + 1)
        r = min(r, s.size)
    return (vt[:r].T / s[:r]) @ u[:, :r].T


def esmda_update(
    m_ensemble: np.ndarray,
    d_ensemble: np.ndarray,
    d_obs,
    sigma,
    alpha_p: float,
    member_seeds,
    energy: float = 0.999,
    blocks=None,
) -> np.ndarray:
    """One smoother update of the (n_members, n_state) ensemble.

    m_i <- m_i + C_md (C_dd + alpha_p C_d)^+ (d_i^pert - d_i) with the
    empirical covariances (divisor N-1) and a diagonal C_d = diag(sigma^2).

    The truncated inverse is evaluated in noise-whitened data space
    (every datum scaled by 1/sigma), which is algebraically identical at
    full rank and makes the singular-value energy threshold meaningful
    when data of very different physical scales are stacked (BHP in bar,
    water cut as a fraction, impedance coefficients in the millions).
    """
    m = np.asarray(m_ensemble, dtype=float)
    d = np.asarray(d_ensemble, dtype=float)
    if m.shape[0] != d.shape[0]:
        raise ValueError("state and data ensembles must be member-aligned")
    n_ens = m.shape[0]
    if n_ens < 2:
        raise ValueError("need at least 2 members to estimate covariances")
    if len(member_seeds) != n_ens:
        raise ValueError("one perturbation seed per member is required")

    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    dm = m - m.mean(axis=0)
    dd_white = (d - d.mean(axis=0)) / sigma
    c_md_w = dm.T @ dd_white / (n_ens - 1)
    c_dd_w = dd_white.T @ dd_white / (n_ens - 1)
    a_white = c_dd_w + alpha_p * np.eye(sigma.size)
    gain_white = c_md_w @ tsvd_pinv(a_white, energy)

    d_pert = perturb_observations(d_obs, sigma, alpha_p, member_seeds, blocks)
    return m + ((d_pert - d) / sigma) @ gain_white.T


# ---------------------------------------------------------------------------
# Observation assembly
# ---------------------------------------------------------------------------

def _production_entries(sim: SimOutput, schedule: Schedule):
    """(values, kinds, times, labels) over history report times; per time,
    per well, a (bhp, wct) pair.  The stacking order is the data layout."""
    hist = schedule.history_times()
    t_index = {t: i for i, t in enumerate(sim.times)}
    values, kinds, times, labels = [], [], [], []
    for t in hist:
        it = t_index[t]
        for wi, name in enumerate(sim.well_names):
            values.extend([sim.bhp[wi, it], sim.wct[wi, it]])
            kinds.extend(["bhp", "wct"])
            times.extend([t, t])
            labels.extend([name, name])
    return (
        np.array(values),
        np.array(kinds, dtype=object),
        np.array(times),
        np.array(labels, dtype=object),
    )


def _impedance_entries(impedance_maps: dict, schedule: Schedule, dct_indices: np.ndarray):
    """Kept DCT coefficients of each survey's impedance map, surveys ascending."""
    values, kinds, times, labels = [], [], [], []
    idx = np.asarray(dct_indices, dtype=int).reshape(-1, 2)
    for t in schedule.survey_times:
        coeff = dct2.dct2_forward(impedance_maps[t]).full
        values.extend(coeff[idx[:, 0], idx[:, 1]])
        kinds.extend(["impedance"] * idx.shape[0])
        times.extend([t] * idx.shape[0])
        labels.extend([f"({r},{c})" for r, c in idx])
    return (
        np.array(values),
        np.array(kinds, dtype=object),
        np.array(times),
        np.array(labels, dtype=object),
    )


def assemble_observations(
    sim: SimOutput,
    schedule: Schedule,
    mode: str = "production-only",
    impedance_maps: dict | None = None,
    dct_indices: np.ndarray | None = None,
) -> np.ndarray:
    """Deterministic simulated-data vector following the observation layout."""
    if mode not in ("production-only", "production+impedance"):
        raise ValueError(f"unknown observation mode {mode!r}")
    values, *_ = _production_entries(sim, schedule)
    if mode == "production+impedance":
        if impedance_maps is None or dct_indices is None:
            raise ValueError("impedance mode needs impedance maps and a DCT index set")
        missing = [t for t in schedule.survey_times if t not in impedance_maps]
        if missing:
            raise ValueError(f"impedance maps missing for survey times {missing}")
        iv, *_ = _impedance_entries(impedance_maps, schedule, dct_indices)
        values = np.concatenate([values, iv])
    return values


def select_dct_indices(truth_maps: dict, schedule: Schedule, keep: int | None = None, energy: float | None = None) -> np.ndarray:
    """Fix the kept zigzag index set once from the truth impedance maps.

    keep-k is map-independent; the energy rule takes the longest prefix
    any survey needs, so one set serves every survey and member.
    """
    shapes = {truth_maps[t].shape for t in schedule.survey_times}
    if len(shapes) != 1:
        raise ValueError("survey impedance maps must share one shape")
    if keep is not None:
        k = int(keep)
    else:
        k = 1
        for t in schedule.survey_times:
            trunc = dct2.truncate(dct2.dct2_forward(truth_maps[t]), energy=energy)
            k = max(k, trunc.n_kept)
    order = np.array(dct2.zigzag_indices(*next(iter(shapes))), dtype=int)
    return order[:k]


def synthesize_observations(
    truth_sim: SimOutput,
    truth_impedance_maps: dict,
    schedule: Schedule,
    noise: NoiseSpec,
    seed: int,
    mode: str = "production+impedance",
    dct_indices: np.ndarray | None = None,
) -> ObservationSet:
    """Noisy twin-experiment observations from the truth run.

    Water-cut sigma switches at each well's truth breakthrough time;
    impedance sigma is relative to the true coefficient with a floor.
    The same noise levels are later used inside the assimilation.
    """
    values, kinds, times, labels = _production_entries(truth_sim, schedule)

    breakthrough = {}
    for wi, name in enumerate(truth_sim.well_names):
        above = truth_sim.wct[wi] > noise.breakthrough_wct
        breakthrough[name] = truth_sim.times[above][0] if above.any() else np.inf

    sigma = np.empty(values.size)
    for i in range(values.size):
        if kinds[i] == "bhp":
            sigma[i] = noise.bhp_sigma_bar
        else:
            pre = times[i] < breakthrough[labels[i]]
            sigma[i] = noise.wct_sigma_pre if pre else noise.wct_sigma_post

    if mode == "production+impedance":
        iv, ik, it, il = _impedance_entries(truth_impedance_maps, schedule, dct_indices)
        floor = noise.impedance_floor_frac * float(np.mean(np.abs(iv))) if iv.size else 0.0
        isig = np.maximum(noise.impedance_rel * np.abs(iv), max(floor, 1e-300))
        values = np.concatenate([values, iv])
        sigma = np.concatenate([sigma, isig])
        kinds = np.concatenate([kinds, ik])
        times = np.concatenate([times, it])
        labels = np.concatenate([labels, il])

    clean = ObservationSet(values=values, sigma=sigma, kinds=kinds, times=times, labels=labels)
    z = np.empty(clean.n_data)
    for b in np.unique(clean.blocks):
        sel = clean.blocks == b
        z[sel] = stream(seed, _TAG_OBSNOISE, int(b)).standard_normal(int(sel.sum()))
    return ObservationSet(
        values=clean.values + clean.sigma * z,
        sigma=clean.sigma,
        kinds=clean.kinds,
        times=clean.times,
        labels=clean.labels,
    )


# ---------------------------------------------------------------------------
# Drivers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MemberForward:
    """Forward model of one member: ln-K field -> simulated responses.

    Picklable so ensembles can run in a process pool; the result for a
    member depends only on its field, never on scheduling order.
    """

    grid: Grid
    fluids: FluidProps
    wells: tuple
    schedule: Schedule
    numerics: Numerics
    aquifer: object
    regressions: tuple
    phi_bounds: tuple
    pem_params: RockPhysicsParams
    pem_fluids: FluidModuli
    overburden_bar: float | None = None

    def __call__(self, lnKx_field: np.ndarray):
        model = model_from_lnKx(lnKx_field, self.regressions, self.phi_bounds)
        sim = simulate(
            model, self.grid, self.fluids, self.wells, self.schedule, self.numerics, self.aquifer
        )
        maps = {}
        for t, (p3, s3) in sim.snapshots.items():
            p3f = np.where(np.isfinite(p3), p3, 0.0)
            s3f = np.where(np.isfinite(s3), s3, 0.0)
            maps[t] = impedance_map(
                model, s3f, p3f, self.pem_params, self.pem_fluids, self.grid, self.overburden_bar
            )
        return sim, maps


def _run_forward_batch(forward: MemberForward, fields, threads: int):
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            chunk = max(1, len(fields) // (4 * threads))
            return list(ex.map(forward, fields, chunksize=chunk))
    return [forward(f) for f in fields]


def _history_only(forward: MemberForward) -> MemberForward:
    """Forward model truncated to the history window.

    Intermediate assimilation batches never consume forecast-period
    responses, so simulating past history_end is wasted work; the initial
    and final batches keep the full schedule for reporting.
    """
    sched = forward.schedule
    if sched.history_end is None:
        return forward
    hist = tuple(t for t in sched.report_times if t <= sched.history_end)
    if hist == sched.report_times or not set(sched.survey_times) <= set(hist):
        return forward
    truncated = Schedule(report_times=hist, survey_times=sched.survey_times,
                         history_end=sched.history_end)
    return dataclasses.replace(forward, schedule=truncated)


@dataclass
class AssimilationResult:
    """Everything the report stage needs, stage 0 being the initial ensemble."""

    method: str
    states: list  # Ensemble per stage, length N_a + 1
    data: list  # (n_ens, n_data) simulated-data matrix per stage
    rmse_trace: np.ndarray  # (N_a + 1, n_ens) production RMSE
    initial_lnKx_fields: np.ndarray
    final_lnKx_fields: np.ndarray
    final_impedance: dict  # survey time -> (n_ens, ny, nx)
    well_series: list = field(default_factory=list)  # (bhp, wct) arrays per stage
    observations: ObservationSet | None = None


def _stage_record(result, obs_used, obs_prod, sims_maps, schedule, mode, dct_indices):
    """Collect data vectors, production RMSE, series and impedance maps."""
    sims = [sm[0] for sm in sims_maps]
    maps = [sm[1] for sm in sims_maps]
    vectors = np.array(
        [
            assemble_observations(s, schedule, mode, m, dct_indices)
            for s, m in zip(sims, maps)
        ]
    )
    prod_cols = obs_used.production_mask
    stage_rmse = np.array(
        [
            rmse(obs_prod.values, v[prod_cols], obs_prod.sigma, obs_prod.times)
            for v in vectors
        ]
    )
    bhp = np.array([s.bhp for s in sims])
    wct = np.array([s.wct for s in sims])
    result.data.append(vectors)
    result.rmse_trace.append(stage_rmse)
    result.well_series.append((bhp, wct))
    return vectors, maps


def _finalize(result, maps, schedule, fields):
    result.rmse_trace = np.array(result.rmse_trace)
    result.final_lnKx_fields = np.array(fields)
    result.final_impedance = {
        t: np.array([m[t] for m in maps]) for t in schedule.survey_times
    }
    return result


def run_baseline_esmda(
    initial: Ensemble,
    observations: ObservationSet,
    forward: MemberForward,
    mda: MdaSchedule,
    seed: int,
    energy: float = 0.999,
    threads: int = 1,
) -> AssimilationResult:
    """ES-MDA on raw ln-K state vectors with production data only."""
    validate_schedule(mda)
    if initial.kind != "raw-lnK":
        raise ValueError("the baseline arm expects a raw-lnK ensemble")
    obs = observations.production_subset()
    grid = forward.grid
    schedule = forward.schedule

    states = initial.members.copy()
    result = AssimilationResult(
        method="esmda",
        states=[Ensemble(states.copy(), kind="raw-lnK")],
        data=[],
        rmse_trace=[],
        initial_lnKx_fields=np.array([devectorize(s, grid) for s in states]),
        final_lnKx_fields=None,
        final_impedance={},
        observations=obs,
    )

    inter_forward = _history_only(forward)
    maps = None
    for p, alpha in enumerate(mda.alphas):
        fwd = forward if p == 0 else inter_forward
        fields = [devectorize(s, grid, fill=0.0) for s in states]
        sims_maps = _run_forward_batch(fwd, fields, threads)
        vectors, maps = _stage_record(result, obs, obs, sims_maps, schedule, "production-only", None)
        seeds = member_perturbation_seeds(seed, p, states.shape[0])
        states = esmda_update(
            states, vectors, obs.values, obs.sigma, alpha, seeds, energy, obs.blocks
        )
        result.states.append(Ensemble(states.copy(), kind="raw-lnK"))

    fields = [devectorize(s, grid, fill=0.0) for s in states]
    sims_maps = _run_forward_batch(forward, fields, threads)
    _, maps = _stage_record(result, obs, obs, sims_maps, schedule, "production-only", None)
    return _finalize(result, maps, schedule, fields)


def run_shm_ked(
    initial: Ensemble,
    observations: ObservationSet,
    forward: MemberForward,
    mda: MdaSchedule,
    dictionary: Dictionary,
    t0: int,
    dct_indices: np.ndarray,
    seed: int,
    energy: float = 0.999,
    threads: int = 1,
    resparsify_each: bool = False,
    resparsify_final: bool = True,
) -> AssimilationResult:
    """Sparse-coded arm: coefficients as state, impedance data assimilated."""
    validate_schedule(mda)
    if initial.kind != "raw-lnK":
        raise ValueError("run_shm_ked encodes a raw-lnK initial ensemble itself")
    if dictionary.signal_dim != initial.state_length:
        raise ValueError(
            f"dictionary signal dim {dictionary.signal_dim} != state length {initial.state_length}"
        )
    grid = forward.grid
    schedule = forward.schedule

    coded = encode_ensemble(initial, dictionary, t0)
    states = coded.members.copy()
    decoded = decode_ensemble(Ensemble(states, kind="sparse-coefficients"), dictionary)
    result = AssimilationResult(
        method="shm-ked",
        states=[Ensemble(states.copy(), kind="sparse-coefficients")],
        data=[],
        rmse_trace=[],
        initial_lnKx_fields=np.array([devectorize(s, grid) for s in decoded.members]),
        final_lnKx_fields=None,
        final_impedance={},
        observations=observations,
    )
    obs_prod = observations.production_subset()

    inter_forward = _history_only(forward)
    maps = None
    for p, alpha in enumerate(mda.alphas):
        fwd = forward if p == 0 else inter_forward
        decoded = decode_ensemble(Ensemble(states, kind="sparse-coefficients"), dictionary)
        fields = [devectorize(s, grid, fill=0.0) for s in decoded.members]
        sims_maps = _run_forward_batch(fwd, fields, threads)
        vectors, maps = _stage_record(
            result, observations, obs_prod, sims_maps, schedule, "production+impedance", dct_indices
        )
        seeds = member_perturbation_seeds(seed, p, states.shape[0])
        states = esmda_update(
            states,
            vectors,
            observations.values,
            observations.sigma,
            alpha,
            seeds,
            energy,
            observations.blocks,
        )
        if resparsify_each and p < mda.n_assimilations - 1:
            dec = decode_ensemble(Ensemble(states, kind="sparse-coefficients"), dictionary)
            states = encode_ensemble(dec, dictionary, t0).members.copy()
        result.states.append(Ensemble(states.copy(), kind="sparse-coefficients"))

    if resparsify_final:
        dec = decode_ensemble(Ensemble(states, kind="sparse-coefficients"), dictionary)
        states = encode_ensemble(dec, dictionary, t0).members.copy()
        result.states[-1] = Ensemble(states.copy(), kind="sparse-coefficients")

    decoded = decode_ensemble(Ensemble(states, kind="sparse-coefficients"), dictionary)
    fields = [devectorize(s, grid, fill=0.0) for s in decoded.members]
    sims_maps = _run_forward_batch(forward, fields, threads)
    _, maps = _stage_record(
        result, observations, obs_prod, sims_maps, schedule, "production+impedance", dct_indices
    )
    return _finalize(result, maps, schedule, fields)
