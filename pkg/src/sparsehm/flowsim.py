"""Two-phase (oil-water) incompressible IMPES simulator.

Finite-volume two-point flux on the layered Cartesian grid: an implicit
pressure solve (SPD system, Jacobi-preconditioned conjugate gradients)
followed by explicit upwind saturation transport under a CFL cap.  Wells
are rate-controlled through Peaceman indices; an optional constant-
pressure aquifer attaches to selected lateral faces; gravity along z can
be switched on (off by default for the 2.5D twin case).

Internal units are SI (Pa, s, m, m^2, m^3/s); the public surface speaks
bar, day and mD.  One simulation is single-threaded and deterministic;
distinct ensemble members are independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg, splu

from .gridmodel import Grid, ReservoirModel

__all__ = [
    "FluidProps",
    "Well",
    "Schedule",
    "Numerics",
    "AquiferSpec",
    "SimOutput",
    "SimulationError",
    "relative_permeability",
    "simulate",
    "well_response",
    "peaceman_index",
]

MD_TO_M2 = 9.869233e-16
BAR_TO_PA = 1.0e5
DAY_TO_S = 86400.0
GRAVITY = 9.81


class SimulationError(RuntimeError):
    """Pressure non-convergence, CFL underflow or an ill-posed well set."""


@dataclass(frozen=True)
class FluidProps:
    """Viscosities (Pa s), densities (kg/m^3) and Corey curve parameters."""

    mu_w: float = 0.5e-3
    mu_o: float = 2.0e-3
    rho_w: float = 1000.0
    rho_o: float = 800.0
    n_w: float = 2.0
    n_o: float = 2.0
    s_wr: float = 0.2
    s_or: float = 0.2
    k_rw0: float = 0.6
    k_ro0: float = 0.9

    def __post_init__(self):
        if self.mu_w <= 0 or self.mu_o <= 0:
            raise ValueError("viscosities must be positive")
        if not (0.0 <= self.s_wr and 0.0 <= self.s_or and self.s_wr + self.s_or < 1.0):
            raise ValueError("need 0 <= s_wr + s_or < 1")
        if self.n_w < 1 or self.n_o < 1:
            raise ValueError("Corey exponents must be >= 1")
        if not (0.0 < self.k_rw0 <= 1.0 and 0.0 < self.k_ro0 <= 1.0):
            raise ValueError("endpoint relative permeabilities must be in (0, 1]")


@dataclass(frozen=True)
class Well:
    """Rate-controlled well; rate is the total liquid rate in m^3/day."""

    name: str
    cells: tuple  # ((i, j, k), ...) perforations
    control: str  # 'producer' or 'injector'
    rate: float
    radius: float = 0.1
    skin: float = 0.0

    def __post_init__(self):
        if self.control not in ("producer", "injector"):
            raise ValueError(f"unknown well control {self.control!r}")
        if self.rate < 0:
            raise ValueError("well rate must be >= 0")
        if not self.cells:
            raise ValueError(f"well {self.name} has no perforations")


@dataclass(frozen=True)
class Schedule:
    """Report times in days; survey times must be a subset of report times."""

    report_times: tuple
    survey_times: tuple = ()
    history_end: float | None = None

    def __post_init__(self):
        rt = tuple(float(t) for t in self.report_times)
        st = tuple(float(t) for t in self.survey_times)
        if not rt or any(b <= a for a, b in zip(rt, rt[1:])) or rt[0] <= 0:
            raise ValueError("report times must be positive and strictly increasing")
        if not set(st) <= set(rt):
            raise ValueError("survey times must be a subset of report times")
        object.__setattr__(self, "report_times", rt)
        object.__setattr__(self, "survey_times", st)

    @property
    def total_time(self) -> float:
        return self.report_times[-1]

    def history_times(self) -> tuple:
        end = self.total_time if self.history_end is None else self.history_end
        return tuple(t for t in self.report_times if t <= end)


@dataclass(frozen=True)
class AquiferSpec:
    """Constant-pressure ghost cells attached to lateral boundary faces."""

    faces: tuple  # subset of ('west', 'east', 'south', 'north')
    pressure_bar: float

    def __post_init__(self):
        bad = set(self.faces) - {"west", "east", "south", "north"}
        if bad:
            raise ValueError(f"unknown aquifer faces {sorted(bad)}")


@dataclass(frozen=True)
class Numerics:
    """Time stepping and pressure-solver controls.

    cfl scales the monotonicity bound of the explicit transport step;
    ds_max additionally caps the per-step saturation change anywhere in
    the grid (the accuracy control that keeps fronts moving at the right
    speed when the monotone bound alone would allow large steps).
    """

    cfl: float = 0.8
    ds_max: float = 0.05
    dt_max_days: float = 30.0
    dt_min_days: float = 1e-6
    pcg_tol: float = 1e-10
    pcg_maxiter: int = 5000
    p_init_bar: float = 300.0
    s_w_init: float | None = None  # None -> connate water s_wr
    gravity: bool = False


@dataclass
class SimOutput:
    """Per-well report series plus snapshots at survey times.

    bhp (bar) and wct are (n_wells, n_report_times); snapshots maps a
    survey time to (pressure_bar, s_w) grid-shaped arrays.  mass_error
    is the worst per-step relative water-balance error.
    """

    times: np.ndarray
    well_names: tuple
    bhp: np.ndarray
    wct: np.ndarray
    snapshots: dict = field(default_factory=dict)
    mass_error: float = 0.0


def relative_permeability(s_w, props: FluidProps):
    """Corey curves; saturations are clamped to the mobile range."""
    s = np.clip(np.asarray(s_w, dtype=float), props.s_wr, 1.0 - props.s_or)
    span = 1.0 - props.s_wr - props.s_or
    se = (s - props.s_wr) / span
    return props.k_rw0 * se**props.n_w, props.k_ro0 * (1.0 - se) ** props.n_o


def _fractional_flow(s_w, props):
    k_rw, k_ro = relative_permeability(s_w, props)
    lam_w = k_rw / props.mu_w
    lam_o = k_ro / props.mu_o
    return lam_w / (lam_w + lam_o)


def _max_fw_derivative(props, n_samples=2001):
    s = np.linspace(props.s_wr, 1.0 - props.s_or, n_samples)
    fw = _fractional_flow(s, props)
    return float(np.max(np.abs(np.gradient(fw, s))))


def _fw_derivative_table(props, window=0.05, n_samples=2001):
    """Windowed max of |df_w/dS| around each saturation.

    The explicit upwind update is monotone for dt <= phi V / (Q_out f'(S_cell)),
    so the cap only needs the local derivative; the window adds a margin for
    the motion of S within one step.
    """
    s = np.linspace(props.s_wr, 1.0 - props.s_or, n_samples)
    fp = np.abs(np.gradient(_fractional_flow(s, props), s))
    half = max(1, int(round(window / max(s[1] - s[0], 1e-12))))
    padded = np.concatenate([np.full(half, fp[0]), fp, np.full(half, fp[-1])])
    windows = np.lib.stride_tricks.sliding_window_view(padded, 2 * half + 1)
    return s, windows.max(axis=1)


def peaceman_index(kx_m2: float, dx: float, dy: float, dz: float, radius: float, skin: float) -> float:
    """Peaceman connection index (m^3) for an isotropic horizontal perm."""
    r_eq = 0.14 * np.hypot(dx, dy)
    denom = np.log(r_eq / radius) + skin
    if denom <= 0:
        raise ValueError("equivalent radius / wellbore radius combination is invalid")
    return 2.0 * np.pi * kx_m2 * dz / denom


class _Discretization:
    """Static grid topology: active indexing, face lists, well connections."""

    def __init__(self, model: ReservoirModel, grid: Grid, wells, aquifer):
        act = grid.active
        n = grid.n_active
        idx3 = -np.ones(grid.shape, dtype=int)
        idx3[act] = np.arange(n)
        self.n = n
        self.idx3 = idx3

        kx = np.exp(model.lnKx) * MD_TO_M2
        kz = np.exp(model.lnKz) * MD_TO_M2
        dzc = np.broadcast_to(grid.dz[:, None, None], grid.shape)

        iL, iR, gL, gR, dz_drop = [], [], [], [], []

        # x-direction faces
        m = act[:, :, :-1] & act[:, :, 1:]
        a_x = grid.dy * dzc
        iL.append(idx3[:, :, :-1][m])
        iR.append(idx3[:, :, 1:][m])
        gL.append((kx * a_x)[:, :, :-1][m] / (grid.dx / 2.0))
        gR.append((kx * a_x)[:, :, 1:][m] / (grid.dx / 2.0))
        dz_drop.append(np.zeros(int(m.sum())))
        # y-direction faces
        m = act[:, :-1, :] & act[:, 1:, :]
        a_y = grid.dx * dzc
        iL.append(idx3[:, :-1, :][m])
        iR.append(idx3[:, 1:, :][m])
        gL.append((kx * a_y)[:, :-1, :][m] / (grid.dy / 2.0))
        gR.append((kx * a_y)[:, 1:, :][m] / (grid.dy / 2.0))
        dz_drop.append(np.zeros(int(m.sum())))
        # z-direction faces (k increasing downward; depth difference = half thicknesses)
        if grid.nz > 1:
            m = act[:-1, :, :] & act[1:, :, :]
            a_z = grid.dx * grid.dy
            iL.append(idx3[:-1, :, :][m])
            iR.append(idx3[1:, :, :][m])
            gL.append(np.broadcast_to(a_z, grid.shape)[:-1][m] * kz[:-1][m] / (dzc[:-1][m] / 2.0))
            gR.append(np.broadcast_to(a_z, grid.shape)[1:][m] * kz[1:][m] / (dzc[1:][m] / 2.0))
            dz_drop.append(((dzc[:-1][m] + dzc[1:][m]) / 2.0))

        self.face_L = np.concatenate(iL).astype(int)
        self.face_R = np.concatenate(iR).astype(int)
        self.g_L = np.concatenate(gL)
        self.g_R = np.concatenate(gR)
        self.face_depth_drop = np.concatenate(dz_drop)  # z_R - z_L, positive downward

        self.pore_volume = (grid.dx * grid.dy * dzc * model.phi)[act]

        # sparse pattern of the pressure matrix (static)
        rows = np.concatenate([self.face_L, self.face_R, np.arange(n)])
        cols = np.concatenate([self.face_R, self.face_L, np.arange(n)])
        self._pattern = (rows, cols)

        # well connections
        self.wells = []
        for w in wells:
            conn_idx, conn_wi = [], []
            for (i, j, k) in w.cells:
                if not act[k, j, i]:
                    raise ValueError(f"well {w.name} perforates inactive cell {(i, j, k)}")
                conn_idx.append(idx3[k, j, i])
                conn_wi.append(
                    peaceman_index(kx[k, j, i], grid.dx, grid.dy, float(grid.dz[k]), w.radius, w.skin)
                )
            self.wells.append((w, np.array(conn_idx), np.array(conn_wi)))

        # aquifer connections: ghost constant-pressure cells on lateral faces
        self.aq_idx = np.array([], dtype=int)
        self.aq_g = np.array([])
        if aquifer is not None:
            sel, g = [], []
            for face in aquifer.faces:
                if face == "west":
                    cells = act[:, :, 0]
                    gg = (kx * grid.dy * dzc)[:, :, 0][cells] / (grid.dx / 2.0)
                    sel.append(idx3[:, :, 0][cells])
                elif face == "east":
                    cells = act[:, :, -1]
                    gg = (kx * grid.dy * dzc)[:, :, -1][cells] / (grid.dx / 2.0)
                    sel.append(idx3[:, :, -1][cells])
                elif face == "south":
                    cells = act[:, 0, :]
                    gg = (kx * grid.dx * dzc)[:, 0, :][cells] / (grid.dy / 2.0)
                    sel.append(idx3[:, 0, :][cells])
                else:  # north
                    cells = act[:, -1, :]
                    gg = (kx * grid.dx * dzc)[:, -1, :][cells] / (grid.dy / 2.0)
                    sel.append(idx3[:, -1, :][cells])
                g.append(gg)
            if sel:
                self.aq_idx = np.concatenate(sel).astype(int)
                self.aq_g = np.concatenate(g)
            self.aq_pressure = aquifer.pressure_bar * BAR_TO_PA
        else:
            self.aq_pressure = 0.0

    def assemble(self, tau, aq_tau, pin_value):
        """SPD pressure matrix from face coefficients; returns (A, pin_rhs).

        Without any aquifer the rate-only system is singular up to a
        constant, so cell 0 is tied to pin_value through a well-scaled
        extra diagonal term; with balanced rates the tie carries no flux
        and the solution is exact.
        """
        n = self.n
        diag = np.zeros(n)
        np.add.at(diag, self.face_L, tau)
        np.add.at(diag, self.face_R, tau)
        pin_rhs = np.zeros(n)
        if aq_tau.size:
            np.add.at(diag, self.aq_idx, aq_tau)
        if not self.aq_g.size:
            scale = diag.mean() if diag.any() else 1.0
            diag[0] += scale
            pin_rhs[0] = scale * pin_value
        data = np.concatenate([-tau, -tau, diag])
        a = sp.csr_matrix(sp.coo_matrix((data, self._pattern), shape=(n, n)))
        return a, pin_rhs


class _PressureSolver:
    """Conjugate gradients preconditioned by a reused exact factorization.

    The pressure matrix drifts slowly with mobility, so the complete LU
    factor of a recent step's matrix serves as the preconditioner for
    many steps (the inverse of an SPD matrix is SPD, which CG requires;
    an incomplete LU is not symmetric and can stall CG).  The factor is
    rebuilt on age, on CG slowing down, or on a convergence failure; the
    CG tolerance itself guarantees solution accuracy regardless of
    preconditioner staleness.
    """

    REBUILD_AGE = 25
    SLOW_ITERATIONS = 40

    def __init__(self):
        self._lu = None
        self._age = self.REBUILD_AGE

    def _factor(self, a):
        self._lu = splu(a.tocsc())
        self._age = 0

    def solve(self, a, rhs, x0, numerics):
        if np.any(a.diagonal() <= 0):
            raise SimulationError("pressure matrix lost positive definiteness")
        if self._lu is None or self._age >= self.REBUILD_AGE:
            self._factor(a)
        count = [0]

        def tick(_xk):
            count[0] += 1

        precond = LinearOperator(a.shape, matvec=self._lu.solve)
        x, info = cg(a, rhs, x0=x0, rtol=numerics.pcg_tol, atol=0.0,
                     maxiter=numerics.pcg_maxiter, M=precond, callback=tick)
        if info != 0:
            self._factor(a)
            precond = LinearOperator(a.shape, matvec=self._lu.solve)
            x, info = cg(a, rhs, x0=x0, rtol=numerics.pcg_tol, atol=0.0,
                         maxiter=numerics.pcg_maxiter, M=precond)
            if info != 0:
                raise SimulationError(f"pressure solve did not converge (cg info={info})")
        elif count[0] > self.SLOW_ITERATIONS:
            self._age = self.REBUILD_AGE
        else:
            self._age += 1
        return x


def _well_rates(disc, lam_t, fw, s_w):
    """Allocated per-cell rates (m^3/s) and per-phase well totals.

    A prescribed total rate is split over perforations proportionally to
    WI * lambda_t; producers remove the cell mixture (fraction fw of the
    draw is water), injectors add pure water.
    """
    n = disc.n
    q_total = np.zeros(n)
    q_water = np.zeros(n)
    per_well = []
    for w, conn, wi in disc.wells:
        weights = wi * lam_t[conn]
        wsum = weights.sum()
        if wsum <= 0.0:
            raise SimulationError(f"zero mobility at all perforations of well {w.name}")
        rate = w.rate / DAY_TO_S
        alloc = rate * weights / wsum
        if w.control == "injector":
            q_total[conn] += alloc
            q_water[conn] += alloc
            per_well.append((w, conn, wi, alloc, rate, rate))
        else:
            q_total[conn] -= alloc
            qw = alloc * fw[conn]
            q_water[conn] -= qw
            per_well.append((w, conn, wi, -alloc, qw.sum(), rate))
    return q_total, q_water, per_well


def well_response(pressure, well_entry, lam_t):
    """(BHP_Pa, q_w, q_o, WCT) of one rate-controlled well.

    The bottom-hole pressure is the value consistent with the Peaceman
    inflow relation at the prescribed total rate, i.e. for a producer
    rate = sum_j WI_j lam_j (p_j - p_bhp).  Rates are m^3/s, positive.
    """
    w, conn, wi, _alloc, q_w, rate = well_entry
    weights = wi * lam_t[conn]
    wsum = weights.sum()
    if w.control == "producer":
        bhp = (np.dot(weights, pressure[conn]) - rate) / wsum
        wct = q_w / rate if rate > 0 else 0.0
    else:
        bhp = (np.dot(weights, pressure[conn]) + rate) / wsum
        q_w = rate
        wct = 1.0
    return float(bhp), float(q_w), float(rate - q_w), float(wct)


def simulate(
    model: ReservoirModel,
    grid: Grid,
    fluids: FluidProps,
    wells,
    schedule: Schedule,
    numerics: Numerics = Numerics(),
    aquifer: AquiferSpec | None = None,
) -> SimOutput:
    """Run the IMPES loop over the whole schedule.

    Producers and injectors must balance (incompressible flow) unless an
    aquifer provides pressure support.
    """
    disc = _Discretization(model, grid, wells, aquifer)
    act = grid.active

    net = sum(w.rate if w.control == "injector" else -w.rate for w in wells)
    if aquifer is None and abs(net) > 1e-9 * max(1.0, sum(w.rate for w in wells)):
        raise SimulationError(
            f"injection and production rates must balance without an aquifer (net {net} m^3/day)"
        )

    s_w = np.full(disc.n, fluids.s_wr if numerics.s_w_init is None else numerics.s_w_init)
    pressure = np.full(disc.n, numerics.p_init_bar * BAR_TO_PA)
    fp_s, fp_tab = _fw_derivative_table(fluids)
    rho_face_g = None

    report = list(schedule.report_times)
    surveys = set(schedule.survey_times)
    n_wells = len(wells)
    bhp = np.zeros((n_wells, len(report)))
    wct = np.zeros((n_wells, len(report)))
    snapshots = {}
    worst_balance = 0.0
    solver = _PressureSolver()

    t = 0.0
    next_report = 0
    dt_cap = numerics.dt_max_days * DAY_TO_S
    while next_report < len(report):
        t_target = report[next_report] * DAY_TO_S

        k_rw, k_ro = relative_permeability(s_w, fluids)
        lam_w = k_rw / fluids.mu_w
        lam_o = k_ro / fluids.mu_o
        lam_t = lam_w + lam_o
        fw = lam_w / lam_t

        # face coefficient: harmonic combination of (half-transmissibility x mobility)
        tau = 1.0 / (1.0 / (disc.g_L * lam_t[disc.face_L]) + 1.0 / (disc.g_R * lam_t[disc.face_R]))
        aq_tau = disc.aq_g * lam_t[disc.aq_idx] if disc.aq_g.size else np.array([])

        q_total, q_water, per_well = _well_rates(disc, lam_t, fw, s_w)

        rhs = q_total.copy()
        if aq_tau.size:
            np.add.at(rhs, disc.aq_idx, aq_tau * disc.aq_pressure)
        if numerics.gravity:
            # mobility-weighted face fluid density drives the buoyant part of the total flux
            rho_mix = (lam_w * fluids.rho_w + lam_o * fluids.rho_o) / lam_t
            rho_face = 0.5 * (rho_mix[disc.face_L] + rho_mix[disc.face_R])
            rho_face_g = tau * rho_face * GRAVITY * disc.face_depth_drop
            np.add.at(rhs, disc.face_L, rho_face_g)
            np.add.at(rhs, disc.face_R, -rho_face_g)

        a, pin_rhs = disc.assemble(tau, aq_tau, numerics.p_init_bar * BAR_TO_PA)
        pressure = solver.solve(a, rhs + pin_rhs, pressure, numerics)

        # total face flux, positive from L to R
        flux_t = tau * (pressure[disc.face_L] - pressure[disc.face_R])
        if numerics.gravity:
            flux_t = flux_t + rho_face_g
        aq_flux = aq_tau * (disc.aq_pressure - pressure[disc.aq_idx]) if aq_tau.size else np.array([])

        # upwind water fluxes (independent of dt)
        fw_face = np.where(flux_t >= 0.0, fw[disc.face_L], fw[disc.face_R])
        flux_w = fw_face * flux_t
        div_w = np.zeros(disc.n)
        np.add.at(div_w, disc.face_L, flux_w)
        np.add.at(div_w, disc.face_R, -flux_w)
        q_w_cells = q_water.copy()
        if aq_flux.size:
            aq_w = np.where(aq_flux >= 0.0, aq_flux, aq_flux * fw[disc.aq_idx])
            np.add.at(q_w_cells, disc.aq_idx, aq_w)

        # time step: monotonicity bound (local fractional-flow slope on the
        # outflow) plus the ds_max accuracy cap on the predicted change
        outflow = np.zeros(disc.n)
        np.add.at(outflow, disc.face_L, np.maximum(flux_t, 0.0))
        np.add.at(outflow, disc.face_R, np.maximum(-flux_t, 0.0))
        outflow += np.maximum(-q_total, 0.0)
        if aq_flux.size:
            np.add.at(outflow, disc.aq_idx, np.maximum(-aq_flux, 0.0))
        busy = outflow > 0
        if busy.any():
            fp_local = np.maximum(np.interp(s_w[busy], fp_s, fp_tab), 1e-6)
            dt_mono = numerics.cfl * np.min(disc.pore_volume[busy] / (outflow[busy] * fp_local))
        else:
            dt_mono = dt_cap
        rate_s = np.abs(q_w_cells - div_w) / disc.pore_volume
        max_rate = rate_s.max() if rate_s.size else 0.0
        dt_acc = numerics.ds_max / max_rate if max_rate > 0 else dt_cap
        dt = min(dt_mono, dt_acc, dt_cap, t_target - t)
        if dt < numerics.dt_min_days * DAY_TO_S:
            raise SimulationError(f"CFL forced the time step below {numerics.dt_min_days} days")

        stored_before = float(np.dot(disc.pore_volume, s_w))
        s_w = s_w + dt / disc.pore_volume * (q_w_cells - div_w)
        s_w = np.clip(s_w, fluids.s_wr, 1.0 - fluids.s_or)
        stored_after = float(np.dot(disc.pore_volume, s_w))

        net_in = float(q_w_cells.sum()) * dt
        denom = max(abs(net_in), abs(stored_after - stored_before), 1e-30)
        worst_balance = max(worst_balance, abs(stored_after - stored_before - net_in) / denom)

        t += dt
        if t >= t_target - 1e-6:
            t = t_target
            # report-time well responses use the end-of-step saturations
            k_rw, k_ro = relative_permeability(s_w, fluids)
            lam_t_now = k_rw / fluids.mu_w + k_ro / fluids.mu_o
            fw_now = (k_rw / fluids.mu_w) / lam_t_now
            _, _, per_well_now = _well_rates(disc, lam_t_now, fw_now, s_w)
            for wi_, entry in enumerate(per_well_now):
                bhp_pa, _qw, _qo, wct_val = well_response(pressure, entry, lam_t_now)
                bhp[wi_, next_report] = bhp_pa / BAR_TO_PA
                wct[wi_, next_report] = wct_val
            t_days = report[next_report]
            if t_days in surveys:
                p3 = np.full(grid.shape, np.nan)
                s3 = np.full(grid.shape, np.nan)
                p3[act] = pressure / BAR_TO_PA
                s3[act] = s_w
                snapshots[t_days] = (p3, s3)
            next_report += 1

    return SimOutput(
        times=np.array(report),
        well_names=tuple(w.name for w in wells),
        bhp=bhp,
        wct=wct,
        snapshots=snapshots,
        mass_error=worst_balance,
    )
