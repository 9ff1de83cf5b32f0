"""Petro-elastic model: (porosity, saturation, pressure) -> acoustic impedance.

Soft-sand chain: Hertz-Mindlin contact moduli at critical porosity,
modified lower Hashin-Shtrikman interpolation to the dry-frame moduli at
the cell porosity, Wood/Reuss fluid mixing, Gassmann saturation, then
P-/S-velocities and impedance.

Units: moduli in GPa, densities in kg/m^3, effective stress in GPa;
velocities come out in m/s and impedance in (kg/m^3)(m/s).  All functions
are pure and broadcast elementwise over numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gridmodel import Grid, ReservoirModel

__all__ = [
    "RockPhysicsParams",
    "FluidModuli",
    "hertz_mindlin",
    "mlhs_dry_moduli",
    "fluid_modulus",
    "gassmann_saturate",
    "velocities_and_impedance",
    "impedance_map",
]

BAR_TO_GPA = 1e-4
GPA_TO_PA = 1e9


@dataclass(frozen=True)
class RockPhysicsParams:
    """Grain/pack parameters of the dry-frame model.

    phi_c: critical porosity; c_p: coordination number; n: degree of the
    root in the contact-moduli expressions; k_s/mu_s: mineral moduli in
    GPa; nu_s: mineral Poisson ratio; rho_m: mineral density in kg/m^3;
    p_eff: effective stress in GPa (per-run constant unless an
    overburden is supplied to :func:`impedance_map`).
    """

    phi_c: float = 0.36
    c_p: float = 9.0
    n: float = 3.0
    k_s: float = 36.6
    mu_s: float = 44.0
    nu_s: float = 0.08
    rho_m: float = 2650.0
    p_eff: float = 0.02

    def __post_init__(self):
        if not 0.0 < self.phi_c < 1.0:
            raise ValueError("phi_c must be in (0, 1)")
        if self.c_p <= 0 or self.n < 1:
            raise ValueError("need c_p > 0 and n >= 1")
        if self.k_s <= 0 or self.mu_s <= 0:
            raise ValueError("mineral moduli must be positive")
        if not 0.0 < self.nu_s < 0.5:
            raise ValueError("nu_s must be in (0, 0.5)")


@dataclass(frozen=True)
class FluidModuli:
    """Bulk moduli (GPa) and densities (kg/m^3) of water, oil and gas."""

    k_w: float = 2.25
    k_o: float = 1.0
    k_g: float = 0.01
    rho_w: float = 1000.0
    rho_o: float = 800.0
    rho_g: float = 100.0

    def __post_init__(self):
        if min(self.k_w, self.k_o, self.k_g) <= 0:
            raise ValueError("fluid bulk moduli must be positive")
        if min(self.rho_w, self.rho_o, self.rho_g) <= 0:
            raise ValueError("fluid densities must be positive")


def hertz_mindlin(params: RockPhysicsParams, p_eff=None):
    """Dry bulk and shear moduli (GPa) of the grain pack at critical porosity.

    K_HM = [C_p^2 (1-phi_c)^2 mu_s^2 P_eff / (18 pi^2 (1-nu_s)^2)]^(1/n)
    mu_HM = (5-4nu_s)/(5(2-nu_s)) [3 C_p^2 (1-phi_c)^2 mu_s^2 P_eff / (2 pi^2 (1-nu_s)^2)]^(1/n)
    """
    p = params.p_eff if p_eff is None else np.asarray(p_eff, dtype=float)
    if np.any(np.asarray(p) <= 0):
        raise ValueError("effective stress must be positive")
    common = params.c_p**2 * (1.0 - params.phi_c) ** 2 * params.mu_s**2 / (
        np.pi**2 * (1.0 - params.nu_s) ** 2
    )
    k_hm = (common * p / 18.0) ** (1.0 / params.n)
    mu_hm = (
        (5.0 - 4.0 * params.nu_s)
        / (5.0 * (2.0 - params.nu_s))
        * (3.0 * common * p / 2.0) ** (1.0 / params.n)
    )
    return k_hm, mu_hm


def mlhs_dry_moduli(phi, k_hm, mu_hm, k_s, mu_s, phi_c):
    """Dry-frame moduli between the zero-porosity and critical-porosity endpoints.

    Harmonic (lower Hashin-Shtrikman) interpolation in phi/phi_c; exact
    endpoints: phi=0 -> (k_s, mu_s), phi=phi_c -> (k_hm, mu_hm).
    """
    phi = np.asarray(phi, dtype=float)
    if np.any(phi < 0) or np.any(phi > phi_c):
        raise ValueError(f"porosity must lie in [0, phi_c={phi_c}]")
    f = phi / phi_c
    k_d = 1.0 / (f / (k_hm + 4.0 * mu_hm / 3.0) + (1.0 - f) / (k_s + 4.0 * mu_hm / 3.0)) - (
        4.0 * mu_hm / 3.0
    )
    z = mu_hm / 6.0 * (9.0 * k_hm + 8.0 * mu_hm) / (k_hm + 2.0 * mu_hm)
    g_d = 1.0 / (f / (mu_hm + z) + (1.0 - f) / (mu_s + z)) - z
    return k_d, g_d


def fluid_modulus(s_w, s_o, s_g, fluids: FluidModuli):
    """Wood/Reuss (harmonic) mixture modulus of the pore fluid, GPa."""
    s_w, s_o, s_g = (np.asarray(s, dtype=float) for s in (s_w, s_o, s_g))
    if np.any(s_w < 0) or np.any(s_o < 0) or np.any(s_g < 0):
        raise ValueError("saturations must be non-negative")
    total = s_w + s_o + s_g
    if np.any(np.abs(total - 1.0) > 1e-9):
        raise ValueError("saturations must sum to 1")
    return 1.0 / (s_w / fluids.k_w + s_o / fluids.k_o + s_g / fluids.k_g)


def gassmann_saturate(k_d, g_d, phi, k_f, k_s, s_w, s_o, s_g, fluids: FluidModuli, rho_m):
    """Saturated moduli (GPa) and bulk density (kg/m^3).

    K_sat = K_d + (1 - K_d/K_s)^2 / (phi/K_f + (1-phi)/K_s - K_d/K_s^2);
    the shear modulus is unaffected by the fluid.
    """
    k_d, phi, k_f = np.asarray(k_d, float), np.asarray(phi, float), np.asarray(k_f, float)
    denom = phi / k_f + (1.0 - phi) / k_s - k_d / k_s**2
    if np.any(denom <= 0):
        raise ValueError("Gassmann denominator is non-positive; inconsistent moduli/porosity")
    k_sat = k_d + (1.0 - k_d / k_s) ** 2 / denom
    rho_sat = (1.0 - phi) * rho_m + phi * (
        np.asarray(s_w, float) * fluids.rho_w
        + np.asarray(s_o, float) * fluids.rho_o
        + np.asarray(s_g, float) * fluids.rho_g
    )
    return k_sat, g_d, rho_sat


def velocities_and_impedance(k_sat, mu_sat, rho_sat):
    """V_p, V_s (m/s) and acoustic impedance Z_p = rho * V_p from GPa moduli."""
    rho_sat = np.asarray(rho_sat, dtype=float)
    if np.any(rho_sat <= 0):
        raise ValueError("density must be positive")
    v_p = np.sqrt((np.asarray(k_sat, float) + 4.0 * np.asarray(mu_sat, float) / 3.0) * GPA_TO_PA / rho_sat)
    v_s = np.sqrt(np.asarray(mu_sat, float) * GPA_TO_PA / rho_sat)
    return v_p, v_s, rho_sat * v_p


def impedance_map(
    model: ReservoirModel,
    s_w: np.ndarray,
    pressure_bar: np.ndarray,
    params: RockPhysicsParams,
    fluids: FluidModuli,
    grid: Grid,
    overburden_bar: float | None = None,
) -> np.ndarray:
    """Thickness-weighted vertically averaged impedance image, shape (ny, nx).

    Runs the full chain per active cell with S_o = 1 - S_w (no free gas in
    the two-phase case).  If overburden_bar is given, the effective stress
    is per-cell overburden minus pore pressure; otherwise the constant
    params.p_eff applies.  Columns with no active layer come out as NaN.
    """
    if s_w.shape != grid.shape or pressure_bar.shape != grid.shape:
        raise ValueError("snapshot arrays must have grid shape")
    act = grid.active
    phi = np.clip(model.phi, 0.0, params.phi_c)  # guard roundoff at the bound

    if overburden_bar is None:
        p_eff = params.p_eff
    else:
        p_eff = (overburden_bar - pressure_bar) * BAR_TO_GPA
        if np.any(p_eff[act] <= 0):
            raise ValueError("overburden mode gives non-positive effective stress")
    k_hm, mu_hm = hertz_mindlin(params, p_eff)
    k_d, g_d = mlhs_dry_moduli(phi, k_hm, mu_hm, params.k_s, params.mu_s, params.phi_c)
    sw = np.clip(s_w, 0.0, 1.0)
    so = 1.0 - sw
    k_f = fluid_modulus(sw, so, np.zeros_like(sw), fluids)
    k_sat, mu_sat, rho_sat = gassmann_saturate(
        k_d, g_d, phi, k_f, params.k_s, sw, so, 0.0, fluids, params.rho_m
    )
    _, _, z_p = velocities_and_impedance(k_sat, mu_sat, rho_sat)

    weights = act * grid.dz[:, None, None]
    wsum = weights.sum(axis=0)
    with np.errstate(invalid="ignore"):
        image = np.where(wsum > 0, (z_p * weights).sum(axis=0) / np.where(wsum > 0, wsum, 1.0), np.nan)
    return image
