"""Prior model library generation and layer regressions.

Two field generators provide structured priors for the permeability
field: a stationary Gaussian random field simulated spectrally (FFT of
the covariance on a padded torus) and a parametric sinuous-channel
generator producing two-valued facies fields.  Porosity and vertical
permeability are derived from horizontal permeability with per-layer
linear regressions.

Determinism: every draw is keyed by ``mix64(seed, draw, layer, ...)``;
identical (grid, spec, seed) inputs give bit-identical libraries no
matter how draws are scheduled.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.fft import next_fast_len

from .gridmodel import Grid, ReservoirModel
from .seeding import mix64, stream

__all__ = [
    "VariogramSpec",
    "ChannelSpec",
    "LayerRegression",
    "PUNQ_LAYER_REGRESSIONS",
    "ModelLibrary",
    "gaussian_field",
    "channel_field",
    "apply_layer_regressions",
    "draw_field",
    "generate_prior_library",
    "model_from_lnKx",
]


@dataclass(frozen=True)
class VariogramSpec:
    """Gaussian-covariance variogram: C(h) = sill * exp(-(hx/lx)^2 - (hy/ly)^2).

    Correlation lengths are e-folding distances in meters.
    """

    lambda_x: float
    lambda_y: float
    sill: float
    mean: float

    def __post_init__(self):
        if self.lambda_x <= 0 or self.lambda_y <= 0:
            raise ValueError("correlation lengths must be positive")
        if self.sill < 0:
            raise ValueError("sill must be non-negative")


@dataclass(frozen=True)
class ChannelSpec:
    """Sinuous channels running along x, two lnKx levels.

    width is in cells; amplitude and period of the sinusoidal centerline
    are in cells as well.
    """

    width: int
    amplitude: float
    period: float
    ln_channel: float
    ln_background: float
    n_channels: int = 1

    def __post_init__(self):
        if self.width < 1:
            raise ValueError("channel width must be >= 1 cell")
        if self.period <= 0:
            raise ValueError("channel period must be positive")
        if self.n_channels < 0:
            raise ValueError("n_channels must be >= 0")
        for v in (self.amplitude, self.ln_channel, self.ln_background):
            if not np.isfinite(v):
                raise ValueError("channel levels and amplitude must be finite")


@dataclass(frozen=True)
class LayerRegression:
    """phi = a_phi * ln(Kx) + b_phi and ln(Kz) = a_k * ln(Kx) + b_k."""

    a_phi: float
    b_phi: float
    a_k: float
    b_k: float


# Core-derived regression coefficients of the 5-layer synthetic benchmark.
PUNQ_LAYER_REGRESSIONS = (
    LayerRegression(0.040228, -0.03101, 0.88227, -0.29112),
    LayerRegression(0.022608, -0.0066038, 0.89976, -1.1289),
    LayerRegression(0.046974, -0.072764, 0.69049, 1.0074),
    LayerRegression(0.025312, 0.01088, 0.82778, -0.56077),
    LayerRegression(0.039746, -0.038238, 0.88227, -0.29112),
)


def _spectral_layer(ny, nx, dy, dx, spec: VariogramSpec, rng) -> np.ndarray:
    """One zero-mean 2D stationary Gaussian field of shape (ny, nx).

    Circulant embedding: evaluate the covariance on a torus padded by
    ~4 correlation lengths, take its FFT as the spectral density, color
    complex white noise with its square root.
    """
    pad_x = int(np.ceil(4.0 * spec.lambda_x / dx))
    pad_y = int(np.ceil(4.0 * spec.lambda_y / dy))
    mx = next_fast_len(nx + pad_x)
    my = next_fast_len(ny + pad_y)
    # torus lag distances
    lx = np.minimum(np.arange(mx), mx - np.arange(mx)) * dx
    ly = np.minimum(np.arange(my), my - np.arange(my)) * dy
    cov = spec.sill * np.exp(
        -((lx[None, :] / spec.lambda_x) ** 2) - (ly[:, None] / spec.lambda_y) ** 2
    )
    # abs() guards the tiny negative eigenvalues of an imperfect embedding
    spectrum = np.abs(np.fft.fft2(cov))
    n = mx * my
    eps = rng.standard_normal((my, mx)) + 1j * rng.standard_normal((my, mx))
    field = np.real(np.fft.ifft2(eps * np.sqrt(spectrum * n)))
    return field[:ny, :nx]


def gaussian_field(grid: Grid, spec: VariogramSpec, seed: int) -> np.ndarray:
    """Stationary Gaussian lnKx field, one independent 2D layer per k.

    Layer k draws from the sub-stream mix64(seed, k).
    """
    out = np.empty(grid.shape)
    for k in range(grid.nz):
        out[k] = spec.mean + _spectral_layer(
            grid.ny, grid.nx, grid.dy, grid.dx, spec, stream(seed, k)
        )
    return out


def channel_field(grid: Grid, spec: ChannelSpec, seed: int) -> np.ndarray:
    """Two-valued sinuous-channel lnKx field, vertically coherent.

    Channel centerlines are drawn once per realization and repeated on
    every layer (a channel belt cutting through the stack).  Channels
    are placed so the full band fits inside the grid, which keeps the
    in-channel cell count exactly width * nx per channel per layer.
    """
    half_lo = (spec.width - 1) // 2
    half_hi = spec.width // 2
    margin = int(np.ceil(abs(spec.amplitude)))
    y_min = half_lo + margin
    y_max = grid.ny - 1 - half_hi - margin
    if spec.n_channels > 0 and y_max < y_min:
        raise ValueError(
            f"channel band (width {spec.width}, amplitude {spec.amplitude}) "
            f"does not fit in ny={grid.ny}"
        )
    rng = stream(seed)
    layer = np.full((grid.ny, grid.nx), spec.ln_background)
    x = np.arange(grid.nx)
    for _ in range(spec.n_channels):
        y0 = int(rng.integers(y_min, y_max + 1))
        phase = rng.uniform(0.0, 2.0 * np.pi)
        center = np.rint(y0 + spec.amplitude * np.sin(2.0 * np.pi * x / spec.period + phase))
        for i in range(grid.nx):
            c = int(center[i])
            layer[c - half_lo : c + half_hi + 1, i] = spec.ln_channel
    return np.broadcast_to(layer, grid.shape).copy()


def apply_layer_regressions(
    lnKx: np.ndarray,
    regressions,
    phi_bounds: tuple[float, float] = (0.01, 0.35),
) -> tuple[np.ndarray, np.ndarray]:
    """Per-layer phi and lnKz from lnKx; phi clamped into phi_bounds.

    The clamp keeps porosity inside the open interval the rock-physics
    bounds need (denominators vanish at 0 and at critical porosity).
    """
    nz = lnKx.shape[0]
    if len(regressions) != nz:
        raise ValueError(f"need one regression per layer ({nz}), got {len(regressions)}")
    lo, hi = phi_bounds
    phi = np.empty_like(lnKx)
    lnKz = np.empty_like(lnKx)
    for k, reg in enumerate(regressions):
        phi[k] = np.clip(reg.a_phi * lnKx[k] + reg.b_phi, lo, hi)
        lnKz[k] = reg.a_k * lnKx[k] + reg.b_k
    return phi, lnKz


@dataclass(frozen=True)
class ModelLibrary:
    """A stack of lnKx realizations; the first n_ensemble are the initial ensemble."""

    lnKx_fields: np.ndarray  # (n_models, nz, ny, nx)
    kinds: tuple
    seeds: tuple

    @property
    def n_models(self) -> int:
        return self.lnKx_fields.shape[0]

    def save_manifest_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["model_id", "seed", "generator"])
            for i in range(self.n_models):
                w.writerow([i, self.seeds[i], self.kinds[i]])


def draw_field(grid, spec, seed: int):
    """One lnKx realization from any generator spec; returns (field, kind).

    A (ChannelSpec, VariogramSpec) pair draws channel structure plus
    Gaussian within-facies variability.
    """
    if isinstance(spec, VariogramSpec):
        return gaussian_field(grid, spec, seed), "gaussian"
    if isinstance(spec, ChannelSpec):
        return channel_field(grid, spec, seed), "channel"
    if isinstance(spec, tuple) and len(spec) == 2:
        ch, vg = spec
        f = channel_field(grid, ch, seed) + gaussian_field(grid, vg, mix64(seed, 1))
        return f, "channel+gaussian"
    raise TypeError(f"unsupported prior spec: {type(spec)}")


def generate_prior_library(grid: Grid, spec, n_models: int, seed: int) -> ModelLibrary:
    """n_models independent lnKx fields; draw d uses sub-seed mix64(seed, d)."""
    if n_models < 2:
        raise ValueError(f"a library needs at least 2 models, got {n_models}")
    fields = np.empty((n_models,) + grid.shape)
    kinds = []
    seeds = []
    for d in range(n_models):
        sub = mix64(seed, d)
        fields[d], kind = draw_field(grid, spec, sub)
        kinds.append(kind)
        seeds.append(sub)
    return ModelLibrary(lnKx_fields=fields, kinds=tuple(kinds), seeds=tuple(seeds))


def model_from_lnKx(lnKx, regressions, phi_bounds=(0.01, 0.35)) -> ReservoirModel:
    """Complete a ReservoirModel from a lnKx field via the layer regressions."""
    phi, lnKz = apply_layer_regressions(lnKx, regressions, phi_bounds)
    return ReservoirModel(lnKx=lnKx, phi=phi, lnKz=lnKz)
