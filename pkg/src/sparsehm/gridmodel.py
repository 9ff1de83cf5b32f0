"""Grid, reservoir model and ensemble containers.

Cell ordering convention, fixed for the whole package: x varies fastest,
then y, then z.  3D per-cell fields are stored as arrays of shape
``(nz, ny, nx)`` so that a C-order ``ravel()`` yields the canonical flat
ordering ``index = i + nx * (j + ny * k)``.  All linear algebra operates
on active-cell vectors obtained with :func:`vectorize`.

All container types are immutable after construction (arrays are marked
non-writeable), so concurrent reads are safe.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Grid",
    "ReservoirModel",
    "Ensemble",
    "build_grid",
    "vectorize",
    "devectorize",
    "vertical_average",
    "save_model_csv",
    "load_model_csv",
    "save_matrix",
    "load_matrix",
]

_BIN_MAGIC = b"SHMB"
_BIN_VERSION = 1


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Grid:
    """Layered Cartesian grid with an active-cell mask.

    dx, dy are uniform horizontal cell sizes in meters; dz holds one
    thickness per layer.  ``active`` has shape (nz, ny, nx).
    """

    nx: int
    ny: int
    nz: int
    dx: float
    dy: float
    dz: np.ndarray
    active: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dz", _freeze(np.asarray(self.dz, dtype=float)))
        object.__setattr__(self, "active", _freeze(np.asarray(self.active, dtype=bool)))

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nz, self.ny, self.nx)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def n_active(self) -> int:
        return int(self.active.sum())

    @property
    def active_flat(self) -> np.ndarray:
        return self.active.ravel()

    def cell_index(self, i: int, j: int, k: int) -> int:
        """Canonical flat index of cell (i, j, k); i along x."""
        return i + self.nx * (j + self.ny * k)

    def cell_volume(self, k: int) -> float:
        return self.dx * self.dy * float(self.dz[k])


def build_grid(nx, ny, nz, dx, dy, dz_list, active_mask=None) -> Grid:
    """Validate inputs and construct a Grid.

    ``active_mask`` may be flat (length nx*ny*nz, canonical order) or of
    shape (nz, ny, nx); None means all cells active.
    """
    nx, ny, nz = int(nx), int(ny), int(nz)
    if nx < 1 or ny < 1 or nz < 1:
        raise ValueError(f"grid dimensions must be >= 1, got ({nx}, {ny}, {nz})")
    if dx <= 0 or dy <= 0:
        raise ValueError("dx and dy must be positive")
    dz = np.asarray(dz_list, dtype=float)
    if dz.shape != (nz,):
        raise ValueError(f"dz_list must have one entry per layer ({nz}), got shape {dz.shape}")
    if np.any(dz <= 0):
        raise ValueError("all layer thicknesses must be positive")
    if active_mask is None:
        active = np.ones((nz, ny, nx), dtype=bool)
    else:
        active = np.asarray(active_mask, dtype=bool)
        if active.ndim == 1:
            if active.size != nx * ny * nz:
                raise ValueError(
                    f"flat active mask must have length {nx * ny * nz}, got {active.size}"
                )
            active = active.reshape(nz, ny, nx)
        elif active.shape != (nz, ny, nx):
            raise ValueError(f"active mask shape {active.shape} != {(nz, ny, nx)}")
    if not active.any():
        raise ValueError("grid has no active cells")
    return Grid(nx=nx, ny=ny, nz=nz, dx=float(dx), dy=float(dy), dz=dz, active=active)


@dataclass(frozen=True)
class ReservoirModel:
    """Per-cell rock properties on a grid.

    lnKx/lnKz are natural logs of horizontal/vertical permeability in mD;
    permeability is stored and updated in log space throughout and only
    exponentiated at the simulator boundary.  Arrays have grid shape
    (nz, ny, nx); values on inactive cells are ignored.
    """

    lnKx: np.ndarray
    phi: np.ndarray
    lnKz: np.ndarray

    def __post_init__(self):
        lnKx = np.asarray(self.lnKx, dtype=float)
        phi = np.asarray(self.phi, dtype=float)
        lnKz = np.asarray(self.lnKz, dtype=float)
        if not (lnKx.shape == phi.shape == lnKz.shape):
            raise ValueError("lnKx, phi, lnKz must share one shape")
        object.__setattr__(self, "lnKx", _freeze(lnKx))
        object.__setattr__(self, "phi", _freeze(phi))
        object.__setattr__(self, "lnKz", _freeze(lnKz))

    def validate(self, grid: Grid, phi_max: float = 1.0) -> None:
        if self.lnKx.shape != grid.shape:
            raise ValueError(f"model shape {self.lnKx.shape} != grid shape {grid.shape}")
        act = grid.active
        for name, arr in (("lnKx", self.lnKx), ("phi", self.phi), ("lnKz", self.lnKz)):
            if not np.all(np.isfinite(arr[act])):
                raise ValueError(f"{name} has non-finite values on active cells")
        if np.any(self.phi[act] <= 0.0) or np.any(self.phi[act] >= phi_max):
            raise ValueError(f"phi must lie in (0, {phi_max}) on active cells")


def vectorize(model: ReservoirModel, grid: Grid) -> np.ndarray:
    """lnKx over active cells in canonical order (the assimilation state)."""
    if model.lnKx.shape != grid.shape:
        raise ValueError(f"model shape {model.lnKx.shape} != grid shape {grid.shape}")
    return model.lnKx.ravel()[grid.active_flat].copy()


def devectorize(state: np.ndarray, grid: Grid, fill: float = np.nan) -> np.ndarray:
    """Inverse of :func:`vectorize`: scatter a state vector back to grid shape."""
    state = np.asarray(state, dtype=float)
    if state.shape != (grid.n_active,):
        raise ValueError(f"state length {state.shape} != active count ({grid.n_active},)")
    full = np.full(grid.n_cells, fill, dtype=float)
    full[grid.active_flat] = state
    return full.reshape(grid.shape)


@dataclass(frozen=True)
class Ensemble:
    """N_ens state vectors of equal length, stacked as rows.

    kind is 'raw-lnK' (vectors over active cells) or 'sparse-coefficients'
    (dictionary coefficient vectors).
    """

    members: np.ndarray
    kind: str = "raw-lnK"

    _KINDS = ("raw-lnK", "sparse-coefficients")

    def __post_init__(self):
        m = np.asarray(self.members, dtype=float)
        if m.ndim != 2:
            raise ValueError("members must be a 2D array (n_members, state_length)")
        if m.shape[0] < 2:
            raise ValueError(f"an ensemble needs at least 2 members, got {m.shape[0]}")
        if self.kind not in self._KINDS:
            raise ValueError(f"kind must be one of {self._KINDS}, got {self.kind!r}")
        object.__setattr__(self, "members", _freeze(m))

    @property
    def n_members(self) -> int:
        return self.members.shape[0]

    @property
    def state_length(self) -> int:
        return self.members.shape[1]


def vertical_average(field3d: np.ndarray, grid: Grid) -> np.ndarray:
    """Thickness-weighted average over active layers -> (ny, nx) map.

    Columns with no active layer come out as NaN.
    """
    if field3d.shape != grid.shape:
        raise ValueError(f"field shape {field3d.shape} != grid shape {grid.shape}")
    weights = grid.active * grid.dz[:, None, None]
    wsum = weights.sum(axis=0)
    num = (np.where(grid.active, field3d, 0.0) * weights).sum(axis=0)
    return np.where(wsum > 0, num / np.where(wsum > 0, wsum, 1.0), np.nan)


# ---------------------------------------------------------------------------
# Serialization: CSV for models, flat little-endian binary for matrices.
# ---------------------------------------------------------------------------

def save_model_csv(path, model: ReservoirModel, grid: Grid) -> None:
    """One row per active cell: i,j,k,lnKx,phi,lnKz (full float precision)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["i", "j", "k", "lnKx", "phi", "lnKz"])
        for k in range(grid.nz):
            for j in range(grid.ny):
                for i in range(grid.nx):
                    if grid.active[k, j, i]:
                        w.writerow(
                            [i, j, k]
                            + [format(v, ".17g") for v in
                               (model.lnKx[k, j, i], model.phi[k, j, i], model.lnKz[k, j, i])]
                        )


def load_model_csv(path, grid: Grid) -> ReservoirModel:
    lnKx = np.full(grid.shape, np.nan)
    phi = np.full(grid.shape, np.nan)
    lnKz = np.full(grid.shape, np.nan)
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        if header[:3] != ["i", "j", "k"]:
            raise ValueError(f"unexpected model CSV header: {header}")
        for row in r:
            i, j, k = int(row[0]), int(row[1]), int(row[2])
            lnKx[k, j, i] = float(row[3])
            phi[k, j, i] = float(row[4])
            lnKz[k, j, i] = float(row[5])
    return ReservoirModel(lnKx=lnKx, phi=phi, lnKz=lnKz)


def save_matrix(path, matrix: np.ndarray) -> None:
    """Flat binary matrix format: magic 'SHMB', uint32 version, uint32 rows,
    uint32 cols, then float64 row-major little-endian data.
    """
    m = np.ascontiguousarray(np.atleast_2d(np.asarray(matrix, dtype="<f8")))
    with open(path, "wb") as f:
        f.write(_BIN_MAGIC)
        f.write(struct.pack("<III", _BIN_VERSION, m.shape[0], m.shape[1]))
        f.write(m.tobytes())


def load_matrix(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _BIN_MAGIC:
            raise ValueError(f"{path}: not a flat binary matrix file (magic {magic!r})")
        version, rows, cols = struct.unpack("<III", f.read(12))
        if version != _BIN_VERSION:
            raise ValueError(f"{path}: unsupported binary version {version}")
        data = np.frombuffer(f.read(rows * cols * 8), dtype="<f8")
    if data.size != rows * cols:
        raise ValueError(f"{path}: truncated payload")
    return data.reshape(rows, cols).copy()
