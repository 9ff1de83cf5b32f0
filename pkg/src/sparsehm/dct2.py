"""2D DCT compression of impedance maps.

Orthonormal DCT-II convention throughout (forward and inverse are exact
adjoints, so Parseval holds and truncation energy accounting is exact).
"Leading" coefficients are taken in zigzag (anti-diagonal) order starting
from the DC corner, the standard low-frequency-first ordering.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.fft import dctn, idctn

__all__ = [
    "DctCoefficients",
    "zigzag_indices",
    "dct2_forward",
    "dct2_inverse",
    "truncate",
    "energy_fraction",
    "reconstruct_from_kept",
    "save_kept_csv",
    "load_kept_csv",
]


@lru_cache(maxsize=32)
def zigzag_indices(n_rows: int, n_cols: int) -> tuple:
    """All (row, col) pairs of an n_rows x n_cols matrix in zigzag order.

    Anti-diagonals r + c = s for s = 0, 1, ...; even diagonals are walked
    bottom-left to top-right, odd ones top-right to bottom-left (JPEG
    convention, generalized to rectangles by clipping).
    """
    order = []
    for s in range(n_rows + n_cols - 1):
        r_lo = max(0, s - n_cols + 1)
        r_hi = min(s, n_rows - 1)
        rng = range(r_hi, r_lo - 1, -1) if s % 2 == 0 else range(r_lo, r_hi + 1)
        order.extend((r, s - r) for r in rng)
    return tuple(order)


@dataclass(frozen=True)
class DctCoefficients:
    """Coefficient matrix plus the kept leading set (zigzag order)."""

    full: np.ndarray
    kept_indices: np.ndarray  # (k, 2) int array of (row, col)
    kept_values: np.ndarray  # (k,)

    def __post_init__(self):
        idx = np.asarray(self.kept_indices, dtype=int).reshape(-1, 2)
        vals = np.asarray(self.kept_values, dtype=float).ravel()
        if idx.shape[0] != vals.shape[0]:
            raise ValueError("kept_indices and kept_values disagree in length")
        if idx.shape[0] > self.full.size:
            raise ValueError("cannot keep more coefficients than the matrix holds")
        if len({(int(r), int(c)) for r, c in idx}) != idx.shape[0]:
            raise ValueError("kept indices must be unique")
        if idx.size and (
            idx.min() < 0
            or idx[:, 0].max() >= self.full.shape[0]
            or idx[:, 1].max() >= self.full.shape[1]
        ):
            raise ValueError("kept indices out of bounds")
        object.__setattr__(self, "kept_indices", idx)
        object.__setattr__(self, "kept_values", vals)

    @property
    def n_kept(self) -> int:
        return self.kept_values.shape[0]


def dct2_forward(image: np.ndarray) -> DctCoefficients:
    """Orthonormal 2D DCT-II of an image; initially every coefficient is kept."""
    image = np.asarray(image, dtype=float)
    if image.ndim != 2 or image.shape[0] < 1 or image.shape[1] < 1:
        raise ValueError(f"expected a 2D image, got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValueError("image must be finite-valued")
    coeff = dctn(image, type=2, norm="ortho")
    idx = np.array(zigzag_indices(*image.shape), dtype=int)
    return DctCoefficients(full=coeff, kept_indices=idx, kept_values=coeff[idx[:, 0], idx[:, 1]])


def dct2_inverse(coeffs) -> np.ndarray:
    """Inverse orthonormal 2D DCT; accepts DctCoefficients or a plain matrix."""
    matrix = coeffs.full if isinstance(coeffs, DctCoefficients) else np.asarray(coeffs, dtype=float)
    return idctn(matrix, type=2, norm="ortho")


def energy_fraction(coeffs: DctCoefficients, reference: np.ndarray | None = None) -> float:
    """Energy (sum of squares) of the kept set relative to a full matrix.

    After truncation the object's own matrix is already sparse, so pass
    the pre-truncation coefficient matrix as ``reference`` to measure
    how much of the original energy survived.
    """
    total = float(np.sum((coeffs.full if reference is None else np.asarray(reference)) ** 2))
    if total == 0.0:
        return 1.0
    return float(np.sum(coeffs.kept_values**2)) / total


def truncate(coeffs: DctCoefficients, keep: int | None = None, energy: float | None = None) -> DctCoefficients:
    """Keep a zigzag prefix of the coefficients; the rest are zeroed.

    Exactly one of ``keep`` (prefix length) and ``energy`` (minimal prefix
    whose energy fraction reaches the threshold) must be given.
    """
    if (keep is None) == (energy is None):
        raise ValueError("specify exactly one of keep= and energy=")
    order = np.array(zigzag_indices(*coeffs.full.shape), dtype=int)
    values = coeffs.full[order[:, 0], order[:, 1]]
    if keep is not None:
        if not 1 <= keep <= coeffs.full.size:
            raise ValueError(f"keep must be in [1, {coeffs.full.size}], got {keep}")
        k = int(keep)
    else:
        if not 0.0 < energy <= 1.0:
            raise ValueError(f"energy threshold must be in (0, 1], got {energy}")
        total = float(np.sum(values**2))
        if energy >= 1.0:
            k = coeffs.full.size
        elif total == 0.0:
            k = 1
        else:
            frac = np.cumsum(values**2) / total
            k = int(np.searchsorted(frac, energy) + 1)
            k = min(k, coeffs.full.size)
    sparse = np.zeros_like(coeffs.full)
    kept = order[:k]
    sparse[kept[:, 0], kept[:, 1]] = values[:k]
    return DctCoefficients(full=sparse, kept_indices=kept, kept_values=values[:k].copy())


def reconstruct_from_kept(indices, values, shape) -> np.ndarray:
    """Image obtained from a kept-coefficient set alone (others zero)."""
    matrix = np.zeros(shape)
    idx = np.asarray(indices, dtype=int).reshape(-1, 2)
    matrix[idx[:, 0], idx[:, 1]] = np.asarray(values, dtype=float)
    return idctn(matrix, type=2, norm="ortho")


def save_kept_csv(path, coeffs: DctCoefficients) -> None:
    """Kept set as rows (row_index, col_index, value) for reproducible obs vectors."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["row", "col", "value"])
        for (r, c), v in zip(coeffs.kept_indices, coeffs.kept_values):
            w.writerow([int(r), int(c), format(float(v), ".17g")])


def load_kept_csv(path) -> tuple[np.ndarray, np.ndarray]:
    idx, vals = [], []
    with open(path, newline="") as f:
        r = csv.reader(f)
        next(r)
        for row in r:
            idx.append((int(row[0]), int(row[1])))
            vals.append(float(row[2]))
    return np.array(idx, dtype=int).reshape(-1, 2), np.array(vals)
