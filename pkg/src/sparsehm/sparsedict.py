"""K-SVD dictionary learning and OMP sparse coding of permeability fields.

A dictionary is an (N_Y x d) matrix of unit-norm atoms, usually
over-complete (d > N_Y is allowed but not required).  Training alternates
three stages: K-means initialization of the atoms from the training
signals, OMP sparse coding of every signal, and sequential rank-1 SVD
updates of each atom together with the coefficients on its support.

Everything here is deterministic given the seed: K-means uses a seeded
generator, atoms are updated in ascending index order, and SVD signs are
canonicalized.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .gridmodel import Ensemble, load_matrix, save_matrix
from .seeding import mix64, stream

__all__ = [
    "Dictionary",
    "SparseCode",
    "omp",
    "omp_batch",
    "ksvd_train",
    "ksvd_dictionary_update",
    "encode_ensemble",
    "decode_ensemble",
    "save_dictionary",
    "load_dictionary",
]


@dataclass(frozen=True)
class Dictionary:
    """Atoms as columns; every atom has norm <= 1 and none is all-zero."""

    atoms: np.ndarray  # (N_Y, d)

    def __post_init__(self):
        a = np.asarray(self.atoms, dtype=float)
        if a.ndim != 2:
            raise ValueError("atoms must be a 2D (signal_dim, n_atoms) matrix")
        norms = np.linalg.norm(a, axis=0)
        if np.any(norms > 1.0 + 1e-9):
            raise ValueError(f"atom norms must be <= 1, max is {norms.max()}")
        if np.any(norms == 0.0):
            raise ValueError("dictionary contains an all-zero atom")
        object.__setattr__(self, "atoms", a)

    @property
    def signal_dim(self) -> int:
        return self.atoms.shape[0]

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[1]


@dataclass(frozen=True)
class SparseCode:
    coefficients: np.ndarray  # dense, length d; exactly zero off support
    support: np.ndarray
    residual_norm: float


def omp(y: np.ndarray, dictionary: Dictionary, t0: int, eta: float = 0.0) -> SparseCode:
    """Orthogonal matching pursuit.

    Greedily selects the atom with the largest |correlation| with the
    current residual, then re-projects y onto all selected atoms (least
    squares), so the residual stays orthogonal to the selected span.
    Stops at t0 atoms or when the residual norm drops to eta.
    """
    y = np.asarray(y, dtype=float)
    atoms = dictionary.atoms
    if y.shape != (atoms.shape[0],):
        raise ValueError(f"signal length {y.shape} != dictionary signal dim {atoms.shape[0]}")
    if t0 < 1:
        raise ValueError("t0 must be >= 1")
    if eta < 0:
        raise ValueError("eta must be >= 0")

    coeffs = np.zeros(atoms.shape[1])
    support: list[int] = []
    residual = y.copy()
    y_norm = float(np.linalg.norm(y))
    if y_norm == 0.0:
        return SparseCode(coeffs, np.array([], dtype=int), 0.0)

    t0 = min(t0, atoms.shape[1])
    x_sel = np.zeros(0)
    while len(support) < t0:
        corr = atoms.T @ residual
        corr[support] = 0.0
        j = int(np.argmax(np.abs(corr)))
        if abs(corr[j]) <= 1e-13 * y_norm:
            break
        support.append(j)
        x_sel, *_ = np.linalg.lstsq(atoms[:, support], y, rcond=None)
        residual = y - atoms[:, support] @ x_sel
        if np.linalg.norm(residual) <= max(eta, 1e-12 * y_norm):
            break

    coeffs[support] = x_sel
    return SparseCode(coeffs, np.array(support, dtype=int), float(np.linalg.norm(residual)))


def omp_batch(signals: np.ndarray, dictionary: Dictionary, t0: int, eta: float = 0.0) -> np.ndarray:
    """Column-wise OMP of a (signal_dim, n_signals) matrix -> (d, n_signals) codes.

    Gram-based batch variant: correlations are maintained through
    G = D^T D so the signal dimension is touched once per signal.  The
    selection rule and stopping tests match :func:`omp` exactly.
    """
    signals = np.asarray(signals, dtype=float)
    atoms = dictionary.atoms
    if signals.shape[0] != atoms.shape[0]:
        raise ValueError(f"signal dim {signals.shape[0]} != dictionary dim {atoms.shape[0]}")
    d = atoms.shape[1]
    t0 = min(max(t0, 1), d)
    gram = atoms.T @ atoms
    h0_all = atoms.T @ signals
    codes = np.zeros((d, signals.shape[1]))
    for s in range(signals.shape[1]):
        y_norm2 = float(signals[:, s] @ signals[:, s])
        if y_norm2 == 0.0:
            continue
        y_norm = np.sqrt(y_norm2)
        h0 = h0_all[:, s]
        h = h0.copy()
        support: list[int] = []
        x_sel = np.zeros(0)
        while len(support) < t0:
            h_masked = h.copy()
            h_masked[support] = 0.0
            j = int(np.argmax(np.abs(h_masked)))
            if abs(h_masked[j]) <= 1e-13 * y_norm:
                break
            support.append(j)
            sub = gram[np.ix_(support, support)]
            try:
                x_sel = np.linalg.solve(sub, h0[support])
            except np.linalg.LinAlgError:
                x_sel, *_ = np.linalg.lstsq(atoms[:, support], signals[:, s], rcond=None)
            h = h0 - gram[:, support] @ x_sel
            resid2 = max(y_norm2 - float(x_sel @ h0[support]), 0.0)
            if np.sqrt(resid2) <= max(eta, 1e-12 * y_norm):
                break
        codes[support, s] = x_sel
    return codes


def _canonical_sign(u: np.ndarray) -> float:
    """Sign that makes the largest-magnitude entry of u positive."""
    return 1.0 if u[int(np.argmax(np.abs(u)))] >= 0 else -1.0


def ksvd_dictionary_update(atoms: np.ndarray, codes: np.ndarray, signals: np.ndarray):
    """One pass of sequential rank-1 atom updates (supports held fixed).

    For each atom in ascending order, the residual matrix restricted to
    the signals using it is approximated by its leading singular pair;
    the atom and the coefficients on its support are replaced by that
    pair.  This never increases ||signals - atoms @ codes||_F.  Unused
    atoms are left untouched here (hygiene is a separate step).

    Returns updated (atoms, codes) copies.
    """
    atoms = atoms.copy()
    codes = codes.copy()
    residual = signals - atoms @ codes
    for j in range(atoms.shape[1]):
        users = np.flatnonzero(codes[j] != 0.0)
        if users.size == 0:
            continue
        # E_j = residual on the users, with atom j's own contribution re-added
        e_j = residual[:, users] + np.outer(atoms[:, j], codes[j, users])
        u, s, vt = np.linalg.svd(e_j, full_matrices=False)
        sign = _canonical_sign(u[:, 0])
        new_atom = sign * u[:, 0]
        new_coeff = sign * s[0] * vt[0]
        residual[:, users] = e_j - np.outer(new_atom, new_coeff)
        atoms[:, j] = new_atom
        codes[j, users] = new_coeff
    return atoms, codes


def _kmeans_atoms(signals: np.ndarray, k: int, rng, n_iter: int = 20) -> np.ndarray:
    """Deterministic Lloyd k-means over signal columns; returns unit-norm means.

    kmeans++ seeding; empty clusters are re-seeded from the signal pool.
    """
    dim, n = signals.shape
    # kmeans++ seeding
    centers = np.empty((dim, k))
    centers[:, 0] = signals[:, int(rng.integers(n))]
    d2 = np.sum((signals - centers[:, [0]]) ** 2, axis=0)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[:, c] = signals[:, int(rng.integers(n))]
        else:
            centers[:, c] = signals[:, int(rng.choice(n, p=d2 / total))]
        d2 = np.minimum(d2, np.sum((signals - centers[:, [c]]) ** 2, axis=0))
    for _ in range(n_iter):
        # assignment by squared distance, then mean update
        dist = (
            np.sum(centers**2, axis=0)[None, :]
            - 2.0 * signals.T @ centers
        )
        labels = np.argmin(dist, axis=1)
        for c in range(k):
            members = labels == c
            if members.any():
                centers[:, c] = signals[:, members].mean(axis=1)
            else:
                centers[:, c] = signals[:, int(rng.integers(n))]
    norms = np.linalg.norm(centers, axis=0)
    for c in range(k):
        if norms[c] <= 1e-12:
            centers[:, c] = signals[:, int(rng.integers(n))]
            norms[c] = np.linalg.norm(centers[:, c])
            if norms[c] <= 1e-12:  # all-zero training signal
                centers[:, c] = rng.standard_normal(dim)
                norms[c] = np.linalg.norm(centers[:, c])
    return centers / norms


def _replace_bad_atoms(atoms, codes, signals, coherence_limit, rng, min_uses=4):
    """Replace dead and mutually coherent atoms by worst-represented signals.

    "Dead" follows the customary use-count threshold: an atom carried by
    fewer than min_uses signals is reseeded, which is what lets training
    escape the local minima where a near-duplicate atom starves another.
    """
    residual_norms = np.linalg.norm(signals - atoms @ codes, axis=0)
    order = np.argsort(-residual_norms)  # worst first
    next_pick = 0

    def fresh_atom():
        nonlocal next_pick
        while next_pick < order.size:
            cand = signals[:, order[next_pick]]
            next_pick += 1
            norm = np.linalg.norm(cand)
            if norm > 1e-12:
                return cand / norm
        v = rng.standard_normal(atoms.shape[0])
        return v / np.linalg.norm(v)

    uses = (codes != 0.0).sum(axis=1)
    threshold = min(min_uses, max(1, codes.shape[1] // codes.shape[0]))
    for j in range(atoms.shape[1]):
        if uses[j] < threshold:
            atoms[:, j] = fresh_atom()
            codes[j, :] = 0.0
    gram = np.abs(atoms.T @ atoms)
    np.fill_diagonal(gram, 0.0)
    for j in range(atoms.shape[1]):
        if gram[:j, j].size and gram[:j, j].max() > coherence_limit:
            atoms[:, j] = fresh_atom()
            codes[j, :] = 0.0
            gram[j, :] = np.abs(atoms[:, j] @ atoms)
            gram[j, j] = 0.0
            gram[:, j] = gram[j, :]
    return atoms, codes


def _ksvd_single(signals, d, t0, n_sweeps, seed, eta, coherence_limit, kick, plateau_tol):
    """One training run; returns (atoms of the best sweep, its error)."""
    rng = stream(seed)
    n = signals.shape[1]
    if n >= d:
        atoms = _kmeans_atoms(signals, d, rng)
    else:
        atoms = _kmeans_atoms(signals, n, rng)
        extra = rng.standard_normal((signals.shape[0], d - n))
        atoms = np.hstack([atoms, extra / np.linalg.norm(extra, axis=0)])

    sig_norm = np.linalg.norm(signals)
    prev_err = np.inf
    best_err, best_atoms = np.inf, atoms.copy()
    for sweep in range(n_sweeps):
        codes = omp_batch(signals, Dictionary(atoms), t0, eta)
        atoms, codes = ksvd_dictionary_update(atoms, codes, signals)
        err = np.linalg.norm(signals - atoms @ codes) / max(sig_norm, 1e-300)
        if err < best_err:
            best_err, best_atoms = err, atoms.copy()
        if (
            kick > 0
            and err > 1e-7
            and err > prev_err * (1.0 - plateau_tol)
            and sweep < n_sweeps - 2
        ):
            # plateau escape: reseed the lowest-energy atoms with the
            # worst-represented signals (which concentrate any direction
            # the dictionary is missing); the best-sweep snapshot makes
            # the exploration risk-free
            resid = np.linalg.norm(signals - atoms @ codes, axis=0)
            worst = np.argsort(-resid)
            value = np.sum(codes**2, axis=1)
            victims = np.argsort(value)[: min(kick, d)]
            for v, w in zip(victims, worst):
                cand = signals[:, w]
                cn = np.linalg.norm(cand)
                if cn > 1e-12:
                    atoms[:, v] = cand / cn
                    codes[v, :] = 0.0
        atoms, codes = _replace_bad_atoms(atoms, codes, signals, coherence_limit, rng)
        prev_err = err
    return best_atoms, best_err


def ksvd_train(
    signals: np.ndarray,
    d: int,
    t0: int,
    n_sweeps: int,
    seed: int,
    eta: float = 0.0,
    coherence_limit: float = 0.99,
    kick: int = 3,
    plateau_tol: float = 3e-3,
    n_restarts: int = 1,
) -> Dictionary:
    """Learn a d-atom dictionary from (signal_dim, n_signals) training data.

    K-means cluster means initialize the atoms; each sweep runs OMP
    coding of all signals followed by the sequential rank-1 atom updates,
    with dead/coherent atoms replaced by the worst-represented signals.
    When a sweep stalls, up to ``kick`` low-energy atoms are reseeded
    from the worst signals; the dictionary returned is the best sweep of
    the best of ``n_restarts`` independently seeded runs.
    """
    signals = np.asarray(signals, dtype=float)
    if signals.ndim != 2:
        raise ValueError("signals must be (signal_dim, n_signals)")
    if d < 1 or t0 < 1 or n_sweeps < 1 or n_restarts < 1:
        raise ValueError("d, t0, n_sweeps and n_restarts must all be >= 1")

    best_err, best_atoms = np.inf, None
    for r in range(n_restarts):
        atoms, err = _ksvd_single(
            signals, d, t0, n_sweeps, mix64(seed, r), eta, coherence_limit, kick, plateau_tol
        )
        if err < best_err:
            best_err, best_atoms = err, atoms

    norms = np.linalg.norm(best_atoms, axis=0)
    atoms = best_atoms / np.where(norms > 0, norms, 1.0)
    for j in range(d):
        atoms[:, j] *= _canonical_sign(atoms[:, j])
    return Dictionary(atoms)


def encode_ensemble(ensemble: Ensemble, dictionary: Dictionary, t0: int, eta: float = 0.0) -> Ensemble:
    """OMP-code every raw member into a dense coefficient state vector."""
    if ensemble.kind != "raw-lnK":
        raise ValueError("encode_ensemble expects a raw-lnK ensemble")
    if ensemble.state_length != dictionary.signal_dim:
        raise ValueError(
            f"member length {ensemble.state_length} != dictionary signal dim {dictionary.signal_dim}"
        )
    codes = omp_batch(ensemble.members.T, dictionary, t0, eta)
    return Ensemble(members=codes.T, kind="sparse-coefficients")


def decode_ensemble(ensemble: Ensemble, dictionary: Dictionary) -> Ensemble:
    """Linear decode: member i -> dictionary @ coefficients_i."""
    if ensemble.kind != "sparse-coefficients":
        raise ValueError("decode_ensemble expects a sparse-coefficients ensemble")
    if ensemble.state_length != dictionary.n_atoms:
        raise ValueError(
            f"member length {ensemble.state_length} != atom count {dictionary.n_atoms}"
        )
    return Ensemble(members=ensemble.members @ dictionary.atoms.T, kind="raw-lnK")


def save_dictionary(path_base, dictionary: Dictionary, meta: dict | None = None) -> None:
    """Atoms in the flat binary format plus a JSON sidecar of metadata."""
    base = Path(path_base)
    save_matrix(base.with_suffix(".bin"), dictionary.atoms)
    payload = dict(meta or {})
    payload["signal_dim"] = dictionary.signal_dim
    payload["n_atoms"] = dictionary.n_atoms
    payload["atoms_sha256"] = hashlib.sha256(
        np.ascontiguousarray(dictionary.atoms).tobytes()
    ).hexdigest()
    base.with_suffix(".json").write_text(json.dumps(payload, indent=2, sort_keys=True))


def load_dictionary(path_base) -> Dictionary:
    base = Path(path_base)
    return Dictionary(atoms=load_matrix(base.with_suffix(".bin")))
