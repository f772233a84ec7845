"""Eigen-structure of the inverse susceptance matrix and its stability under
single-line outages: principal-angle subspace distances, eigenvalue
separation constants, and the two perturbation bounds (Frobenius and l2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grid_model
from .errors import (
    DegenerateSpectrum, NoConvergence, NotOrthonormal, NotPositiveDefinite,
    NotSymmetric, ShapeMismatch,
)

DEGENERATE_TOL = 1e-12


@dataclass(frozen=True)
class EigenBasis:
    """Eigenvalues (non-increasing) and matching orthonormal eigenvectors."""
    values: np.ndarray
    vectors: np.ndarray

    def leading(self, s):
        """First s eigenvector columns."""
        return self.vectors[:, :s]


def eigendecompose_spd(M):
    """Full eigendecomposition of a symmetric positive-definite matrix.

    Eigenvalues are returned in non-increasing order; each eigenvector's
    sign is fixed so its largest-magnitude entry is positive, making the
    basis deterministic across runs and platforms.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ShapeMismatch("expected a square matrix")
    if not np.allclose(M, M.T, atol=1e-10, rtol=0.0):
        raise NotSymmetric("matrix is not symmetric within 1e-10")
    try:
        w, U = np.linalg.eigh(M)
    except np.linalg.LinAlgError as exc:
        raise NoConvergence("eigenvalue iteration failed") from exc
    if w[0] <= 0.0:
        raise NotPositiveDefinite(f"smallest eigenvalue {w[0]:.3e} <= 0")
    order = np.argsort(w)[::-1]
    w, U = w[order], U[:, order]
    pick = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[pick, np.arange(U.shape[1])])
    signs[signs == 0.0] = 1.0
    return EigenBasis(values=w, vectors=U * signs)


def _check_orthonormal(U, name):
    g = U.T @ U
    if not np.allclose(g, np.eye(U.shape[1]), atol=1e-8, rtol=0.0):
        raise NotOrthonormal(f"{name} does not have orthonormal columns")


def subspace_distance(U_a, U_b, norm="frobenius"):
    """Principal-angle distance ||sin Theta|| between two column spans.

    Computed from the singular values of U_a^T U_b, clamped to [0, 1] so
    round-off cannot produce a negative radicand. Symmetric in its
    arguments and invariant to orthonormal re-basis of either span.
    """
    U_a = np.asarray(U_a, dtype=np.float64)
    U_b = np.asarray(U_b, dtype=np.float64)
    if U_a.shape != U_b.shape:
        raise ShapeMismatch(f"subspace shapes differ: {U_a.shape} vs {U_b.shape}")
    _check_orthonormal(U_a, "first basis")
    _check_orthonormal(U_b, "second basis")
    sigma = np.linalg.svd(U_a.T @ U_b, compute_uv=False)
    sin_theta = np.sqrt(1.0 - np.clip(sigma, 0.0, 1.0) ** 2)
    if norm == "frobenius":
        return float(np.linalg.norm(sin_theta))
    if norm == "spectral":
        return float(sin_theta.max())
    raise ValueError(f"unknown norm {norm!r}")


@dataclass(frozen=True)
class SeparationConstants:
    """Minimum eigenvalue separations guarding a leading s-subspace.

    `delta` and `delta_prime` take the minimum over gap indices
    1..min(s, N-2), i.e. they include the boundary gap to the (s+1)-th
    eigenvalue whenever it exists; `delta_interior`/`delta_prime_interior`
    restrict to indices 1..s-1 (the narrower convention) for reporting.
    """
    s: int
    delta: float
    delta_prime: float
    delta_interior: float
    delta_prime_interior: float


def separation_constants(basis, s):
    """Eigenvalue separation constants for the leading s-dimensional subspace."""
    lam = basis.values
    n = len(lam)
    if not 1 <= s <= n:
        raise ShapeMismatch(f"s={s} outside 1..{n}")
    gaps = lam[:-1] - lam[1:]
    inv_gaps = 1.0 / lam[1:] - 1.0 / lam[:-1]
    hi = min(s, n - 1)
    if hi < 1:
        raise DegenerateSpectrum("no eigenvalue gap exists for s with N-1 = 1")
    delta = float(gaps[:hi].min())
    delta_prime = float(inv_gaps[:hi].min())
    interior = max(s - 1, 1) if s > 1 else hi
    d_int = float(gaps[:min(s - 1, n - 1)].min()) if s > 1 else delta
    dp_int = float(inv_gaps[:min(s - 1, n - 1)].min()) if s > 1 else delta_prime
    if delta < DEGENERATE_TOL or delta_prime < DEGENERATE_TOL:
        raise DegenerateSpectrum(
            f"separation below tolerance: delta={delta:.3e}, delta'={delta_prime:.3e}")
    return SeparationConstants(s=int(s), delta=delta, delta_prime=delta_prime,
                               delta_interior=d_int, delta_prime_interior=dp_int)


def spectral_energy_fraction(basis, s):
    """Share of total eigenvalue mass carried by the leading s eigenvalues."""
    lam = basis.values
    if not 1 <= s <= len(lam):
        raise ShapeMismatch(f"s={s} outside 1..{len(lam)}")
    return float(lam[:s].sum() / lam.sum())


def choose_subspace_dim(basis, min_energy=0.5, gap_tol=1e-8):
    """Smallest s reaching `min_energy`, shrunk while the boundary gap is
    degenerate so the separation constants stay meaningful."""
    lam = basis.values
    cum = np.cumsum(lam) / lam.sum()
    s = int(np.argmax(cum >= min_energy)) + 1
    while s > 1 and lam[s - 1] - lam[min(s, len(lam) - 1)] < gap_tol:
        s -= 1
    return s


def dk_bound(grid, line, constants, norm="frobenius"):
    """Upper bound on the leading-subspace rotation under a single line outage.

    Frobenius form: min(||Delta_k||_F / delta, 2 / (x_k * delta'));
    l2 form:        min(2 ||Delta_k||_2 / delta, 4 / (x_k * delta')).
    """
    delta_k, _ = grid_model.rank_one_inverse_update(grid, line)
    x_k = grid.x[int(line)]
    if norm == "frobenius":
        return float(min(np.linalg.norm(delta_k, "fro") / constants.delta,
                         2.0 / (x_k * constants.delta_prime)))
    if norm == "spectral":
        return float(min(2.0 * np.linalg.norm(delta_k, 2) / constants.delta,
                         4.0 / (x_k * constants.delta_prime)))
    raise ValueError(f"unknown norm {norm!r}")


def outage_scenario_report(grid, lines, s=None):
    """Per-line stability diagnostics for a set of candidate single outages.

    For each non-bridge line: separation constants, perturbation norms,
    measured subspace distances against the rebuilt network, and both bound
    terms in both norms. Bridge lines are reported with bridge=True and no
    numbers. Returns (s, list of row dicts).
    """
    basis = eigendecompose_spd(grid.B_inv)
    if s is None:
        s = choose_subspace_dim(basis)
    consts = separation_constants(basis, s)
    U_s = basis.leading(s)
    rows = []
    for k in lines:
        k = int(k)
        row = {"line": k,
               "from_bus": int(grid.bus_ids[grid.from_idx[k]]),
               "to_bus": int(grid.bus_ids[grid.to_idx[k]]),
               "x": float(grid.x[k])}
        try:
            delta_k, _ = grid_model.rank_one_inverse_update(grid, k)
            post = grid_model.apply_outage(grid, {k}).post_grid
        except Exception:  # bridge or split
            row["bridge"] = True
            rows.append(row)
            continue
        basis_post = eigendecompose_spd(post.B_inv)
        row.update({
            "bridge": False,
            "s": s,
            "delta": consts.delta,
            "delta_prime": consts.delta_prime,
            "delta_norm_fro": float(np.linalg.norm(delta_k, "fro")),
            "delta_norm_2": float(np.linalg.norm(delta_k, 2)),
            "distance_fro": subspace_distance(U_s, basis_post.leading(s)),
            "distance_2": subspace_distance(U_s, basis_post.leading(s), "spectral"),
            "bound_fro_term1": float(np.linalg.norm(delta_k, "fro") / consts.delta),
            "bound_fro_term2": float(2.0 / (grid.x[k] * consts.delta_prime)),
            "bound_fro": dk_bound(grid, k, consts),
            "bound_2": dk_bound(grid, k, consts, "spectral"),
        })
        rows.append(row)
    return s, rows
