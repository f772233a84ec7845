"""Topology-derived linear algebra: incidence, reduced susceptance matrix and
its inverse, injection shift factors, the graph-filter sparsity mask, and
line-outage machinery including the rank-one inverse update.

The susceptance weight of line l is 1/x_l, so the reduced matrix is the
weighted graph Laplacian with the reference bus removed. An optional
tap-aware mode weights the from-side incidence entry by 1/tap (the voltage
model of off-nominal transformers); it coincides with the default mode on
networks without transformers and is used for spectral diagnostics only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import BridgeLine, Disconnected, SingularB, WouldDisconnect

BRIDGE_TOL = 1e-12


@dataclass(frozen=True)
class GridLinAlg:
    """Immutable bundle of topology matrices for one live network."""
    n_buses: int
    ref_index: int                  # positional index of the reference bus
    bus_ids: np.ndarray             # (N,) original bus ids
    from_idx: np.ndarray            # (E,) positional from-bus per live line
    to_idx: np.ndarray              # (E,) positional to-bus per live line
    x: np.ndarray                   # (E,) line reactances
    tap: np.ndarray                 # (E,) turns ratios (1.0 = none)
    rate_a: np.ndarray              # (E,) flow limits, p.u.
    y_mag: np.ndarray               # (E,) admittance magnitudes, p.u.
    A_red: np.ndarray               # (E, N-1) reduced incidence (tap-weighted)
    B_red: np.ndarray               # (N-1, N-1) reduced susceptance matrix
    B_inv: np.ndarray               # dense inverse of B_red
    S: np.ndarray                   # (E, N) shift factors, zero ref column
    mask: np.ndarray                # (N, N) bool filter support
    tap_model: bool

    @property
    def n_lines(self):
        return len(self.x)

    @property
    def nonref(self):
        """Positional indices of the non-reference buses, in order."""
        return np.array([i for i in range(self.n_buses) if i != self.ref_index])

    def solve_b(self, rhs):
        """Solve B_red @ theta = rhs via the cached Cholesky factorization."""
        return cho_solve(self._chol(), rhs)

    def _chol(self):
        # cached lazily; frozen dataclass, so stash via object.__setattr__
        if not hasattr(self, "_chol_cache"):
            object.__setattr__(self, "_chol_cache", cho_factor(self.B_red))
        return self._chol_cache


def _freeze(arr):
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def _line_vectors(n, from_idx, to_idx, tap, ref_index, tap_model):
    """Reduced per-line incidence vectors a_l (rows of A_red)."""
    E = len(from_idx)
    A = np.zeros((E, n))
    w_from = 1.0 / tap if tap_model else np.ones(E)
    A[np.arange(E), from_idx] = w_from
    A[np.arange(E), to_idx] -= 1.0
    keep = [i for i in range(n) if i != ref_index]
    return A[:, keep]


def _islands(n, edges):
    """Connected components as lists of positional bus indices."""
    adj = [[] for _ in range(n)]
    for i, j in edges:
        adj[i].append(j)
        adj[j].append(i)
    comp = -np.ones(n, dtype=int)
    c = 0
    for s in range(n):
        if comp[s] >= 0:
            continue
        stack = [s]
        comp[s] = c
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if comp[v] < 0:
                    comp[v] = c
                    stack.append(v)
        c += 1
    return [list(np.flatnonzero(comp == k)) for k in range(c)]


def _assemble(n, ref_index, bus_ids, from_idx, to_idx, x, tap, rate_a, y_mag,
              tap_model):
    islands = _islands(n, zip(from_idx, to_idx))
    if len(islands) > 1:
        raise Disconnected(f"live topology splits into {len(islands)} islands")
    A_red = _line_vectors(n, from_idx, to_idx, tap, ref_index, tap_model)
    w = 1.0 / x
    B_red = A_red.T @ (A_red * w[:, None])
    B_red = 0.5 * (B_red + B_red.T)
    try:
        B_inv = np.linalg.inv(B_red)
    except np.linalg.LinAlgError as exc:
        raise SingularB("reduced susceptance matrix is singular") from exc
    # S over non-ref columns, then re-insert an all-zero reference column
    S_red = (A_red * w[:, None]) @ B_inv
    S = np.zeros((len(x), n))
    keep = [i for i in range(n) if i != ref_index]
    S[:, keep] = S_red
    mask = np.zeros((n, n), dtype=bool)
    mask[np.arange(n), np.arange(n)] = True
    mask[from_idx, to_idx] = True
    mask[to_idx, from_idx] = True
    return GridLinAlg(
        n_buses=n, ref_index=ref_index, bus_ids=_freeze(bus_ids),
        from_idx=_freeze(from_idx), to_idx=_freeze(to_idx), x=_freeze(x),
        tap=_freeze(tap), rate_a=_freeze(rate_a), y_mag=_freeze(y_mag),
        A_red=_freeze(A_red), B_red=_freeze(B_red), B_inv=_freeze(B_inv),
        S=_freeze(S), mask=_freeze(mask), tap_model=tap_model,
    )


def build_linalg(case, tap_model=False):
    """Assemble GridLinAlg from the live branches of a parsed case."""
    idx = case.bus_index()
    live = case.live_branches()
    from_idx = np.array([idx[br.from_bus] for br in live], dtype=int)
    to_idx = np.array([idx[br.to_bus] for br in live], dtype=int)
    x = np.array([br.x for br in live])
    tap = np.array([br.tap for br in live])
    rate_a = np.array([br.rate_a for br in live])
    y_mag = np.array([br.y_mag for br in live])
    bus_ids = np.array([b.id for b in case.buses], dtype=int)
    return _assemble(case.n_buses, idx[case.ref_bus], bus_ids, from_idx,
                     to_idx, x, tap, rate_a, y_mag, tap_model)


@dataclass(frozen=True)
class Contingency:
    """A set of outaged lines together with the rebuilt surviving network."""
    outaged_lines: frozenset
    post_grid: GridLinAlg


def apply_outage(grid, lines):
    """Rebuild the network with `lines` (live-line indices) removed.

    Raises WouldDisconnect with the island partition if the survivors split.
    """
    lines = frozenset(int(k) for k in lines)
    if not lines:
        return Contingency(outaged_lines=lines, post_grid=grid)
    if not lines.issubset(range(grid.n_lines)):
        raise IndexError("outage indices outside the live line range")
    keep = np.array([e for e in range(grid.n_lines) if e not in lines], dtype=int)
    islands = _islands(grid.n_buses, zip(grid.from_idx[keep], grid.to_idx[keep]))
    if len(islands) > 1:
        named = [sorted(grid.bus_ids[i] for i in isl) for isl in islands]
        raise WouldDisconnect(
            f"outage of lines {sorted(lines)} splits the network", islands=named)
    post = _assemble(grid.n_buses, grid.ref_index, grid.bus_ids,
                     grid.from_idx[keep], grid.to_idx[keep], grid.x[keep],
                     grid.tap[keep], grid.rate_a[keep], grid.y_mag[keep],
                     grid.tap_model)
    return Contingency(outaged_lines=lines, post_grid=post)


def rank_one_inverse_update(grid, line):
    """Rank-one correction of B_inv for a single line outage.

    Returns (delta, updated_inverse) with
    delta = B^-1 a_k a_k^T B^-1 / (x_k - a_k^T B^-1 a_k); the denominator
    vanishes exactly when the line is a bridge.
    """
    k = int(line)
    a = grid.A_red[k]
    v = grid.B_inv @ a
    den = grid.x[k] - a @ v
    if den <= BRIDGE_TOL:
        raise BridgeLine(f"line {k} is a bridge (denominator {den:.3e})")
    delta = np.outer(v, v) / den
    return delta, grid.B_inv + delta


def gnn_mask(grid):
    """Boolean filter support: diagonal plus both directions of each live line."""
    return grid.mask.copy()


def fdpf_voltage_sensitivity(grid, dq):
    """Linearized voltage-magnitude response -B_inv @ dq over non-ref buses."""
    dq = np.asarray(dq, dtype=np.float64)
    return -(grid.B_inv @ dq)


def normalized_bbus(grid):
    """Symmetric degree-normalized full susceptance Laplacian, D^-1/2 B D^-1/2.

    Support equals the graph-filter mask; used to initialize graph filters.
    """
    n = grid.n_buses
    B = np.zeros((n, n))
    w = 1.0 / grid.x
    for e in range(grid.n_lines):
        i, j = grid.from_idx[e], grid.to_idx[e]
        B[i, i] += w[e]
        B[j, j] += w[e]
        B[i, j] -= w[e]
        B[j, i] -= w[e]
    d = np.sqrt(np.diag(B))
    return B / np.outer(d, d)
