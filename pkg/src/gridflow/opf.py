"""Convex dc optimal power flow with full dual recovery, nodal price
derivation, flow-feasibility evaluation, and randomized dataset generation.

The solver is a dense Mehrotra predictor-corrector interior-point method
specialized to the dc-OPF structure (one balance equality, box bounds,
two-sided line-flow bounds). Internal tolerances are tightened well below
the exposed 1e-6 KKT contract so dual labels are clean regression targets.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .case_io import DatasetFile
from .errors import Infeasible, MaxIterations, TooManyRejections, UnsupportedCost

FEATURE_NAMES = ("p_max", "p_min", "q_max", "q_min", "cost_a", "cost_b")
BINDING_TOL = 1e-5
KKT_TOL = 1e-6
DUAL_PRUNE_TOL = 1e-7


@dataclass(frozen=True)
class DcOpfInstance:
    """Per-node quadratic costs and injection bounds over a fixed topology.

    Fixed (load-only) nodes carry point intervals p_min == p_max and zero
    cost coefficients; `flexible` marks the nodes the solver dispatches.
    """
    grid: object                 # GridLinAlg
    a: np.ndarray                # (N,) quadratic cost coefficients
    b: np.ndarray                # (N,) linear cost coefficients
    p_min: np.ndarray            # (N,)
    p_max: np.ndarray            # (N,)
    q_min: np.ndarray            # (N,)
    q_max: np.ndarray            # (N,)
    flexible: np.ndarray         # (N,) bool

    def validate(self):
        if np.any(self.p_min > self.p_max + 1e-12):
            raise Infeasible("p_min exceeds p_max")
        if np.any(self.a[self.flexible] <= 0.0):
            raise UnsupportedCost("flexible node with non-positive quadratic cost")
        if self.p_min.sum() > 1e-9 or self.p_max.sum() < -1e-9:
            raise Infeasible("injection bounds cannot balance to zero")
        return self


def instance_from_case(case, grid, pd=None, gen_costs=None):
    """Build the nodal instance; generators at one bus are merged.

    `pd` overrides per-bus active loads and `gen_costs` overrides per-gen
    (a, b) pairs, which is how sample perturbations enter. Merging several
    generators on one bus uses the exact unconstrained aggregation of their
    quadratic costs (harmonic sum of curvatures); generation cost curves
    are shifted to net-injection coordinates, which preserves the argmin
    and all duals.
    """
    n = case.n_buses
    idx = case.bus_index()
    pd = np.array([b.pd for b in case.buses]) if pd is None else np.asarray(pd)
    qd = np.array([b.qd for b in case.buses])

    inv_a = np.zeros(n)
    b_over_a = np.zeros(n)
    gmin = np.zeros(n)
    gmax = np.zeros(n)
    qmin = np.zeros(n)
    qmax = np.zeros(n)
    has_gen = np.zeros(n, dtype=bool)
    for gi, g in enumerate(case.gens):
        i = idx[g.bus]
        a_g, b_g = (gen_costs[gi] if gen_costs is not None
                    else (g.cost_a, g.cost_b))
        if a_g <= 0.0:
            raise UnsupportedCost(f"generator at bus {g.bus} has non-convex cost")
        has_gen[i] = True
        inv_a[i] += 1.0 / a_g
        b_over_a[i] += b_g / a_g
        gmin[i] += g.pmin
        gmax[i] += g.pmax
        qmin[i] += g.qmin
        qmax[i] += g.qmax

    a = np.zeros(n)
    b = np.zeros(n)
    a[has_gen] = 1.0 / inv_a[has_gen]
    b[has_gen] = b_over_a[has_gen] * a[has_gen]
    # shift generation cost a g^2 + b g to injection p = g - pd
    b[has_gen] = b[has_gen] + 2.0 * a[has_gen] * pd[has_gen]

    p_min = np.where(has_gen, gmin - pd, -pd)
    p_max = np.where(has_gen, gmax - pd, -pd)
    q_min = np.where(has_gen, qmin - qd, -qd)
    q_max = np.where(has_gen, qmax - qd, -qd)
    return DcOpfInstance(grid=grid, a=a, b=b, p_min=p_min, p_max=p_max,
                         q_min=q_min, q_max=q_max, flexible=has_gen).validate()


@dataclass
class DcOpfSolution:
    p_star: np.ndarray           # (N,) optimal injections
    f_star: np.ndarray           # (E,) line flows S @ p_star
    lambda_: float               # balance dual
    mu_bar: np.ndarray           # (E,) upper flow duals >= 0
    mu_under: np.ndarray         # (E,) lower flow duals >= 0
    eta_bar: np.ndarray          # (N,) upper box duals on flexible nodes
    eta_under: np.ndarray        # (N,)
    pi_star: np.ndarray          # (N,) locational marginal prices
    status: str                  # optimal | infeasible | max_iter
    kkt_residual: float
    objective: float

    def binding_lines(self, grid):
        """Primal test for lines at their limit (dual-degeneracy safe)."""
        return np.abs(self.f_star) >= grid.rate_a - BINDING_TOL


def lmp_from_duals(lambda_, mu_bar, mu_under, grid):
    """Nodal prices lambda * 1 - S^T (mu_bar - mu_under); ref price = lambda."""
    return lambda_ * np.ones(grid.n_buses) - grid.S.T @ (mu_bar - mu_under)


def _ipm(Q, c, a_eq, b_eq, G, h, max_iter=100, tol=1e-9):
    """Mehrotra predictor-corrector for
    min 0.5 x'Qx + c'x  s.t.  a_eq'x = b_eq,  Gx <= h.
    Returns (x, lam, z, converged, residual) for the best iterate seen; the
    caller polishes it to an exact KKT point via active-set crossover."""
    n = len(c)
    m = len(h)
    x = np.zeros(n)
    lam = 0.0
    slack_gap = h - G @ x
    shift = max(1.0, -slack_gap.min() + 1.0)
    s = slack_gap + shift
    z = np.ones(m)
    e = np.ones(m)
    best = (x.copy(), lam, z.copy())
    best_res = np.inf
    stagnant = 0
    for _ in range(max_iter):
        r_dual = Q @ x + c + a_eq * lam + G.T @ z
        r_eq = a_eq @ x - b_eq
        r_ineq = G @ x + s - h
        mu = (s @ z) / m
        res = max(np.abs(r_dual).max(), abs(r_eq), np.abs(r_ineq).max(), mu)
        if res < best_res * 0.5:
            stagnant = 0
        else:
            stagnant += 1
        if res < best_res:
            best_res = res
            best = (x.copy(), lam, z.copy())
        if res < tol:
            return x, lam, z, True, res
        if stagnant >= 10:
            break

        d = z / s
        M = Q + (G.T * d) @ G
        K = np.zeros((n + 1, n + 1))
        K[:n, :n] = M
        K[:n, n] = a_eq
        K[n, :n] = a_eq

        def solve_newton(rc):
            rhs = np.empty(n + 1)
            rhs[:n] = -r_dual + G.T @ ((rc - z * r_ineq) / s)
            rhs[n] = -r_eq
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                return None
            dx, dlam = sol[:n], sol[n]
            ds = -r_ineq - G @ dx
            dz = (-rc - z * ds) / s
            return dx, dlam, ds, dz

        step = solve_newton(s * z)
        if step is None:
            break
        dx_a, dlam_a, ds_a, dz_a = step

        def max_step(v, dv):
            neg = dv < 0
            return 1.0 if not neg.any() else min(1.0, (-v[neg] / dv[neg]).min())

        alpha_p = max_step(s, ds_a)
        alpha_d = max_step(z, dz_a)
        mu_aff = ((s + alpha_p * ds_a) @ (z + alpha_d * dz_a)) / m
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.1

        step = solve_newton(s * z + ds_a * dz_a - sigma * mu * e)
        if step is None:
            break
        dx, dlam, ds, dz = step
        alpha = 0.99 * min(max_step(s, ds), max_step(z, dz))
        x = x + alpha * dx
        lam = lam + alpha * dlam
        s = s + alpha * ds
        z = z + alpha * dz
    x, lam, z = best
    return x, lam, z, False, best_res


def _active_set_polish(Q, c, a_eq, b_eq, G, h, x, z, max_pivots=60):
    """Refine a near-optimal interior point to an exact KKT point.

    Guesses the active inequality set from the iterate, solves the
    equality-constrained KKT system, and pivots constraints in or out until
    the multiplier signs and primal feasibility are clean. Returns
    (x, lam, z_full) or None if the pivoting does not settle.
    """
    n = len(c)
    m = len(h)
    slack = h - G @ x
    active = set(np.flatnonzero((slack < 1e-7) | (z > np.maximum(slack, 1e-9))))
    for _ in range(max_pivots):
        idx = sorted(active)
        ga = G[idx]
        k = len(idx)
        kkt = np.zeros((n + 1 + k, n + 1 + k))
        kkt[:n, :n] = Q
        kkt[:n, n] = a_eq
        kkt[n, :n] = a_eq
        kkt[:n, n + 1:] = ga.T
        kkt[n + 1:, :n] = ga
        rhs = np.concatenate([-c, [b_eq], h[idx]])
        sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
        xx = sol[:n]
        lam = sol[n]
        za = sol[n + 1:]
        neg = [idx[j] for j in range(k) if za[j] < -1e-10]
        if neg:
            active.difference_update(neg[:1])
            continue
        viol = np.flatnonzero(G @ xx - h > 1e-10)
        new = [v for v in viol if v not in active]
        if new:
            active.add(int(new[0]))
            continue
        z_full = np.zeros(m)
        z_full[idx] = np.maximum(za, 0.0)
        return xx, float(lam), z_full
    return None


def _feasibility_gap(a_eq_n, b_eq, G, h):
    """Phase-1 certificate: minimal uniform relaxation t of Gx <= h + t."""
    n = len(a_eq_n)
    Gt = np.hstack([G, -np.ones((len(h), 1))])
    Gt = np.vstack([Gt, np.zeros((1, n + 1))])
    Gt[-1, -1] = -1.0                       # t >= 0
    ht = np.concatenate([h, [0.0]])
    Q = np.eye(n + 1) * 1e-9
    c = np.zeros(n + 1)
    c[-1] = 1.0
    a_eq = np.concatenate([a_eq_n, [0.0]])
    xt, _, _, ok, _ = _ipm(Q, c, a_eq, b_eq, Gt, ht, max_iter=100, tol=1e-9)
    return xt[-1] if ok else np.inf


def solve_dcopf(inst):
    """Solve the dc-OPF and recover all duals.

    The fixed injections are eliminated, the flexible sub-problem solved by
    the interior-point method, and the stationarity residual checked over
    the full KKT system before the solution is returned.
    """
    inst.validate()
    grid = inst.grid
    flex = inst.flexible
    n_flex = int(flex.sum())
    p_fixed = np.where(flex, 0.0, inst.p_min)
    f_base = grid.S @ p_fixed
    f_bar = grid.rate_a

    if n_flex == 0:
        if abs(p_fixed.sum()) > 1e-8:
            raise Infeasible("fixed injections do not balance")
        if np.any(np.abs(f_base) > f_bar + 1e-8):
            raise Infeasible("fixed injections violate line limits")
        E = grid.n_lines
        return _package(inst, p_fixed, 0.0, np.zeros(E), np.zeros(E),
                        np.zeros(inst.grid.n_buses), np.zeros(inst.grid.n_buses))

    S_flex = grid.S[:, flex]
    Q = np.diag(2.0 * inst.a[flex])
    c = inst.b[flex].copy()
    a_eq = np.ones(n_flex)
    b_eq = -p_fixed.sum()
    G = np.vstack([np.eye(n_flex), -np.eye(n_flex), S_flex, -S_flex])
    h = np.concatenate([inst.p_max[flex], -inst.p_min[flex],
                        f_bar - f_base, f_bar + f_base])

    if b_eq < inst.p_min[flex].sum() - 1e-9 or b_eq > inst.p_max[flex].sum() + 1e-9:
        raise Infeasible("balance target outside aggregate injection bounds")

    x, lam_ipm, z, ok, res = _ipm(Q, c, a_eq, b_eq, G, h)
    polished = None
    if res < 1e-4:
        polished = _active_set_polish(Q, c, a_eq, b_eq, G, h, x, z)
    if polished is not None:
        x, lam_ipm, z = polished
        kkt_probe = max(
            np.abs(Q @ x + c + a_eq * lam_ipm + G.T @ z).max(),
            abs(a_eq @ x - b_eq),
            float(np.maximum(G @ x - h, 0.0).max(initial=0.0)))
        if kkt_probe > 1e-8:
            polished = None
            x, lam_ipm, z, ok, res = _ipm(Q, c, a_eq, b_eq, G, h)
    if polished is None and not ok:
        gap = _feasibility_gap(a_eq, b_eq, G, h)
        if gap > 1e-7:
            raise Infeasible(f"no feasible dispatch (best relaxation {gap:.2e})")
        raise MaxIterations("interior point did not converge", residual=res)

    E = grid.n_lines
    z = np.where(z < DUAL_PRUNE_TOL, 0.0, z)   # active-set cleanup
    eta_bar = np.zeros(grid.n_buses)
    eta_under = np.zeros(grid.n_buses)
    eta_bar[flex] = z[:n_flex]
    eta_under[flex] = z[n_flex:2 * n_flex]
    mu_bar = z[2 * n_flex:2 * n_flex + E]
    mu_under = z[2 * n_flex + E:]
    p = p_fixed.copy()
    p[flex] = x
    # equality written a_eq'x - b = 0 with +lam in the gradient: price = -lam
    return _package(inst, p, -float(lam_ipm), mu_bar, mu_under, eta_bar, eta_under)


def _package(inst, p, lam, mu_bar, mu_under, eta_bar, eta_under):
    grid = inst.grid
    f = grid.S @ p
    pi = lmp_from_duals(lam, mu_bar, mu_under, grid)
    flex = inst.flexible
    stat = (2.0 * inst.a[flex] * p[flex] + inst.b[flex] - lam
            + (grid.S.T @ (mu_bar - mu_under))[flex]
            + eta_bar[flex] - eta_under[flex])
    comp = np.concatenate([
        mu_bar * (grid.rate_a - f), mu_under * (f + grid.rate_a),
        eta_bar[flex] * (inst.p_max[flex] - p[flex]),
        eta_under[flex] * (p[flex] - inst.p_min[flex]),
    ]) if flex.any() else np.zeros(1)
    primal = max(
        abs(p.sum()),
        float(np.maximum(p - inst.p_max, 0.0).max(initial=0.0)),
        float(np.maximum(inst.p_min - p, 0.0).max(initial=0.0)),
        float(np.maximum(np.abs(f) - grid.rate_a, 0.0).max(initial=0.0)),
    )
    kkt = max(float(np.abs(stat).max(initial=0.0)), primal,
              float(np.abs(comp).max(initial=0.0)))
    obj = float(np.sum(inst.a[flex] * p[flex] ** 2 + inst.b[flex] * p[flex]))
    return DcOpfSolution(
        p_star=p, f_star=f, lambda_=float(lam), mu_bar=mu_bar,
        mu_under=mu_under, eta_bar=eta_bar, eta_under=eta_under, pi_star=pi,
        status="optimal", kkt_residual=kkt, objective=obj)


def dc_flow_violation(p_hat, grid, f_bar=None):
    """Hinge line-limit violations of dc flows S @ p_hat.

    Returns (total, per_line) where per_line = max(0, |f| - f_bar) and the
    total is their plain sum (the l1 aggregation over lines).
    """
    f_bar = grid.rate_a if f_bar is None else np.asarray(f_bar)
    f = grid.S @ np.asarray(p_hat, dtype=np.float64)
    per_line = np.maximum(np.abs(f) - f_bar, 0.0)
    return float(per_line.sum()), per_line


def ac_apparent_flow(vmag, theta, grid):
    """Apparent power magnitude per line in both directions.

    s_ij = |v_i e^{j th_i} - v_j e^{j th_j}| * |v_i| * |Y_ij| for the
    sending end i; the (j, i) direction swaps the terminal magnitude.
    Returns an (E, 2) array [s_ij, s_ji].
    """
    vmag = np.asarray(vmag, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    vi, vj = vmag[grid.from_idx], vmag[grid.to_idx]
    dth = theta[grid.from_idx] - theta[grid.to_idx]
    gap = np.sqrt(np.maximum(vi ** 2 + vj ** 2 - 2.0 * vi * vj * np.cos(dth), 0.0))
    return np.stack([gap * vi * grid.y_mag, gap * vj * grid.y_mag], axis=1)


@dataclass(frozen=True)
class SampleSpec:
    """Randomized perturbation plan for dataset generation."""
    n_samples: int
    load_scale_range: tuple = (0.85, 1.15)
    cost_scale_range: tuple = (0.9, 1.1)
    seed: int = 0

    def validate(self):
        if min(self.load_scale_range) <= 0 or min(self.cost_scale_range) <= 0:
            raise ValueError("scale ranges must be positive")
        return self


def _worker_count():
    env = os.environ.get("GRIDFLOW_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _draw_sample(case, grid, spec, index, max_redraws=50):
    """Solve one perturbed instance on its own (seed, index) RNG stream."""
    rng = np.random.default_rng((spec.seed, index))
    base_pd = np.array([b.pd for b in case.buses])
    lo_l, hi_l = spec.load_scale_range
    lo_c, hi_c = spec.cost_scale_range
    rejections = 0
    for _ in range(max_redraws):
        pd = base_pd * rng.uniform(lo_l, hi_l, size=len(base_pd))
        costs = [(g.cost_a * rng.uniform(lo_c, hi_c),
                  g.cost_b * rng.uniform(lo_c, hi_c)) for g in case.gens]
        try:
            inst = instance_from_case(case, grid, pd=pd, gen_costs=costs)
            sol = solve_dcopf(inst)
        except (Infeasible, MaxIterations):
            rejections += 1
            continue
        if sol.kkt_residual >= KKT_TOL:
            rejections += 1
            continue
        feats = np.stack([inst.p_max, inst.p_min, inst.q_max, inst.q_min,
                          inst.a, inst.b], axis=1)
        binding = sol.binding_lines(grid).astype(np.float64)
        labels = np.concatenate([sol.pi_star, sol.p_star, binding])
        return feats, labels, rejections
    return None, None, rejections


def generate_dataset(case, spec, grid=None, outages=()):
    """Generate a labeled dataset of solved perturbed instances.

    Deterministic for a fixed seed regardless of worker count: each sample
    draws from an independent RNG stream keyed by (seed, index), and rows
    are stored in index order. Infeasible draws are redrawn within the
    sample's own stream and counted; more than 20% rejections aborts.
    """
    from . import grid_model  # local import keeps module load order simple

    spec.validate()
    if grid is None:
        grid = grid_model.build_linalg(case)
    if outages:
        grid = grid_model.apply_outage(grid, outages).post_grid

    results = [None] * spec.n_samples
    total_rej = 0
    workers = min(_worker_count(), max(1, spec.n_samples))

    def run(i):
        return i, _draw_sample(case, grid, spec, i)

    if workers > 1 and spec.n_samples > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for i, out in pool.map(run, range(spec.n_samples)):
                results[i] = out
    else:
        for i in range(spec.n_samples):
            results[i] = run(i)[1]

    feats, labels = [], []
    for out in results:
        f, l, rej = out
        total_rej += rej
        if f is None:
            raise TooManyRejections("a sample exhausted its redraw budget")
        feats.append(f)
        labels.append(l)
    if total_rej > 0.2 * max(spec.n_samples, 1):
        raise TooManyRejections(
            f"{total_rej} rejections for {spec.n_samples} samples")

    header = {
        "case_name": case.name,
        "n_buses": case.n_buses,
        "n_lines": int(grid.n_lines),
        "feature_names": list(FEATURE_NAMES),
        "label_names": ["pi", "p", "binding"],
        "seed": spec.seed,
        "load_scale_range": list(spec.load_scale_range),
        "cost_scale_range": list(spec.cost_scale_range),
        "outaged_lines": sorted(int(k) for k in outages),
        "rejections": total_rej,
    }
    if spec.n_samples:
        features = np.array(feats)
        label_arr = np.array(labels)
    else:
        features = np.zeros((0, case.n_buses, len(FEATURE_NAMES)))
        label_arr = np.zeros((0, 2 * case.n_buses + grid.n_lines))
    return DatasetFile(header=header, features=features, labels=label_arr).validate()
