"""The oscillatory problem, its homogenized limit, the two-scale expansion
and the convergence / Hessian-scaling experiments.

The eps-problem

    -a_ij(x/eps) d_ij u + (1/eps) b_j(x/eps) d_j u = f   on Omega, u|_bdry = 0

is posed on Omega = [-L, L]^d with eps restricted to reciprocals of integers
so the domain contains whole periods, and resolved with at least 16 nodes
per fast period (h <= eps/16).  The homogenized problem -A*_ij d_ij u* = f
uses the cell tensor; its right-hand side is plain f because the invariant
measure averages to one.

The first-order expansion u* + eps d_j u* w_j(x/eps) does not satisfy the
boundary condition, so its H1 error is measured on the domain minus a
2 eps collar.  Correctors are sampled at the fast variable through the
trigonometric interpolant of the periodic part plus (optionally) the
box-solved defect part, taken as zero outside its box.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import interpn

from .cell import CellSolution
from .defect import DefectSolution
from .fields import BoxGrid, Field, differentiate, lq_norm, sample_periodic
from .operators import nondiv_matrix, dirichlet_solve

__all__ = [
    "EpsProblem",
    "ConvergenceReport",
    "solve_eps",
    "solve_homogenized",
    "corrector_sampler",
    "two_scale_error",
    "rate_fit",
    "hessian_scaling",
    "convergence_study",
]


@dataclass
class EpsProblem:
    omega: BoxGrid
    eps_list: list
    f: callable                    # rhs as a function of the coordinate list

    def __post_init__(self):
        if len(self.eps_list) < 3:
            raise ValueError("need at least 3 epsilon values")
        if any(e2 >= e1 for e1, e2 in zip(self.eps_list, self.eps_list[1:])):
            raise ValueError("eps_list must be strictly decreasing")
        for eps in self.eps_list:
            k = 1.0 / eps
            if abs(k - round(k)) > 1e-12:
                raise ValueError(f"eps = {eps} is not the reciprocal of an integer")
            if self.omega.h > eps / 16.0 + 1e-15:
                raise ValueError(
                    f"h = {self.omega.h} under-resolves eps = {eps} (need h <= eps/16)"
                )


@dataclass
class ConvergenceReport:
    eps_list: list
    l2_errors: list
    h1_two_scale: list
    l2_rate: float | None = None
    l2_rate_residual: float | None = None
    extras: dict = field(default_factory=dict)

    def to_csv(self, path, ablation=None, columns=("l2", "h1", "h1_periodic_only")) -> None:
        """Error table; ``columns`` selects which error columns to emit."""
        cols = [("l2", "l2_error", self.l2_errors), ("h1", "h1_two_scale", self.h1_two_scale)]
        if ablation is not None:
            cols.append(("h1_periodic_only", "h1_two_scale_periodic_only", ablation))
        cols = [c for c in cols if c[0] in columns]
        rows = ["eps," + ",".join(name for _, name, _ in cols)]
        for k, eps in enumerate(self.eps_list):
            rows.append(
                f"{float(eps)!r}," + ",".join(repr(float(vals[k])) for _, _, vals in cols)
            )
        with open(path, "w") as fh:
            fh.write("\n".join(rows) + "\n")


def solve_eps(cs, omega: BoxGrid, eps: float, f, contract: float = 1e-10) -> Field:
    """Dirichlet solve of the oscillatory non-divergence problem."""
    if omega.h > eps / 16.0 + 1e-15:
        raise ValueError(f"h = {omega.h} under-resolves eps = {eps}")
    xs = omega.meshgrid()
    fast = [np.asarray(x) / eps for x in xs]
    a = np.ascontiguousarray(
        np.broadcast_to(cs.a_per(fast), (cs.d, cs.d) + omega.shape)
    ).copy()
    b = np.ascontiguousarray(np.broadcast_to(cs.b_per(fast), (cs.d,) + omega.shape)).copy()
    if cs.a_tilde is not None:
        a += np.broadcast_to(cs.a_tilde(fast), (cs.d, cs.d) + omega.shape)
    if cs.b_tilde is not None:
        b += np.broadcast_to(cs.b_tilde(fast), (cs.d,) + omega.shape)
    b /= eps
    rhs = np.broadcast_to(f(xs), omega.shape).copy()
    L = nondiv_matrix(omega, a, b, check_peclet=True)
    scale = float(np.trace(a.reshape(cs.d, cs.d, -1).mean(axis=-1)) / cs.d)
    u, res = dirichlet_solve(omega, L, rhs, contract, precond_scale=scale)
    return Field(omega, 0, u)


def solve_homogenized(omega: BoxGrid, A_star: np.ndarray, f, contract: float = 1e-12) -> Field:
    """Constant-coefficient Dirichlet solve -A*_ij d_ij u* = f.  Only the
    symmetric part acts on the (exactly symmetric) discrete Hessian."""
    d = omega.d
    sym = 0.5 * (A_star + A_star.T)
    if np.linalg.eigvalsh(sym).min() <= 0:
        raise ValueError("homogenized tensor is not elliptic")
    a = np.zeros((d, d) + omega.shape)
    for i in range(d):
        for j in range(d):
            a[i, j] = sym[i, j]
    b = np.zeros((d,) + omega.shape)
    rhs = np.broadcast_to(f(omega.meshgrid()), omega.shape).copy()
    L = nondiv_matrix(omega, a, b, check_peclet=False)
    u, _ = dirichlet_solve(omega, L, rhs, contract, precond_scale=float(np.trace(sym) / d))
    return Field(omega, 0, u)


def corrector_sampler(cell: CellSolution, ds: DefectSolution | None = None):
    """Returns sample(axis_points) -> list of corrector value arrays w_j at
    the fast coordinates given per axis.  The defect part is interpolated
    from its box (zero beyond), matching the w~(far boundary) = 0 gauge."""
    d = cell.d

    def sample(axis_points):
        out = []
        for j in range(d):
            vals = sample_periodic(cell.w_per[j].values, cell.grid, axis_points)
            if ds is not None:
                box = ds.grid
                pts = np.stack(
                    [g.ravel() for g in np.meshgrid(*axis_points, indexing="ij")], axis=-1
                )
                wt = interpn(
                    tuple(box.axis_coords()),
                    ds.w_tilde[j].values,
                    pts,
                    method="linear",
                    bounds_error=False,
                    fill_value=0.0,
                )
                vals = vals + wt.reshape(vals.shape)
            out.append(vals)
        return out

    return sample


def two_scale_error(u_eps: Field, u_star: Field, sampler, eps: float, collar_factor: float = 2.0):
    """(||u_eps - u*||_L2(Omega), ||u_eps - u* - eps d_j u* w_j(./eps)||_H1)
    with the H1 norm on Omega minus a ``collar_factor * eps`` collar, where
    the expansion cannot hold (it ignores the boundary condition)."""
    omega = u_eps.grid
    d = omega.d
    w = omega.cell_volume()
    diff0 = u_eps.values - u_star.values
    l2 = float(np.sqrt(w * (diff0**2).sum()))

    grad_star = differentiate(u_star, "grad").values
    fast = [np.asarray(c) / eps for c in omega.axis_coords()]
    w_vals = sampler(fast)
    expansion = u_star.values + eps * sum(grad_star[j] * w_vals[j] for j in range(d))
    e = Field(omega, 0, u_eps.values - expansion)
    ge = differentiate(e, "grad").values

    coords = omega.meshgrid()
    inside = np.ones(omega.shape, dtype=bool)
    for ax in range(d):
        inside &= np.abs(coords[ax]) <= omega.L - collar_factor * eps
    h1sq = w * ((e.values[inside] ** 2).sum() + sum((ge[j][inside] ** 2).sum() for j in range(d)))
    return l2, float(np.sqrt(h1sq))


def rate_fit(eps_values, values):
    """Least-squares slope of log(value) against log(eps).

    Returns (slope, fit_residual); positive slope means decay as eps -> 0.
    """
    eps_values = np.asarray(eps_values, dtype=float)
    values = np.asarray(values, dtype=float)
    if len(values) < 3:
        raise ValueError("need at least 3 points for a rate fit")
    if np.any(values <= 0):
        raise ValueError("rate fit needs positive values")
    coef, res = np.polyfit(np.log(eps_values), np.log(values), 1, full=True)[:2]
    residual = float(np.sqrt(res[0] / len(values))) if len(res) else 0.0
    return float(coef[0]), residual


def hessian_scaling(cs, omega: BoxGrid, eps_list, f, beta: float = 2.0):
    """Fitted log-log slope of ||D^2 u_eps||_{L^beta(Omega)} against eps.

    Scales like 1/eps (slope -1) whenever the periodic corrector has a
    nonvanishing Hessian, and stays bounded (slope 0) when the corrector is
    constant; beta defaults to 2, the cheapest and stablest choice at desk
    scale.
    """
    norms = []
    for eps in eps_list:
        u = solve_eps(cs, omega, eps, f)
        norms.append(lq_norm(differentiate(u, "hess"), beta))
    slope, residual = rate_fit(eps_list, norms)
    return slope, norms, residual


def convergence_study(cs, cell: CellSolution, ep: EpsProblem, defect_supplier=None, ablation: bool = False):
    """eps-sweep of the errors against the homogenized limit.

    ``defect_supplier``: optional callable eps -> DefectSolution solved on a
    box matching the fast variable's range (L_box = 1/eps); None runs the
    periodic-only expansion.  ``ablation = True`` additionally records the
    periodic-only two-scale error when a defect supplier is present.
    """
    u_star = solve_homogenized(ep.omega, cell.A_star, ep.f)
    l2s, h1s, h1s_abl = [], [], []
    for eps in ep.eps_list:
        u_eps = solve_eps(cs, ep.omega, eps, ep.f)
        ds = defect_supplier(eps) if defect_supplier is not None else None
        sampler = corrector_sampler(cell, ds)
        l2, h1 = two_scale_error(u_eps, u_star, sampler, eps)
        l2s.append(l2)
        h1s.append(h1)
        if ablation and ds is not None:
            _, h1a = two_scale_error(u_eps, u_star, corrector_sampler(cell, None), eps)
            h1s_abl.append(h1a)
    slope, resid = rate_fit(ep.eps_list, l2s)
    report = ConvergenceReport(
        eps_list=list(ep.eps_list),
        l2_errors=l2s,
        h1_two_scale=h1s,
        l2_rate=slope,
        l2_rate_residual=resid,
    )
    if h1s_abl:
        report.extras["h1_two_scale_periodic_only"] = h1s_abl
    return report
