"""Sparse operator assembly and linear solvers shared by the cell, defect,
divform and multiscale modules.

Conventions
-----------
The non-divergence operator is

    L u = -a_ij d_ij u + b_j d_j u

discretized with centered differences: compact 3-point stencils for d_ii,
centered-composed 4-point stencils for the cross terms, centered 2-point for
d_j.  Its matrix transpose is then automatically the consistent compact
discretization of the formal adjoint (the double-divergence operator)

    L* m = -d_i ( d_j (a_ij m) + b_i m ),

which is what makes the discrete invariant measure exactly orthogonal to the
range of L.  Kernel problems are solved through bordered (saddle) systems
whose Lagrange multiplier doubles as the Fredholm solvability diagnostic.

Centered advection is monotone only for cell Peclet numbers |b| h / (2 lam)
below one; assembly warns past that limit.
"""

from __future__ import annotations

import warnings

import numpy as np
import scipy.fft
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fields import BoxGrid, Field, TorusGrid, _fd1, _fd2, spectral_derivative

__all__ = [
    "SolverFault",
    "nondiv_matrix",
    "divform_matrix",
    "bordered_solve",
    "dirichlet_solve",
    "dirichlet_poisson_dst",
    "interior_index",
    "apply_nondiv",
    "apply_double_div",
    "apply_divform",
    "peclet_number",
]


class SolverFault(RuntimeError):
    """A linear solve failed to reach its residual contract."""


# ---------------------------------------------------------------------------
# 1d difference matrices


def _d1_periodic(n: int, h: float) -> sp.csr_matrix:
    e = np.ones(n)
    D = sp.diags([e, -e], [1, -1], shape=(n, n), format="lil")
    D[0, n - 1] = -1.0
    D[n - 1, 0] = 1.0
    return (D / (2 * h)).tocsr()


def _d2_periodic(n: int, h: float) -> sp.csr_matrix:
    e = np.ones(n)
    D = sp.diags([e, -2 * e, e], [1, 0, -1], shape=(n, n), format="lil")
    D[0, n - 1] = 1.0
    D[n - 1, 0] = 1.0
    return (D / h**2).tocsr()


def _d1_box(m: int, h: float) -> sp.csr_matrix:
    # centered with implicit zero padding; only interior rows are ever used,
    # and dropped exterior columns implement homogeneous Dirichlet data
    e = np.ones(m)
    return (sp.diags([e, -e], [1, -1], shape=(m, m)) / (2 * h)).tocsr()


def _d2_box(m: int, h: float) -> sp.csr_matrix:
    e = np.ones(m)
    return (sp.diags([e, -2 * e, e], [1, 0, -1], shape=(m, m)) / h**2).tocsr()


def _kron_all(mats) -> sp.csr_matrix:
    out = mats[0]
    for m in mats[1:]:
        out = sp.kron(out, m, format="csr")
    return out


def _lift(mat: sp.spmatrix, axis: int, d: int, m: int) -> sp.csr_matrix:
    """Embed a 1d operator acting along ``axis`` into the d-dim tensor grid."""
    eye = sp.identity(m, format="csr")
    mats = [eye] * d
    mats[axis] = mat
    return _kron_all(mats)


def _axis_ops(grid) -> tuple[list, list]:
    """Per-axis first and second difference matrices on the full node set."""
    if isinstance(grid, TorusGrid):
        m = grid.n
        d1, d2 = _d1_periodic(m, grid.h), _d2_periodic(m, grid.h)
    else:
        m = grid.n + 1
        d1, d2 = _d1_box(m, grid.h), _d2_box(m, grid.h)
    D1 = [_lift(d1, ax, grid.d, m) for ax in range(grid.d)]
    D2 = [_lift(d2, ax, grid.d, m) for ax in range(grid.d)]
    return D1, D2


def peclet_number(a_vals: np.ndarray, b_vals: np.ndarray, h: float) -> float:
    """max |b| h / (2 lam_min(a)) over nodes; >= 1 voids monotonicity."""
    d = b_vals.shape[0]
    bmag = np.sqrt(np.sum(b_vals**2, axis=0))
    amat = np.moveaxis(a_vals.reshape(d, d, -1), -1, 0)
    lam_min = np.linalg.eigvalsh(amat)[:, 0].min()
    return float(bmag.max() * h / (2.0 * lam_min))


def nondiv_matrix(grid, a_vals: np.ndarray, b_vals: np.ndarray, check_peclet: bool = True) -> sp.csr_matrix:
    """Matrix of L u = -a_ij d_ij u + b_j d_j u over all grid nodes.

    ``a_vals``: (d, d, *shape), ``b_vals``: (d, *shape).  For a BoxGrid the
    boundary rows are meaningless; restrict with :func:`interior_index`
    before solving.
    """
    d = grid.d
    D1, D2 = _axis_ops(grid)
    N = D1[0].shape[0]
    L = sp.csr_matrix((N, N))
    for i in range(d):
        L = L - sp.diags(a_vals[i, i].ravel()) @ D2[i]
        for j in range(i + 1, d):
            L = L - sp.diags(2.0 * a_vals[i, j].ravel()) @ (D1[i] @ D1[j])
        L = L + sp.diags(b_vals[i].ravel()) @ D1[i]
    if check_peclet:
        pe = peclet_number(a_vals, b_vals, grid.h)
        if pe >= 1.0:
            warnings.warn(
                f"cell Peclet number {pe:.2f} >= 1: centered advection is no "
                "longer monotone at this resolution",
                stacklevel=2,
            )
    return L.tocsr()


def divform_matrix(grid: BoxGrid, A_vals: np.ndarray) -> sp.csr_matrix:
    """Matrix of u -> -div(A grad u) in flux form over all box nodes.

    Per-axis diagonal part: backward difference of face fluxes with
    arithmetic-mean face coefficients (compact 3-point).  Mixed part:
    centered-composed d_i(A_ij d_j u) on the (+-e_i, +-e_j) corners.
    Second-order consistent, and built from the same stencil family as
    ``nondiv_matrix`` so the operator identity residual stays clean O(h^2).
    """
    d = grid.d
    m = grid.n + 1
    h = grid.h
    e = np.ones(m)
    # node -> face forward difference and face average ((m-1) x m)
    P = (sp.diags([-e, e[:-1]], [0, 1], shape=(m - 1, m)) / h).tocsr()
    V = (sp.diags([e, e[:-1]], [0, 1], shape=(m - 1, m)) / 2.0).tocsr()
    d1 = _d1_box(m, h)

    N = m**d
    L = sp.csr_matrix((N, N))
    for i in range(d):
        Pi = _lift(P, i, d, m)
        Vi = _lift(V, i, d, m)
        face_coef = Vi @ A_vals[i, i].ravel()
        # -d_i(mean(A_ii) d_i u) = P^T diag(face) P  (P^T is minus the
        # backward face-to-node difference)
        L = L + Pi.T @ sp.diags(face_coef) @ Pi
        for j in range(d):
            if j != i:
                Di = _lift(d1, i, d, m)
                Dj = _lift(d1, j, d, m)
                L = L - Di @ sp.diags(A_vals[i, j].ravel()) @ Dj
    return L.tocsr()


def interior_index(grid: BoxGrid) -> np.ndarray:
    """Flat indices of interior nodes (raveled C order)."""
    mask = np.zeros(grid.shape, dtype=bool)
    mask[grid.interior_slice()] = True
    return np.flatnonzero(mask.ravel())


def _restrict(L: sp.csr_matrix, idx: np.ndarray) -> sp.csr_matrix:
    return L[idx][:, idx].tocsr()


# ---------------------------------------------------------------------------
# solvers


def bordered_solve(A: sp.csr_matrix, rhs: np.ndarray, weight: np.ndarray, target: float):
    """Solve the saddle system [[A, 1], [w^T, 0]] [x; mu] = [rhs; target].

    ``weight`` is the constraint row (h^d for a mean constraint).  The
    multiplier mu measures how far rhs is from the range of A, i.e. it is
    the Fredholm solvability diagnostic.
    """
    N = A.shape[0]
    ones = np.ones((N, 1))
    M = sp.bmat([[A, ones], [sp.csr_matrix(weight.reshape(1, N)), None]], format="csc")
    sol = spla.splu(M).solve(np.concatenate([rhs, [target]]))
    return sol[:N], float(sol[N])


def dirichlet_poisson_dst(rhs_interior: np.ndarray, grid: BoxGrid) -> np.ndarray:
    """Fast solve of -Lap u = rhs, u = 0 on the box boundary, for the compact
    3-point Laplacian, diagonalized by the type-I discrete sine transform."""
    d, h = grid.d, grid.h
    m = grid.n - 1  # interior nodes per axis
    lam1 = (2.0 - 2.0 * np.cos(np.pi * np.arange(1, m + 1) / grid.n)) / h**2
    lam = np.zeros((m,) * d)
    for ax in range(d):
        shape = [1] * d
        shape[ax] = m
        lam = lam + lam1.reshape(shape)
    coef = scipy.fft.dstn(rhs_interior, type=1)
    coef /= lam
    out = scipy.fft.dstn(coef, type=1)
    out /= (2.0 * grid.n) ** d
    return out


class _DSTPreconditioner(spla.LinearOperator):
    """(scale * -Lap_dirichlet)^-1, the workhorse preconditioner for the
    nonsymmetric box solves with near-identity diffusion."""

    def __init__(self, grid: BoxGrid, scale: float):
        self.grid = grid
        self.scale = scale
        m = grid.n - 1
        super().__init__(dtype=float, shape=(m**grid.d, m**grid.d))

    def _matvec(self, x):
        m = self.grid.n - 1
        r = np.asarray(x).reshape((m,) * self.grid.d)
        return (dirichlet_poisson_dst(r, self.grid) / self.scale).ravel()


def dirichlet_solve(
    grid: BoxGrid,
    L_full: sp.csr_matrix,
    rhs_full: np.ndarray,
    contract: float = 1e-10,
    precond_scale: float = 1.0,
    direct_limit: int = 140_000,
) -> tuple[np.ndarray, float]:
    """Solve L u = rhs with u = 0 on the box boundary.

    Restricts the full-grid operator and right-hand side to interior nodes,
    solves directly below ``direct_limit`` unknowns and with
    DST-preconditioned BiCGStab (GMRES fallback) above.  Returns the
    full-grid solution (zeros on the boundary) and the relative residual,
    raising :class:`SolverFault` when the residual contract is missed.
    """
    idx = interior_index(grid)
    A = _restrict(L_full, idx)
    b = rhs_full.ravel()[idx]
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(grid.shape), 0.0
    if A.shape[0] <= direct_limit:
        lu = spla.splu(A.tocsc())
        x = lu.solve(b)
        x += lu.solve(b - A @ x)  # one step of iterative refinement
    else:
        M = _DSTPreconditioner(grid, precond_scale)
        x, info = spla.bicgstab(A, b, rtol=contract / 10.0, maxiter=600, M=M)
        if info != 0:
            x, info = spla.gmres(A, b, rtol=contract / 10.0, maxiter=4000, restart=60, M=M)
            if info != 0:
                raise SolverFault(f"Krylov iteration did not converge (info={info})")
    res = scaled_residual(A, x, b)
    if res > contract:
        raise SolverFault(f"Dirichlet solve residual {res:.2e} above {contract:.0e}")
    u = np.zeros(int(np.prod(grid.shape)))
    u[idx] = x
    return u.reshape(grid.shape), res


def scaled_residual(A, x, b) -> float:
    """Backward-error style residual |Ax - b| / (|A| |x| + |b|); the plain
    b-relative residual is unreachable for stiff h -> 0 operators even with
    backward-stable factorizations."""
    r = np.linalg.norm(A @ x - b)
    opnorm = float(np.abs(A).sum(axis=1).max()) if hasattr(A, "sum") else 1.0
    return float(r / (opnorm * np.linalg.norm(x) + np.linalg.norm(b) + 1e-300))


# ---------------------------------------------------------------------------
# matrix-free applications (residual checks and refinement sweeps)


def apply_nondiv(a_vals: np.ndarray, b_vals: np.ndarray, u: Field) -> np.ndarray:
    """L u = -a_ij d_ij u + b_j d_j u with the grid's native calculus
    (spectral on the torus, centered FD on the box)."""
    from .fields import differentiate

    d = u.grid.d
    H = differentiate(u, "hess").values
    G = differentiate(u, "grad").values
    out = np.zeros(u.grid.shape)
    for i in range(d):
        out += b_vals[i] * G[i]
        for j in range(d):
            out -= a_vals[i, j] * H[i, j]
    return out


def apply_double_div(grid, a_vals: np.ndarray, b_vals: np.ndarray, m_vals: np.ndarray) -> np.ndarray:
    """L* m = -d_i(d_j(a_ij m) + b_i m) assembled as differences of fluxes,
    with the compact stencils matching ``nondiv_matrix`` transposed.

    On a BoxGrid the values are consistent on nodes >= 2 away from the
    boundary (one-sided closures appear closer in).
    """
    d = grid.d
    if isinstance(grid, TorusGrid):
        def d1(v, ax):
            return (np.roll(v, -1, axis=ax) - np.roll(v, 1, axis=ax)) / (2 * grid.h)

        def d2(v, ax):
            return (np.roll(v, -1, axis=ax) - 2 * v + np.roll(v, 1, axis=ax)) / grid.h**2
    else:
        def d1(v, ax):
            return _fd1(v, ax, grid.h)

        def d2(v, ax):
            return _fd2(v, ax, grid.h)

    out = np.zeros(grid.shape)
    for i in range(d):
        out -= d2(a_vals[i, i] * m_vals, i)
        for j in range(d):
            if j != i:
                out -= d1(d1(a_vals[i, j] * m_vals, j), i)
        out -= d1(b_vals[i] * m_vals, i)
    return out


def apply_divform(grid: BoxGrid, A_vals: np.ndarray, u_vals: np.ndarray) -> np.ndarray:
    """-div(A grad u) in the same flux form as :func:`divform_matrix`,
    applied to full-grid values (meaningful on interior nodes)."""
    d, h = grid.d, grid.h
    out = np.zeros(grid.shape)
    for i in range(d):
        du = np.diff(u_vals, axis=i) / h  # forward differences, at faces
        coef = A_vals[i, i]
        lo = np.take(coef, range(0, grid.n), axis=i)
        hi = np.take(coef, range(1, grid.n + 1), axis=i)
        flux = 0.5 * (lo + hi) * du
        div_i = np.diff(flux, axis=i) / h  # at nodes 1..n-1
        sl = [slice(None)] * d
        sl[i] = slice(1, grid.n)
        out[tuple(sl)] += div_i
        for j in range(d):
            if j == i:
                continue
            inner = A_vals[i, j] * _fd1(u_vals, j, h)
            out += _fd1(inner, i, h)
    return -out


def spectral_double_div_residual(grid: TorusGrid, a_vals, b_vals, m_vals) -> np.ndarray:
    """Residual of -d_i(d_j(a_ij m) + b_i m) = 0 with spectral derivatives."""
    d = grid.d
    out = np.zeros(grid.shape)
    for i in range(d):
        inner = b_vals[i] * m_vals
        for j in range(d):
            inner = inner + spectral_derivative(a_vals[i, j] * m_vals, grid, j, 1)
        out -= spectral_derivative(inner, grid, i, 1)
    return out
