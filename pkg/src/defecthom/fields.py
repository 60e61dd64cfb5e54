"""Grids, discrete calculus and norm/decay diagnostics.

Two node-centered uniform grids are supported:

* ``TorusGrid`` -- the unit periodicity cell [0,1)^d, n points per axis,
  h = 1/n.  Derivatives are spectral (FFT), exact for resolved trigonometric
  polynomials.
* ``BoxGrid`` -- the truncated whole-space domain [-L, L]^d with n intervals
  (n+1 nodes) per axis, h = 2L/n.  Derivatives are second-order centered in
  the interior and one-sided second-order at the boundary.

Fields are plain value arrays tagged with a grid and a tensor rank; rank-1
and rank-2 fields store the component axes first, so a rank-2 field on a
3d grid has shape (d, d, n1, n2, n3).  Norms of rank >= 1 fields use the
pointwise Frobenius magnitude.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "TorusGrid",
    "BoxGrid",
    "Field",
    "ShellRecord",
    "differentiate",
    "mean",
    "lq_norm",
    "annular_profile",
    "sublinearity_ratio",
    "save_field",
    "load_field",
    "field_to_csv",
]


class NumericFault(RuntimeError):
    """Raised when an operation produces non-finite values."""


@dataclass(frozen=True)
class TorusGrid:
    """Uniform grid on the unit torus [0,1)^d."""

    d: int
    n: int

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ValueError(f"dimension must be 1, 2 or 3, got {self.d}")
        if self.n < 8 or self.n % 2 != 0:
            raise ValueError(f"n must be even and >= 8, got {self.n}")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.d

    def axis_coords(self) -> list[np.ndarray]:
        return [np.arange(self.n) * self.h for _ in range(self.d)]

    def meshgrid(self) -> list[np.ndarray]:
        return list(np.meshgrid(*self.axis_coords(), indexing="ij", sparse=True))

    def cell_volume(self) -> float:
        return self.h**self.d


@dataclass(frozen=True)
class BoxGrid:
    """Uniform grid on the truncated box [-L, L]^d.

    ``n`` counts intervals per axis, so there are n+1 nodes per axis and
    h = 2L/n exactly.  ``n`` must be even so the origin is a node, and L is
    an integer number of unit periods so periodic coefficients restrict
    cleanly.
    """

    d: int
    L: int
    n: int

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ValueError(f"dimension must be 1, 2 or 3, got {self.d}")
        if self.L < 1 or int(self.L) != self.L:
            raise ValueError(f"L must be an integer >= 1, got {self.L}")
        if self.n < 8 or self.n % 2 != 0:
            raise ValueError(f"n must be even and >= 8, got {self.n}")

    @property
    def h(self) -> float:
        return 2.0 * self.L / self.n

    @property
    def shape(self) -> tuple:
        return (self.n + 1,) * self.d

    def axis_coords(self) -> list[np.ndarray]:
        return [-self.L + np.arange(self.n + 1) * self.h for _ in range(self.d)]

    def meshgrid(self) -> list[np.ndarray]:
        return list(np.meshgrid(*self.axis_coords(), indexing="ij", sparse=True))

    def radius(self) -> np.ndarray:
        """|x| at every node."""
        xs = self.meshgrid()
        return np.sqrt(sum(x**2 for x in xs))

    def cell_volume(self) -> float:
        return self.h**self.d

    def interior_slice(self, collar: int = 1) -> tuple:
        """Slices selecting nodes at least ``collar`` nodes from the boundary."""
        return (slice(collar, -collar),) * self.d


Grid = TorusGrid | BoxGrid


@dataclass
class Field:
    """A scalar / vector / matrix valued function sampled on a grid."""

    grid: Grid
    rank: int
    values: np.ndarray
    symmetric: bool = False
    skew: bool = False

    def __post_init__(self):
        expected = (self.grid.d,) * self.rank + self.grid.shape
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != expected:
            raise ValueError(
                f"rank-{self.rank} field on this grid needs shape {expected}, "
                f"got {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise NumericFault("field contains non-finite values")
        if self.rank != 2 and (self.symmetric or self.skew):
            raise ValueError("symmetric/skew flags apply to rank-2 fields only")
        if self.symmetric and not np.array_equal(
            self.values, np.swapaxes(self.values, 0, 1)
        ):
            raise ValueError("field flagged symmetric is not")
        if self.skew and not np.array_equal(
            self.values, -np.swapaxes(self.values, 0, 1)
        ):
            raise ValueError("field flagged skew is not")

    def copy(self) -> "Field":
        return replace(self, values=self.values.copy())

    def magnitude(self) -> np.ndarray:
        """Pointwise |f| (Frobenius magnitude for rank >= 1)."""
        if self.rank == 0:
            return np.abs(self.values)
        axes = tuple(range(self.rank))
        return np.sqrt(np.sum(self.values**2, axis=axes))


def scalar_field(grid: Grid, values: np.ndarray) -> Field:
    return Field(grid, 0, values)


# ---------------------------------------------------------------------------
# spectral calculus on the torus


def _wavenumbers(n: int, h: float) -> np.ndarray:
    return 2.0 * np.pi * np.fft.fftfreq(n, d=h)


def _first_derivative_multiplier(n: int, h: float) -> np.ndarray:
    # Nyquist mode zeroed: keeps the odd-derivative operator real and
    # skew-adjoint on an even grid.
    k = _wavenumbers(n, h)
    k[n // 2] = 0.0
    return 1j * k


def spectral_derivative(values: np.ndarray, grid: TorusGrid, axis: int, order: int = 1) -> np.ndarray:
    """d^order/dx_axis^order of a scalar sample array, spectrally."""
    n, h = grid.n, grid.h
    vhat = np.fft.fft(values, axis=axis)
    if order == 1:
        mult = _first_derivative_multiplier(n, h)
    elif order == 2:
        mult = -(_wavenumbers(n, h) ** 2)
    else:
        raise ValueError("order must be 1 or 2")
    shape = [1] * values.ndim
    shape[axis] = n
    out = np.fft.ifft(vhat * mult.reshape(shape), axis=axis)
    return np.real(out)


def sample_periodic(values: np.ndarray, grid: TorusGrid, axis_points: list[np.ndarray]) -> np.ndarray:
    """Evaluate the trigonometric interpolant of a scalar torus sample at the
    tensor grid given by per-axis coordinate arrays (arbitrary reals).

    Exact for resolved data; reduces to index tiling (taken as a fast path)
    when the points are grid nodes modulo 1.
    """
    if len(axis_points) != grid.d:
        raise ValueError("need one coordinate array per axis")
    n = grid.n
    out = np.asarray(values, dtype=float)
    k = np.fft.fftfreq(n, d=1.0 / n)  # integer wavenumbers
    for ax, pts in enumerate(axis_points):
        pts = np.asarray(pts, dtype=float)
        frac = pts / grid.h
        idx = np.rint(frac).astype(np.int64)
        if np.abs(frac - idx).max() < 1e-9:
            out = np.take(out, idx % n, axis=ax)
            continue
        vhat = np.fft.fft(out, axis=ax) / n
        # split the Nyquist coefficient so the interpolant is real for
        # real data
        e = np.exp(2j * np.pi * np.outer(pts, k))
        e[:, n // 2] = np.cos(2 * np.pi * (n // 2) * pts)
        out = np.real(np.moveaxis(np.tensordot(e, vhat, axes=([1], [ax])), 0, ax))
    return out


# ---------------------------------------------------------------------------
# finite-difference calculus on the box


def _fd1(values: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Second-order first derivative: centered interior, one-sided ends."""
    v = np.moveaxis(values, axis, 0)
    out = np.empty_like(v)
    out[1:-1] = (v[2:] - v[:-2]) / (2 * h)
    out[0] = (-3 * v[0] + 4 * v[1] - v[2]) / (2 * h)
    out[-1] = (3 * v[-1] - 4 * v[-2] + v[-3]) / (2 * h)
    return np.moveaxis(out, 0, axis)


def _fd2(values: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Second-order second derivative: compact interior, one-sided ends."""
    v = np.moveaxis(values, axis, 0)
    out = np.empty_like(v)
    out[1:-1] = (v[2:] - 2 * v[1:-1] + v[:-2]) / h**2
    out[0] = (2 * v[0] - 5 * v[1] + 4 * v[2] - v[3]) / h**2
    out[-1] = (2 * v[-1] - 5 * v[-2] + 4 * v[-3] - v[-4]) / h**2
    return np.moveaxis(out, 0, axis)


def _fd1_order4(values: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Fourth-order first derivative, used for high-fidelity gradient
    extraction in 1d oracle comparisons (biased stencils near the ends)."""
    v = np.moveaxis(values, axis, 0)
    out = np.empty_like(v)
    out[2:-2] = (v[:-4] - 8 * v[1:-3] + 8 * v[3:-1] - v[4:]) / (12 * h)
    for i in (0, 1):
        out[i] = (
            -25 * v[i] + 48 * v[i + 1] - 36 * v[i + 2] + 16 * v[i + 3] - 3 * v[i + 4]
        ) / (12 * h)
    for i in (-2, -1):
        out[i] = (
            25 * v[i] - 48 * v[i - 1] + 36 * v[i - 2] - 16 * v[i - 3] + 3 * v[i - 4]
        ) / (12 * h)
    return np.moveaxis(out, 0, axis)


def _scalar_derivative(values: np.ndarray, grid: Grid, axis: int, order: int) -> np.ndarray:
    if isinstance(grid, TorusGrid):
        return spectral_derivative(values, grid, axis, order)
    return _fd1(values, axis, grid.h) if order == 1 else _fd2(values, axis, grid.h)


def _scalar_cross_derivative(values: np.ndarray, grid: Grid, i: int, j: int) -> np.ndarray:
    return _scalar_derivative(_scalar_derivative(values, grid, j, 1), grid, i, 1)


# ---------------------------------------------------------------------------
# public operations


def differentiate(f: Field, kind: str) -> Field:
    """Discrete derivative of a field.

    kind = "grad": rank 0 -> rank 1, (grad f)_i = d_i f
    kind = "hess": rank 0 -> rank 2 symmetric, (hess f)_ij = d_ij f
    kind = "div":  rank 1 -> rank 0, div v = d_i v_i
                   rank 2 -> rank 1, (div M)_j = d_i M_ij
    """
    g, d = f.grid, f.grid.d
    rank_offset = d if f.rank else None  # component axes precede grid axes
    if kind == "grad":
        if f.rank != 0:
            raise ValueError("grad acts on rank-0 fields")
        out = np.stack([_scalar_derivative(f.values, g, ax, 1) for ax in range(d)])
        result = Field(g, 1, out)
    elif kind == "hess":
        if f.rank != 0:
            raise ValueError("hess acts on rank-0 fields")
        H = np.empty((d, d) + g.shape)
        for i in range(d):
            H[i, i] = _scalar_derivative(f.values, g, i, 2)
            for j in range(i + 1, d):
                H[i, j] = _scalar_cross_derivative(f.values, g, i, j)
                H[j, i] = H[i, j]
        H = 0.5 * (H + np.swapaxes(H, 0, 1))  # exact symmetry, bitwise
        result = Field(g, 2, H, symmetric=True)
    elif kind == "div":
        if f.rank == 1:
            out = sum(_scalar_derivative(f.values[i], g, i, 1) for i in range(d))
            result = Field(g, 0, out)
        elif f.rank == 2:
            out = np.stack(
                [
                    sum(_scalar_derivative(f.values[i, j], g, i, 1) for i in range(d))
                    for j in range(d)
                ]
            )
            result = Field(g, 1, out)
        else:
            raise ValueError("div acts on rank-1 or rank-2 fields")
    else:
        raise ValueError(f"unknown derivative kind {kind!r}")
    if not np.all(np.isfinite(result.values)):
        raise NumericFault(f"{kind} produced non-finite values")
    return result


def mean(f: Field):
    """Cell average h^d * sum over nodes (torus only).

    Returns a scalar for rank 0, a d-vector for rank 1, a d x d matrix for
    rank 2.
    """
    if not isinstance(f.grid, TorusGrid):
        raise ValueError("mean is the periodic cell average; use a TorusGrid")
    axes = tuple(range(f.rank, f.values.ndim))
    return f.values.sum(axis=axes) * f.grid.cell_volume()


def _region_mask(grid: Grid, region) -> np.ndarray | None:
    if region is None:
        return None
    if not isinstance(grid, BoxGrid):
        raise ValueError("ball/annulus regions need a BoxGrid")
    r = grid.radius()
    if region[0] == "ball":
        mask = r < region[1]
    elif region[0] == "annulus":
        mask = (r >= region[1]) & (r < region[2])
    else:
        raise ValueError(f"unknown region {region!r}")
    if not mask.any():
        raise ValueError(f"region {region!r} contains no grid nodes")
    return mask


def lq_norm(f: Field, exponents, region=None) -> float:
    """L^q norm over a region; a list of exponents gives the intersection
    norm, i.e. the sum of the single-exponent norms."""
    if np.isscalar(exponents):
        exponents = [exponents]
    if len(exponents) == 0:
        raise ValueError("need at least one exponent")
    mag = f.magnitude()
    mask = _region_mask(f.grid, region)
    if mask is not None:
        mag = mag[mask]
    w = f.grid.cell_volume()
    total = 0.0
    for q in exponents:
        if q == np.inf:
            total += float(mag.max())
        elif q >= 1:
            total += float((w * np.sum(mag**q)) ** (1.0 / q))
        else:
            raise ValueError(f"exponent must be in [1, inf], got {q}")
    return total


@dataclass
class ShellRecord:
    """One dyadic annulus {R_lo <= |x| < R_hi} and a value measured on it."""

    R_lo: float
    R_hi: float
    value: float
    nodes: int
    complete: bool  # shell fully inside the box (R_hi <= L)
    skipped: bool = False


def _dyadic_shells(grid: BoxGrid):
    rmax = grid.L * np.sqrt(grid.d)
    R = 1.0
    while R < rmax:
        yield R, 2.0 * R
        R *= 2.0


def annular_profile(f: Field, q: float) -> list[ShellRecord]:
    """Per-shell L^q norms on dyadic annuli R_k = 2^k anchored at R = 1,
    clipped to the box.  Shells with no nodes are returned flagged."""
    if not isinstance(f.grid, BoxGrid):
        raise ValueError("annular profiles need a BoxGrid")
    if f.grid.L < 2:
        raise ValueError("need L >= 2 for at least two shells")
    r = f.grid.radius()
    mag = f.magnitude()
    w = f.grid.cell_volume()
    out = []
    for R_lo, R_hi in _dyadic_shells(f.grid):
        mask = (r >= R_lo) & (r < R_hi)
        nodes = int(mask.sum())
        if nodes == 0:
            out.append(ShellRecord(R_lo, R_hi, np.nan, 0, False, skipped=True))
            continue
        if q == np.inf:
            val = float(mag[mask].max())
        else:
            val = float((w * np.sum(mag[mask] ** q)) ** (1.0 / q))
        out.append(ShellRecord(R_lo, R_hi, val, nodes, complete=(R_hi <= f.grid.L)))
    return out


def sublinearity_ratio(w: Field) -> list[ShellRecord]:
    """Per-shell maxima of |w(x)| / (1 + |x|).

    Strict sublinearity at infinity shows up as ratios decaying to zero;
    affine growth gives ratios approaching a positive constant.
    """
    if w.rank != 0:
        raise ValueError("sublinearity applies to rank-0 fields")
    if not isinstance(w.grid, BoxGrid):
        raise ValueError("sublinearity profiles need a BoxGrid")
    r = w.grid.radius()
    ratio = np.abs(w.values) / (1.0 + r)
    out = []
    for R_lo, R_hi in _dyadic_shells(w.grid):
        mask = (r >= R_lo) & (r < R_hi)
        nodes = int(mask.sum())
        if nodes == 0:
            out.append(ShellRecord(R_lo, R_hi, np.nan, 0, False, skipped=True))
            continue
        out.append(
            ShellRecord(R_lo, R_hi, float(ratio[mask].max()), nodes, R_hi <= w.grid.L)
        )
    return out


# ---------------------------------------------------------------------------
# serialization

_MAGIC = b"DFH1"
_GRID_TORUS, _GRID_BOX = 0, 1
_FLAG_SYM, _FLAG_SKEW = 1, 2


def save_field(path, f: Field) -> None:
    """Self-describing binary container: 4-byte magic, header, then the
    float64 payload in C order (component axes first)."""
    if isinstance(f.grid, TorusGrid):
        kind, L = _GRID_TORUS, 0.0
    else:
        kind, L = _GRID_BOX, float(f.grid.L)
    flags = (_FLAG_SYM if f.symmetric else 0) | (_FLAG_SKEW if f.skew else 0)
    header = struct.pack("<4sBBBBqd", _MAGIC, kind, f.grid.d, f.rank, flags, f.grid.n, L)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(f.values, dtype="<f8").tobytes())


def load_field(path) -> Field:
    with open(path, "rb") as fh:
        header = fh.read(struct.calcsize("<4sBBBBqd"))
        magic, kind, d, rank, flags, n, L = struct.unpack("<4sBBBBqd", header)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a field container")
        grid = TorusGrid(d, n) if kind == _GRID_TORUS else BoxGrid(d, int(L), n)
        shape = (d,) * rank + grid.shape
        payload = np.frombuffer(fh.read(), dtype="<f8").reshape(shape).copy()
    return Field(grid, rank, payload, symmetric=bool(flags & _FLAG_SYM), skew=bool(flags & _FLAG_SKEW))


def field_to_csv(f: Field, path, axis: int = 0, index=None) -> None:
    """CSV export of a rank-0 field: full table in 1d/2d, an axis-aligned
    slice through the given index (default: through the origin) in 3d."""
    if f.rank != 0:
        raise ValueError("CSV export is for rank-0 fields")
    coords = f.grid.axis_coords()
    vals = f.values
    if f.grid.d == 3:
        if index is None:
            index = f.grid.shape[axis] // 2
        vals = np.take(vals, index, axis=axis)
        coords = [c for ax, c in enumerate(coords) if ax != axis]
    rows = []
    if len(coords) == 1:
        header = "x,value"
        for i, x in enumerate(coords[0]):
            rows.append(f"{float(x)!r},{float(vals[i])!r}")
    else:
        header = "x1,x2,value"
        for i, x1 in enumerate(coords[0]):
            for j, x2 in enumerate(coords[1]):
                rows.append(f"{float(x1)!r},{float(x2)!r},{float(vals[i, j])!r}")
    with open(path, "w") as fh:
        fh.write(header + "\n")
        fh.write("\n".join(rows) + "\n")
