"""Coefficient model: a periodic background plus a localized defect.

A :class:`CoefficientSet` holds closed-form evaluators for the four pieces

    a = a_per + a_tilde,   b = b_per + b_tilde,

together with the declared decay exponents r, s of the defect parts and the
ellipticity bounds.  Coefficients are functions on R^d, not grid data, so a
single set serves every grid resolution; sampling happens lazily through the
``sample_*`` helpers.

The built-in catalog:

========================  ====  =====================================================
identity                  d     a = Id, b = 0, no defect
sin-drift-1d              1     a = 1, b_per = amp sin(2 pi x), optional compact
                                zero-integral drift defect (a smooth dipole)
shear-2d                  2     a = Id, b_per = (amp sin(2 pi x2), 0)
gradient-defect           3     a = Id, b_per = 0, b_tilde = grad(psi) for a
                                Gaussian psi; the invariant measure is exp(-psi)
gaussian-bump-defect      3     a = Id + Gaussian bump, b_per = 0,
                                b_tilde = Gaussian bump along e1
algebraic-decay-defect    any   defect parts ~ (1 + |x|^2)^(-gamma/2); instances
                                whose declared r, s are inconsistent with gamma are
                                marked as counterexamples instead of rejected
========================  ====  =====================================================

Holder continuity of the coefficients is assumed, not tested: every catalog
family is smooth by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fields import BoxGrid, Field, annular_profile

__all__ = [
    "CoefficientSet",
    "ValidationReport",
    "build_family",
    "from_config",
    "validate",
    "sample_a_per",
    "sample_a_tilde",
    "sample_b_per",
    "sample_b_tilde",
    "sample_a_full",
    "sample_b_full",
    "CATALOG",
]


@dataclass
class CoefficientSet:
    """Evaluators are functions of a list of (broadcastable) coordinate
    arrays and return component-first arrays: shape (d, d) + grid for the
    matrix parts, (d,) + grid for the vector parts."""

    d: int
    a_per: callable
    b_per: callable
    a_tilde: callable | None = None
    b_tilde: callable | None = None
    r: float | None = None
    s: float | None = None
    lam: float = 1.0
    Lam: float = 1.0
    name: str = "custom"
    params: dict = field(default_factory=dict)
    counterexample: bool = False
    notes: str = ""

    @property
    def has_defect(self) -> bool:
        return self.a_tilde is not None or self.b_tilde is not None

    def q_exponent(self) -> float:
        """q = max(r, s), the exponent driving the corrector estimates."""
        declared = [e for e in (self.r, self.s) if e is not None]
        if not declared:
            raise ValueError(f"{self.name}: no declared defect exponents")
        return max(declared)

    def q_star(self) -> float:
        """Sobolev-shifted exponent 1/q* = 1/max(r, s) - 1/d."""
        inv = 1.0 / self.q_exponent() - 1.0 / self.d
        if inv <= 0:
            raise ValueError("q* undefined: need max(r, s) < d")
        return 1.0 / inv

    def q_prime(self) -> float:
        """Defect-measure exponent 1/q' = min(1/r - 1/d, 1/s - 1/d)."""
        return self.q_star()

    def alpha_exponent(self) -> float:
        """Skew-defect exponent 1/alpha = min(1/r - 2/d, 1/s - 2/d)."""
        inv = 1.0 / self.q_exponent() - 2.0 / self.d
        if inv <= 0:
            raise ValueError("alpha undefined: need max(r, s) < d/2")
        return 1.0 / inv


# ---------------------------------------------------------------------------
# sampling


def _broadcast(values, shape):
    return np.ascontiguousarray(np.broadcast_to(values, shape))


def sample_a_per(cs: CoefficientSet, grid) -> Field:
    xs = grid.meshgrid()
    vals = _broadcast(cs.a_per(xs), (cs.d, cs.d) + grid.shape)
    return Field(grid, 2, vals, symmetric=True)


def sample_b_per(cs: CoefficientSet, grid) -> Field:
    xs = grid.meshgrid()
    vals = _broadcast(cs.b_per(xs), (cs.d,) + grid.shape)
    return Field(grid, 1, vals)


def sample_a_tilde(cs: CoefficientSet, grid) -> Field:
    xs = grid.meshgrid()
    if cs.a_tilde is None:
        vals = np.zeros((cs.d, cs.d) + grid.shape)
    else:
        vals = _broadcast(cs.a_tilde(xs), (cs.d, cs.d) + grid.shape)
    return Field(grid, 2, vals, symmetric=True)


def sample_b_tilde(cs: CoefficientSet, grid) -> Field:
    xs = grid.meshgrid()
    if cs.b_tilde is None:
        vals = np.zeros((cs.d,) + grid.shape)
    else:
        vals = _broadcast(cs.b_tilde(xs), (cs.d,) + grid.shape)
    return Field(grid, 1, vals)


def sample_a_full(cs: CoefficientSet, grid) -> Field:
    vals = sample_a_per(cs, grid).values + sample_a_tilde(cs, grid).values
    return Field(grid, 2, vals, symmetric=True)


def sample_b_full(cs: CoefficientSet, grid) -> Field:
    vals = sample_b_per(cs, grid).values + sample_b_tilde(cs, grid).values
    return Field(grid, 1, vals)


# ---------------------------------------------------------------------------
# building blocks


def _radius_sq(xs):
    return sum(np.asarray(x) ** 2 for x in xs)


def _identity_matrix(d, xs, scalar=None):
    shape = np.broadcast_shapes(*[np.shape(x) for x in xs]) if d > 1 else np.shape(xs[0])
    out = np.zeros((d, d) + shape)
    diag = 1.0 if scalar is None else scalar
    for i in range(d):
        out[i, i] = diag
    return out


def gaussian_bump(xs, amp, sigma):
    return amp * np.exp(-_radius_sq(xs) / (2.0 * sigma**2))


def algebraic_bump(xs, amp, gamma):
    return amp * (1.0 + _radius_sq(xs)) ** (-gamma / 2.0)


def smooth_dipole(x, amp, width):
    """Derivative of the C-infinity compact bump exp(1 - 1/(1 - t^2)),
    t = x/width: compactly supported in [-width, width] with exact zero
    integral."""
    t = np.asarray(x) / width
    out = np.zeros_like(t, dtype=float)
    inside = np.abs(t) < 1.0
    ti = t[inside]
    core = np.exp(1.0 - 1.0 / (1.0 - ti**2))
    out[inside] = amp * core * (-2.0 * ti / (1.0 - ti**2) ** 2) / width
    return out


def smooth_bump(x, amp, width):
    t = np.asarray(x) / width
    out = np.zeros_like(t, dtype=float)
    inside = np.abs(t) < 1.0
    out[inside] = amp * np.exp(1.0 - 1.0 / (1.0 - t[inside] ** 2))
    return out


# ---------------------------------------------------------------------------
# catalog


def _build_identity(d=3):
    return CoefficientSet(
        d=d,
        a_per=lambda xs: _identity_matrix(d, xs),
        b_per=lambda xs: np.zeros((d,) + np.broadcast_shapes(*[np.shape(x) for x in xs])),
        lam=1.0,
        Lam=1.0,
        name="identity",
        params={"d": d},
    )


def _build_sin_drift_1d(amp=1.0, defect_amp=0.0, defect_width=2.0):
    def b_per(xs):
        return np.asarray([amp * np.sin(2.0 * np.pi * xs[0])])

    b_tilde = None
    s = None
    if defect_amp != 0.0:
        def b_tilde(xs):
            return np.asarray([smooth_dipole(xs[0], defect_amp, defect_width)])

        s = 1.0  # compact support: in every L^s; the 1d setting is outside
        # the standing d >= 3 hypotheses and is used as solver ground truth
    return CoefficientSet(
        d=1,
        a_per=lambda xs: _identity_matrix(1, xs),
        b_per=b_per,
        b_tilde=b_tilde,
        s=s,
        lam=1.0,
        Lam=1.0,
        name="sin-drift-1d",
        params={"amp": amp, "defect_amp": defect_amp, "defect_width": defect_width},
        notes="integrating-factor closed forms available (oracle1d)",
    )


def _build_shear_2d(amp=1.0):
    def b_per(xs):
        shape = np.broadcast_shapes(*[np.shape(x) for x in xs])
        out = np.zeros((2,) + shape)
        out[0] = amp * np.sin(2.0 * np.pi * xs[1])
        return out

    return CoefficientSet(
        d=2,
        a_per=lambda xs: _identity_matrix(2, xs),
        b_per=b_per,
        lam=1.0,
        Lam=1.0,
        name="shear-2d",
        params={"amp": amp},
        notes="divergence-free drift: m_per is constant",
    )


def _build_gradient_defect(psi0=1.5, sigma=1.0, d=3):
    if sigma <= 0:
        raise ValueError("sigma must be positive")

    def b_tilde(xs):
        psi = gaussian_bump(xs, psi0, sigma)
        shape = np.shape(psi)
        out = np.zeros((d,) + shape)
        for i in range(d):
            out[i] = -np.asarray(xs[i]) / sigma**2 * psi
        return out

    return CoefficientSet(
        d=d,
        a_per=lambda xs: _identity_matrix(d, xs),
        b_per=lambda xs: np.zeros((d,) + np.broadcast_shapes(*[np.shape(x) for x in xs])),
        b_tilde=b_tilde,
        r=1.2,
        s=1.2,
        lam=1.0,
        Lam=1.0,
        name="gradient-defect",
        params={"psi0": psi0, "sigma": sigma, "d": d},
        notes="b_tilde = grad(psi); invariant measure exp(-psi) in closed form",
    )


def _build_gaussian_bump_defect(a_amp=0.5, b_amp=1.0, sigma=1.0, d=3, r=1.2, s=1.2):
    if a_amp <= -1.0:
        raise ValueError("a_amp <= -1 destroys ellipticity")

    def a_tilde(xs):
        bump = gaussian_bump(xs, a_amp, sigma)
        return _identity_matrix(d, xs, scalar=bump)

    def b_tilde(xs):
        shape = np.broadcast_shapes(*[np.shape(x) for x in xs])
        out = np.zeros((d,) + shape)
        out[0] = gaussian_bump(xs, b_amp, sigma)
        return out

    return CoefficientSet(
        d=d,
        a_per=lambda xs: _identity_matrix(d, xs),
        b_per=lambda xs: np.zeros((d,) + np.broadcast_shapes(*[np.shape(x) for x in xs])),
        a_tilde=a_tilde,
        b_tilde=b_tilde,
        r=r,
        s=s,
        lam=min(1.0, 1.0 + a_amp),
        Lam=max(1.0, 1.0 + a_amp),
        name="gaussian-bump-defect",
        params={"a_amp": a_amp, "b_amp": b_amp, "sigma": sigma, "d": d, "r": r, "s": s},
    )


def _build_algebraic_decay_defect(gamma_a=4.0, gamma_b=4.0, a_amp=0.5, b_amp=1.0, d=3, r=1.2, s=1.2):
    if gamma_a <= 0 or gamma_b <= 0:
        raise ValueError("decay rates gamma must be positive")
    if a_amp <= -1.0:
        raise ValueError("a_amp <= -1 destroys ellipticity")

    def a_tilde(xs):
        bump = algebraic_bump(xs, a_amp, gamma_a)
        return _identity_matrix(d, xs, scalar=bump)

    def b_tilde(xs):
        shape = np.broadcast_shapes(*[np.shape(x) for x in xs])
        out = np.zeros((d,) + shape)
        out[0] = algebraic_bump(xs, b_amp, gamma_b)
        return out

    # |x|^(-gamma) lies in L^p iff gamma p > d; a declaration breaking that
    # is allowed through as an explicit counterexample instance
    broken = (a_amp != 0 and r is not None and gamma_a * r <= d) or (
        b_amp != 0 and s is not None and gamma_b * s <= d
    )
    return CoefficientSet(
        d=d,
        a_per=lambda xs: _identity_matrix(d, xs),
        b_per=lambda xs: np.zeros((d,) + np.broadcast_shapes(*[np.shape(x) for x in xs])),
        a_tilde=a_tilde if a_amp != 0 else None,
        b_tilde=b_tilde if b_amp != 0 else None,
        r=r if a_amp != 0 else None,
        s=s if b_amp != 0 else None,
        lam=min(1.0, 1.0 + a_amp),
        Lam=max(1.0, 1.0 + a_amp),
        name="algebraic-decay-defect",
        params={
            "gamma_a": gamma_a, "gamma_b": gamma_b, "a_amp": a_amp,
            "b_amp": b_amp, "d": d, "r": r, "s": s,
        },
        counterexample=broken,
    )


CATALOG = {
    "identity": _build_identity,
    "sin-drift-1d": _build_sin_drift_1d,
    "shear-2d": _build_shear_2d,
    "gradient-defect": _build_gradient_defect,
    "gaussian-bump-defect": _build_gaussian_bump_defect,
    "algebraic-decay-defect": _build_algebraic_decay_defect,
}


def build_family(name: str, params: dict | None = None) -> CoefficientSet:
    """Instantiate a catalog family.  Unknown names and parameters that make
    the coefficients meaningless (non-elliptic, non-decaying) raise."""
    if name not in CATALOG:
        raise KeyError(f"unknown coefficient family {name!r}; catalog: {sorted(CATALOG)}")
    return CATALOG[name](**(params or {}))


# ---------------------------------------------------------------------------
# config-driven custom coefficients


def _periodic_scalar(spec: dict):
    """constant + sum of cos/sin modes: entries [amp, k_1, ..., k_d]."""
    const = float(spec.get("constant", 0.0))
    cos_modes = [tuple(m) for m in spec.get("cos", [])]
    sin_modes = [tuple(m) for m in spec.get("sin", [])]

    def f(xs):
        out = const * np.ones(np.broadcast_shapes(*[np.shape(x) for x in xs]))
        for amp, *ks in cos_modes:
            phase = 2.0 * np.pi * sum(k * np.asarray(x) for k, x in zip(ks, xs))
            out = out + amp * np.cos(phase)
        for amp, *ks in sin_modes:
            phase = 2.0 * np.pi * sum(k * np.asarray(x) for k, x in zip(ks, xs))
            out = out + amp * np.sin(phase)
        return out

    return f


def _bump_sum(specs: list[dict]):
    def f(xs):
        out = np.zeros(np.broadcast_shapes(*[np.shape(x) for x in xs]))
        for spec in specs:
            kind = spec.get("kind", "gaussian")
            amp = float(spec["amp"])
            if kind == "gaussian":
                out = out + gaussian_bump(xs, amp, float(spec["sigma"]))
            elif kind == "algebraic":
                out = out + algebraic_bump(xs, amp, float(spec["gamma"]))
            else:
                raise ValueError(f"unknown bump kind {kind!r}")
        return out

    return f


def from_config(table: dict) -> CoefficientSet:
    """Build a CoefficientSet from a config table.

    Schema: ``family`` plus ``params`` selects a catalog entry; otherwise
    ``d`` with optional ``a_per`` (isotropic periodic scalar spec),
    ``b_per`` (list of periodic scalar specs), ``a_tilde`` (isotropic bump
    list), ``b_tilde`` (list of bump lists) and declared ``r``, ``s``.
    """
    if "family" in table:
        return build_family(table["family"], table.get("params"))
    d = int(table["d"])
    a_spec = table.get("a_per", {"constant": 1.0})
    a_scalar = _periodic_scalar(a_spec)

    def a_per(xs):
        return _identity_matrix(d, xs, scalar=a_scalar(xs))

    b_specs = table.get("b_per")
    if b_specs is None:
        def b_per(xs):
            return np.zeros((d,) + np.broadcast_shapes(*[np.shape(x) for x in xs]))
    else:
        comps = [_periodic_scalar(spec) for spec in b_specs]

        def b_per(xs):
            shape = np.broadcast_shapes(*[np.shape(x) for x in xs])
            out = np.zeros((d,) + shape)
            for i, c in enumerate(comps):
                out[i] = c(xs)
            return out

    a_tilde = None
    if "a_tilde" in table:
        bumps = _bump_sum(table["a_tilde"])

        def a_tilde(xs):
            return _identity_matrix(d, xs, scalar=bumps(xs))

    b_tilde = None
    if "b_tilde" in table:
        comps_t = [_bump_sum(spec) for spec in table["b_tilde"]]

        def b_tilde(xs):
            shape = np.broadcast_shapes(*[np.shape(x) for x in xs])
            out = np.zeros((d,) + shape)
            for i, c in enumerate(comps_t):
                out[i] = c(xs)
            return out

    return CoefficientSet(
        d=d,
        a_per=a_per,
        b_per=b_per,
        a_tilde=a_tilde,
        b_tilde=b_tilde,
        r=table.get("r"),
        s=table.get("s"),
        name=table.get("name", "custom"),
        params={k: v for k, v in table.items() if k not in ("name",)},
    )


# ---------------------------------------------------------------------------
# validation


@dataclass
class ValidationReport:
    lambda_est: float
    Lambda_est: float
    decay_fit_a: float | None
    decay_fit_b: float | None
    flags: list[str]

    @property
    def ok(self) -> bool:
        return not self.flags


def _summability_slope(f: Field, p: float) -> float:
    """Least-squares slope of log2(per-shell ||f||_{L^p}^p) against the shell
    index; negative means the L^p mass decays geometrically outward, the
    finite-window proxy for f in L^p."""
    shells = [s for s in annular_profile(f, p) if not s.skipped and s.complete]
    if len(shells) < 2:
        raise ValueError("not enough complete shells for a decay fit")
    y = np.log2([max(s.value**p, 1e-300) for s in shells])
    k = np.arange(len(y))
    slope = np.polyfit(k, y, 1)[0]
    return float(slope)


def _pointwise_decay_exponent(f: Field) -> float:
    """Fitted exponent gamma with sup_shell |f| ~ R^(-gamma)."""
    shells = [s for s in annular_profile(f, np.inf) if not s.skipped and s.complete]
    if len(shells) < 2:
        raise ValueError("not enough complete shells for a decay fit")
    y = np.log2([max(s.value, 1e-300) for s in shells])
    k = np.arange(len(y))
    return float(-np.polyfit(k, y, 1)[0])


def validate(cs: CoefficientSet, probe_grid: BoxGrid) -> ValidationReport:
    """Check the standing assumptions on a probe grid.

    Violations are reported in ``flags``, never raised: lambda_est <= 0,
    declared exponents r or s at or above the dimension, and defect decay
    fits inconsistent with the declared L^r / L^s membership.
    """
    flags = []
    if probe_grid.n / (2 * probe_grid.L) < 16:
        flags.append("probe-underresolved: fewer than 16 nodes per period")

    a_full = sample_a_full(cs, probe_grid).values
    d = cs.d
    amat = np.moveaxis(a_full.reshape(d, d, -1), -1, 0)
    eigs = np.linalg.eigvalsh(amat)
    lambda_est = float(eigs[:, 0].min())
    Lambda_est = float(eigs[:, -1].max())
    if lambda_est <= 0:
        flags.append(f"ellipticity: min eigenvalue {lambda_est:.3e} <= 0")

    decay_fit_a = decay_fit_b = None
    if cs.a_tilde is not None:
        at = sample_a_tilde(cs, probe_grid)
        decay_fit_a = _pointwise_decay_exponent(at)
        if cs.r is not None:
            if cs.r >= d:
                flags.append(f"r = {cs.r} >= d = {d}: outside the corrector hypotheses")
            if _summability_slope(at, cs.r) >= 0:
                flags.append(f"a_tilde decay inconsistent with L^{cs.r}")
    if cs.b_tilde is not None:
        bt = sample_b_tilde(cs, probe_grid)
        decay_fit_b = _pointwise_decay_exponent(bt)
        if cs.s is not None:
            if cs.s >= d:
                flags.append(f"s = {cs.s} >= d = {d}: outside the corrector hypotheses")
            if _summability_slope(bt, cs.s) >= 0:
                flags.append(f"b_tilde decay inconsistent with L^{cs.s}")

    return ValidationReport(lambda_est, Lambda_est, decay_fit_a, decay_fit_b, flags)
