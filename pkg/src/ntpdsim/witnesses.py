"""Tripartite non-Gaussian entanglement and steering witnesses.

Two independent evaluation routes are kept side by side:

* the variance route: sums of variances of gained high-order quadrature
  combinations, checked against the separable / local-hidden-state bounds
  with optimal gain parameters.  This route is authoritative for all flags.
* the closed-form route: the simplified symmetric-system inequalities written
  in terms of normally- and anti-ordered moments.  The main-text form carries
  coefficient 1 on the squared pair moment where the appendix derivation
  carries 2; both variants are reported so the variance route adjudicates.

Moment conventions: falling-factorial intensity ratios are the single
normally-ordered expectations <a^dag^n a^n>, anti-ordered analogues are
truncated operator products <a^n a^dag^n>, and every squared moment is a
modulus squared, which makes all margins invariant under local phase
rotations of the modes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations

import numpy as np
from scipy.optimize import minimize_scalar

from .fock import (
    DensityOperator,
    DiagonalObservable,
    ModeLayout,
    StateVector,
    TOP_LEVEL_TOL,
    expectation,
    lowering_monomial,
)

_PAIRS = {0: (1, 2), 1: (0, 2), 2: (0, 1)}
GAIN_DEGENERACY_TOL = 1e-12
GAIN_SEARCH_RANGE = (-10.0, 10.0)


def _falling_diag(layout: ModeLayout, mode: int, n: int) -> np.ndarray:
    occ = layout.occupations(mode).astype(float)
    out = np.ones(layout.total_dim)
    for r in range(n):
        out *= np.maximum(occ - r, 0.0)
    return out


def _rising_diag(layout: ModeLayout, mode: int, n: int) -> np.ndarray:
    """Diagonal of a^n a^dag^n, i.e. (m+1)...(m+n).

    This is the exact infinite-dimensional diagonal, not the product of
    truncated ladders: anti-ordered moments evaluated this way are the true
    operator expectations for any state supported inside the truncation, so
    separable states can never spuriously violate the variance bounds.
    """
    occ = layout.occupations(mode).astype(float)
    out = np.ones(layout.total_dim)
    for r in range(1, n + 1):
        out *= occ + r
    return out


def _pair_c2_diag(layout: ModeLayout, l: int, m: int) -> np.ndarray:
    """Two-mode order-2 quadrature commutator constant as a number-diagonal."""
    il = layout.occupations(l).astype(float)
    im = layout.occupations(m).astype(float)
    return 4.0 * (2.0 + il * (3.0 + il) + im ** 2 * (1.0 + 2.0 * il)
                  + im * (3.0 + 4.0 * il + 2.0 * il ** 2))


def moment_observables(layout: ModeLayout, modes, orders, prefix: str) -> dict:
    """Named observables whose ensemble means populate a MomentSet.

    ``modes`` are the three layout slots of the triple; names use local
    indices 1..3 so cavity and virtual triples share one schema.
    """
    modes = tuple(modes)
    obs = {}
    for k_loc, k in enumerate(modes, start=1):
        obs[f"{prefix}:i:{k_loc}"] = DiagonalObservable(layout, _falling_diag(layout, k, 1))
    for (a_loc, a), (b_loc, b) in combinations(list(enumerate(modes, start=1)), 2):
        obs[f"{prefix}:ii:{a_loc}{b_loc}"] = DiagonalObservable(
            layout, _falling_diag(layout, a, 1) * _falling_diag(layout, b, 1))
        obs[f"{prefix}:clm2:{a_loc}{b_loc}"] = DiagonalObservable(
            layout, _pair_c2_diag(layout, a, b))
    for n in orders:
        obs[f"{prefix}:m3:{n}"] = lowering_monomial(layout, {m: n for m in modes})
        for k_loc, k in enumerate(modes, start=1):
            obs[f"{prefix}:m1:{n}:{k_loc}"] = lowering_monomial(layout, {k: n})
            if n > 1:
                obs[f"{prefix}:n1:{n}:{k_loc}"] = DiagonalObservable(
                    layout, _falling_diag(layout, k, n))
            obs[f"{prefix}:a1:{n}:{k_loc}"] = DiagonalObservable(
                layout, _rising_diag(layout, k, n))
        for (a_loc, a), (b_loc, b) in combinations(list(enumerate(modes, start=1)), 2):
            obs[f"{prefix}:m2:{n}:{a_loc}{b_loc}"] = lowering_monomial(layout, {a: n, b: n})
            obs[f"{prefix}:n2:{n}:{a_loc}{b_loc}"] = DiagonalObservable(
                layout, _falling_diag(layout, a, n) * _falling_diag(layout, b, n))
            obs[f"{prefix}:a2:{n}:{a_loc}{b_loc}"] = DiagonalObservable(
                layout, _rising_diag(layout, a, n) * _rising_diag(layout, b, n))
    return obs


def top_level_observables(layout: ModeLayout) -> dict:
    """Population of the highest kept Fock level, one observable per mode."""
    out = {}
    for m, d in enumerate(layout.dims):
        diag = (layout.occupations(m) == d - 1).astype(float)
        out[f"toplev:{m}"] = DiagonalObservable(layout, diag)
    return out


# ---------------------------------------------------------------------------
# Quadrature operators (explicit sparse route, used on states and in tests)


class QuadratureOperators:
    """Cached sparse high-order quadratures and their products for one triple."""

    def __init__(self, layout: ModeLayout, modes, n: int):
        self.layout = layout
        self.modes = tuple(modes)
        self.n = n
        self._cache = {}

    def single(self, k_loc: int):
        key = ("s", k_loc)
        if key not in self._cache:
            low = lowering_monomial(self.layout, {self.modes[k_loc]: self.n}).to_sparse()
            x = low + low.dag()
            y = 1j * (low.dag() - low)
            self._cache[key] = (x, y)
        return self._cache[key]

    def pair(self, k_loc: int):
        key = ("p", k_loc)
        if key not in self._cache:
            l, m = _PAIRS[k_loc]
            low = lowering_monomial(
                self.layout, {self.modes[l]: self.n, self.modes[m]: self.n}).to_sparse()
            x = low + low.dag()
            y = 1j * (low.dag() - low)
            self._cache[key] = (x, y)
        return self._cache[key]

    def products(self, k_loc: int):
        """Squares and cross products entering the bipartition {k,(l,m)}."""
        key = ("prod", k_loc)
        if key not in self._cache:
            xk, yk = self.single(k_loc)
            xp, yp = self.pair(k_loc)
            self._cache[key] = {
                "xk": xk, "yk": yk, "xp": xp, "yp": yp,
                "xk2": xk @ xk, "yk2": yk @ yk,
                "xp2": xp @ xp, "yp2": yp @ yp,
                "xx": xk @ xp, "yy": yk @ yp, "xy": xk @ yp, "yx": yk @ xp,
            }
        return self._cache[key]


# ---------------------------------------------------------------------------
# Moment sets


@dataclass
class MomentSet:
    """Every scalar moment the order-n criteria need, for one mode triple."""

    n: int
    designation: str                 # "cavity" or "virtual"
    m1: np.ndarray                   # <a_k^n>, complex, per mode
    n1: np.ndarray                   # <a^dag^n a^n>, real
    a1: np.ndarray                   # <a^n a^dag^n>, real (truncated product)
    i1: np.ndarray                   # <I_k>
    m2: np.ndarray                   # <a_l^n a_m^n> for the pair opposite mode k
    n2: np.ndarray
    a2: np.ndarray
    ii: np.ndarray                   # <I_l I_m>
    m3: complex
    var_single: np.ndarray           # Var X_k^n + Var Y_k^n
    var_pair: np.ndarray
    cov_cos: np.ndarray              # Cov(X_k,X_lm) - Cov(Y_k,Y_lm)
    cov_sin: np.ndarray              # Cov(X_k,Y_lm) + Cov(Y_k,X_lm)
    c_single: np.ndarray             # <C_k^n>
    c_pair: np.ndarray               # <C_lm^n> for the pair opposite mode k
    n_samples: int = 0               # trajectories behind the estimate (0 = exact)
    trusted: bool = True

    def center(self, k: int = 0) -> float:
        """|<a1 a2 a3> - <a_k><a_l a_m>| for bipartition k."""
        return abs(self.m3 - self.m1[k] * self.m2[k])

    def cov_magnitude(self, k: int) -> float:
        """Quadrature-orientation-optimized |CovDelta| = 4|m3 - m1 m2|."""
        return float(np.hypot(self.cov_cos[k], self.cov_sin[k]))

    def symmetric_mean(self) -> dict:
        return {
            "m1": complex(np.mean(self.m1)), "m2": complex(np.mean(self.m2)),
            "n1": float(np.mean(self.n1)), "a1": float(np.mean(self.a1)),
            "n2": float(np.mean(self.n2)), "a2": float(np.mean(self.a2)),
            "i1": float(np.mean(self.i1)), "ii": float(np.mean(self.ii)),
            "c1": float(np.mean(self.c_single)), "m3": complex(self.m3),
        }


def _c_constants(n: int, i1: np.ndarray, ii: np.ndarray, clm2: np.ndarray):
    if n == 1:
        c_single = np.full(3, 2.0)
        c_pair = np.array([2.0 * (i1[l] + i1[m] + 1.0) for k, (l, m) in _PAIRS.items()])
    elif n == 2:
        c_single = 8.0 * i1 + 4.0
        c_pair = clm2
    else:
        raise ValueError("criteria are implemented for orders n in {1, 2}")
    return c_single, c_pair


def accumulate_moments(
    source, modes, n: int, designation: str = "cavity", quadrature_route: bool = False,
) -> MomentSet:
    """Moment set of a state or density operator via explicit sparse operators.

    With ``quadrature_route=True`` the X/Y covariance scalars come from the
    cached truncated quadrature-operator products (the independent route used
    by the cross-validation tests); by default they follow from the exact
    bilinear identities on the moments, which agree with the quadrature
    products on any state supported away from the truncation edge and stay
    sound on marginal states.
    """
    if n not in (1, 2):
        raise ValueError("criteria are implemented for orders n in {1, 2}")
    layout = source.layout
    modes = tuple(modes)
    obs = moment_observables(layout, modes, (n,), prefix="w")

    def ev(name):
        o = obs[name]
        if isinstance(source, StateVector):
            psi = source.amplitudes
            return o.expect(psi) / source.norm_sq
        return o.expect_rho(source.matrix)

    m1 = np.array([ev(f"w:m1:{n}:{k}") for k in (1, 2, 3)])
    if n == 1:
        n1 = np.array([np.real(ev(f"w:i:{k}")) for k in (1, 2, 3)])
    else:
        n1 = np.array([np.real(ev(f"w:n1:{n}:{k}")) for k in (1, 2, 3)])
    a1 = np.array([np.real(ev(f"w:a1:{n}:{k}")) for k in (1, 2, 3)])
    i1 = np.array([np.real(ev(f"w:i:{k}")) for k in (1, 2, 3)])
    pair_key = {0: "23", 1: "13", 2: "12"}
    m2 = np.array([ev(f"w:m2:{n}:{pair_key[k]}") for k in range(3)])
    n2 = np.array([np.real(ev(f"w:n2:{n}:{pair_key[k]}")) for k in range(3)])
    a2 = np.array([np.real(ev(f"w:a2:{n}:{pair_key[k]}")) for k in range(3)])
    ii = np.array([np.real(ev(f"w:ii:{pair_key[k]}")) for k in range(3)])
    clm2 = np.array([np.real(ev(f"w:clm2:{pair_key[k]}")) for k in range(3)])
    m3 = ev(f"w:m3:{n}")

    if quadrature_route:
        quad = QuadratureOperators(layout, modes, n)
        var_single = np.empty(3)
        var_pair = np.empty(3)
        cov_cos = np.empty(3)
        cov_sin = np.empty(3)
        for k in range(3):
            p = quad.products(k)
            e = {key: expectation(source, op) for key, op in p.items()}
            var_single[k] = np.real(e["xk2"] + e["yk2"]) - abs(e["xk"]) ** 2 - abs(e["yk"]) ** 2
            var_pair[k] = np.real(e["xp2"] + e["yp2"]) - abs(e["xp"]) ** 2 - abs(e["yp"]) ** 2
            cov_cos[k] = (np.real(e["xx"] - e["xk"] * e["xp"])
                          - np.real(e["yy"] - e["yk"] * e["yp"]))
            cov_sin[k] = (np.real(e["xy"] - e["xk"] * e["yp"])
                          + np.real(e["yx"] - e["yk"] * e["xp"]))
    else:
        var_single = 2.0 * (n1 + a1) - 4.0 * np.abs(m1) ** 2
        var_pair = 2.0 * (n2 + a2) - 4.0 * np.abs(m2) ** 2
        delta = m3 - m1 * m2
        cov_cos = 4.0 * np.real(delta)
        cov_sin = 4.0 * np.imag(delta)

    c_single, c_pair = _c_constants(n, i1, ii, clm2)
    top = source.top_level_populations()
    trusted = bool(np.max(top[list(modes)]) < TOP_LEVEL_TOL)
    return MomentSet(
        n, designation, m1, n1, a1, i1, m2, n2, a2, ii, complex(m3),
        var_single, var_pair, cov_cos, cov_sin, c_single, c_pair,
        n_samples=0, trusted=trusted,
    )


def moment_set_from_means(
    means: dict, n: int, designation: str, prefix: str,
    n_samples: int = 0, trusted: bool = True,
) -> MomentSet:
    """Build a MomentSet from named ensemble means (streaming route).

    The X/Y covariance scalars follow from exact bilinear operator
    identities on the truncated products:
    Var(X)+Var(Y) = 2(N1+A1) - 4|M1|^2 per mode, 2(N2+A2) - 4|M2|^2 per
    pair, and CovDelta = 4 Re(M3 - M1 M2) with quadrature complement
    4 Im(M3 - M1 M2).
    """
    g = lambda name: means[f"{prefix}:{name}"]
    m1 = np.array([g(f"m1:{n}:{k}") for k in (1, 2, 3)])
    i1 = np.array([np.real(g(f"i:{k}")) for k in (1, 2, 3)])
    n1 = i1.copy() if n == 1 else np.array(
        [np.real(g(f"n1:{n}:{k}")) for k in (1, 2, 3)])
    a1 = np.array([np.real(g(f"a1:{n}:{k}")) for k in (1, 2, 3)])
    pair_key = {0: "23", 1: "13", 2: "12"}
    m2 = np.array([g(f"m2:{n}:{pair_key[k]}") for k in range(3)])
    n2 = np.array([np.real(g(f"n2:{n}:{pair_key[k]}")) for k in range(3)])
    a2 = np.array([np.real(g(f"a2:{n}:{pair_key[k]}")) for k in range(3)])
    ii = np.array([np.real(g(f"ii:{pair_key[k]}")) for k in range(3)])
    clm2 = np.array([np.real(g(f"clm2:{pair_key[k]}")) for k in range(3)])
    m3 = complex(g(f"m3:{n}"))

    var_single = 2.0 * (n1 + a1) - 4.0 * np.abs(m1) ** 2
    var_pair = 2.0 * (n2 + a2) - 4.0 * np.abs(m2) ** 2
    delta = m3 - m1 * m2
    cov_cos = 4.0 * np.real(delta)
    cov_sin = 4.0 * np.imag(delta)
    c_single, c_pair = _c_constants(n, i1, ii, clm2)
    return MomentSet(
        n, designation, m1, n1, a1, i1, m2, n2, a2, ii, m3,
        var_single, var_pair, cov_cos, cov_sin, c_single, c_pair,
        n_samples=n_samples, trusted=trusted,
    )


def symmetry_residual(ms: MomentSet) -> float:
    """Largest pairwise disagreement among the three modes' moments."""
    res = 0.0
    for arr in (ms.m1, ms.n1, ms.a1, ms.i1, ms.m2, ms.n2, ms.a2, ms.ii):
        vals = np.asarray(arr)
        for a, b in combinations(range(3), 2):
            res = max(res, abs(vals[a] - vals[b]))
    return res


# ---------------------------------------------------------------------------
# Gains and criteria


def optimal_gains(ms: MomentSet, family: str, orientation: str = "optimal") -> np.ndarray:
    """Optimal gain g_k (= -h_k) per bipartition for a criterion family.

    family: "steering" | "entanglement" | "genuine_entanglement".
    orientation "optimal" rotates the pair quadratures so the covariance
    takes its largest magnitude (margins then invariant under local phases);
    "literal" keeps the bare X/Y covariance.
    """
    gains = np.empty(3)
    for k in range(3):
        cov = -ms.cov_magnitude(k) if orientation == "optimal" else ms.cov_cos[k]
        if family == "steering":
            den = ms.var_pair[k]
        elif family == "entanglement":
            den = ms.var_pair[k] - ms.c_pair[k]
        elif family == "genuine_entanglement":
            den = 3.0 * (ms.var_pair[k] - ms.c_pair[k])
        else:
            raise ValueError(f"unknown criterion family {family!r}")
        if abs(den) > GAIN_DEGENERACY_TOL:
            gains[k] = -cov / den
        else:
            gains[k] = _numeric_gain(ms, k, family, cov)
    return gains


def _numeric_gain(ms: MomentSet, k: int, family: str, cov: float) -> float:
    if family == "steering":
        objective = lambda g: ms.var_single[k] + 2 * g * cov + g ** 2 * ms.var_pair[k]
    elif family == "entanglement":
        objective = lambda g: (ms.var_single[k] + 2 * g * cov
                               + g ** 2 * (ms.var_pair[k] - ms.c_pair[k]))
    else:
        objective = lambda g: (3 * (ms.var_single[k] + 2 * g * cov + g ** 2 * ms.var_pair[k])
                               - 3 * g ** 2 * ms.c_pair[k] - 4 * g * cov)
    res = minimize_scalar(objective, bounds=GAIN_SEARCH_RANGE, method="bounded",
                          options={"xatol": 1e-10})
    return float(res.x)


def variance_sum(ms: MomentSet, k: int, gain: float, orientation: str = "optimal") -> float:
    """S_k^n = Var(U) + Var(V) at gain g (= -h)."""
    cov = -ms.cov_magnitude(k) if orientation == "optimal" else ms.cov_cos[k]
    return float(ms.var_single[k] + 2.0 * gain * cov + gain ** 2 * ms.var_pair[k])


@dataclass
class VarianceCriteria:
    """Variance-route margins; positive margin = bound violated."""

    steering: np.ndarray              # C_k - S_k at steering gains
    entanglement: np.ndarray          # C_k + g^2 C_lm - S_k at entanglement gains
    genuine_steering: float           # min C_k - sum_k S_k
    genuine_entanglement: float | None  # symmetric-mixture bound margin
    gains_steering: np.ndarray
    gains_entanglement: np.ndarray
    gains_genuine: np.ndarray
    variance_sums: np.ndarray         # S_k^n at the steering gains

    @property
    def fully_inseparable_steering(self) -> bool:
        return bool(np.all(self.steering > 0))

    @property
    def fully_inseparable_entanglement(self) -> bool:
        return bool(np.all(self.entanglement > 0))

    @property
    def genuine_steering_flag(self) -> bool:
        return self.genuine_steering > 0

    @property
    def genuine_entanglement_flag(self) -> bool:
        return self.genuine_entanglement is not None and self.genuine_entanglement > 0


def variance_criteria(
    ms: MomentSet, orientation: str = "optimal", symmetric_ok: bool = True,
) -> VarianceCriteria:
    g_s = optimal_gains(ms, "steering", orientation)
    g_e = optimal_gains(ms, "entanglement", orientation)
    g_g = optimal_gains(ms, "genuine_entanglement", orientation)
    s_at_gs = np.array([variance_sum(ms, k, g_s[k], orientation) for k in range(3)])
    s_at_ge = np.array([variance_sum(ms, k, g_e[k], orientation) for k in range(3)])
    steering = ms.c_single - s_at_gs
    entanglement = ms.c_single + g_e ** 2 * ms.c_pair - s_at_ge
    genuine_steering = float(np.min(ms.c_single) - np.sum(s_at_gs))
    genuine_entanglement = None
    if symmetric_ok:
        # symmetric-mixture bound: 3 E_1 >= 3 C_1 + 3 g^2 C_23 + 4 g CovDelta
        k = 0
        cov = -ms.cov_magnitude(k) if orientation == "optimal" else ms.cov_cos[k]
        g = g_g[k]
        lhs = 3.0 * variance_sum(ms, k, g, orientation)
        rhs = 3.0 * ms.c_single[k] + 3.0 * g ** 2 * ms.c_pair[k] + 4.0 * g * cov
        genuine_entanglement = float(rhs - lhs)
    return VarianceCriteria(steering, entanglement, genuine_steering,
                            genuine_entanglement, g_s, g_e, g_g, s_at_gs)


@dataclass
class ClosedFormCriteria:
    """Symmetric-system margins: positive value certifies the property."""

    e_f: float      # fully inseparable entanglement, main-text bound
    e_g: float      # genuine entanglement, main-text bound
    s_f: float      # fully inseparable steering
    s_g: float      # genuine steering
    e_f_appendix: float   # variant with coefficient 2 on |<a_l a_m>|^2
    e_g_appendix: float
    bound_e_f: float
    bound_e_g: float
    bound_s_f: float
    bound_s_g: float


def symmetric_criteria(ms: MomentSet) -> ClosedFormCriteria:
    """Closed-form margins from mode-averaged moments of a symmetric triple."""
    sm = ms.symmetric_mean()
    center = abs(sm["m3"] - sm["m1"] * sm["m2"])
    v1 = max(sm["n1"] - abs(sm["m1"]) ** 2, 0.0)
    v2 = max(sm["n2"] - abs(sm["m2"]) ** 2, 0.0)
    f_e = np.sqrt(v1 * v2)
    g_e = 3.0 * f_e
    pair_term = max(sm["n2"] + sm["a2"] - 2.0 * abs(sm["m2"]) ** 2, 0.0)
    f_s = 0.5 * np.sqrt(pair_term) * np.sqrt(
        max(sm["n1"] + sm["a1"] - 0.5 * sm["c1"] - 2.0 * abs(sm["m1"]) ** 2, 0.0))
    g_s = 0.5 * np.sqrt(pair_term) * np.sqrt(
        max(sm["n1"] + sm["a1"] - sm["c1"] / 6.0 - 2.0 * abs(sm["m1"]) ** 2, 0.0))
    v2_app = max(sm["n2"] - 2.0 * abs(sm["m2"]) ** 2, 0.0)
    f_e_app = np.sqrt(v1 * v2_app)
    return ClosedFormCriteria(
        e_f=center - f_e, e_g=center - g_e, s_f=center - f_s, s_g=center - g_s,
        e_f_appendix=center - f_e_app, e_g_appendix=center - 3.0 * f_e_app,
        bound_e_f=f_e, bound_e_g=g_e, bound_s_f=f_s, bound_s_g=g_s,
    )


@dataclass
class CriteriaReport:
    """Everything the witness CSV carries for one order at one time."""

    n: int
    designation: str
    closed: ClosedFormCriteria | None
    variance: VarianceCriteria
    symmetric_ok: bool
    trusted: bool
    errors: dict = field(default_factory=dict)   # margin name -> MC standard error

    @property
    def fully_inseparable_entanglement(self) -> bool:
        return self.variance.fully_inseparable_entanglement

    @property
    def genuine_entanglement(self) -> bool:
        return self.variance.genuine_entanglement_flag

    @property
    def fully_inseparable_steering(self) -> bool:
        return self.variance.fully_inseparable_steering

    @property
    def genuine_steering(self) -> bool:
        return self.variance.genuine_steering_flag


def criteria_report(
    ms: MomentSet,
    symmetry_sigma: float = 3.0,
    symmetry_atol: float = 1e-9,
    moment_se: float | None = None,
) -> CriteriaReport:
    """Evaluate both criterion routes on one moment set.

    Symmetry is validated by pairwise moment agreement; the tolerance is
    ``symmetry_sigma`` times the supplied moment standard error (or the
    absolute floor for exact sources).  If it fails, the closed forms and the
    symmetric genuine-entanglement bound are skipped.
    """
    tol = symmetry_atol if not moment_se else max(symmetry_sigma * moment_se, symmetry_atol)
    symmetric_ok = symmetry_residual(ms) <= tol
    var = variance_criteria(ms, symmetric_ok=symmetric_ok)
    closed = symmetric_criteria(ms) if symmetric_ok else None
    return CriteriaReport(ms.n, ms.designation, closed, var, symmetric_ok, ms.trusted)
