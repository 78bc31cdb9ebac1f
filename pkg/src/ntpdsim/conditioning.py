"""Homodyne-conditioned state preparation, Wigner functions, negativity, purity.

Conventions (recorded in every WignerGrid): the homodyne projector uses the
position-basis Fock wavefunction <x|n> = pi^(-1/4) (2^n n!)^(-1/2)
exp(-x^2/2) H_n(x); the Wigner function is the displaced-parity form
W(alpha) = (2/pi) Tr[rho D(2 alpha) Pi] over alpha = x + i p, normalized so
its integral over the alpha plane is one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .fock import DensityOperator, ModeLayout

WIGNER_CONVENTION = "displaced-parity; int W d^2alpha = 1; alpha = x + i p"
NEGLIGIBLE_DENSITY_REL = 1e-14
WIGNER_NORM_TOL = 1e-3


@dataclass
class QuadratureProjector:
    """Homodyne outcome projector |x><x| restricted to the truncated basis."""

    x: float
    dim: int
    amplitudes: np.ndarray    # <x|n>, real

    @classmethod
    def at(cls, x: float, dim: int) -> "QuadratureProjector":
        return cls(float(x), int(dim), quadrature_wavefunction(x, dim))


def quadrature_wavefunction(x: float, dim: int) -> np.ndarray:
    """<x|n> for n < dim via the normalized Hermite recurrence (stable)."""
    v = np.empty(dim)
    v[0] = np.pi ** -0.25 * np.exp(-0.5 * x * x)
    if dim > 1:
        v[1] = np.sqrt(2.0) * x * v[0]
    for n in range(1, dim - 1):
        v[n + 1] = x * np.sqrt(2.0 / (n + 1)) * v[n] - np.sqrt(n / (n + 1.0)) * v[n - 1]
    return v


def condition_on_homodyne(rho3: DensityOperator, x1: float, x2: float):
    """Project modes 1 and 2 of a three-mode state on homodyne outcomes.

    Returns (conditioned single-mode DensityOperator, success_weight); the
    weight is the unnormalized trace, a probability density over (x1, x2).
    An outcome whose density is negligible relative to the largest weight any
    state could put there raises ValueError.
    """
    if rho3.layout.n_modes != 3:
        raise ValueError("conditioning expects a three-mode density operator")
    d1, d2, d3 = rho3.layout.dims
    v1 = quadrature_wavefunction(x1, d1)
    v2 = quadrature_wavefunction(x2, d2)
    t = rho3.matrix.reshape(d1, d2, d3, d1, d2, d3)
    unnorm = np.einsum("a,b,abcdef,d,e->cf", v1, v2, t, v1, v2)
    weight = float(np.real(np.trace(unnorm)))
    scale = float(np.max(v1 ** 2) * np.max(v2 ** 2))
    if weight < NEGLIGIBLE_DENSITY_REL * scale:
        raise ValueError(
            f"outcome (x1={x1}, x2={x2}) has negligible density {weight:.3e}"
        )
    rho_c = unnorm / weight
    rho_c = 0.5 * (rho_c + rho_c.conj().T)
    out = DensityOperator(ModeLayout((d3,)), rho_c, validate=False)
    out.validate(strict=True)
    return out, weight


# ---------------------------------------------------------------------------
# Wigner function


@dataclass
class WignerGrid:
    xs: np.ndarray
    ps: np.ndarray
    values: np.ndarray          # values[i, j] = W(xs[i] + 1j * ps[j])
    convention: str
    norm_residual: float

    @property
    def dx(self) -> float:
        return float(self.xs[1] - self.xs[0])

    @property
    def dp(self) -> float:
        return float(self.ps[1] - self.ps[0])

    def integral(self) -> float:
        return float(self.values.sum() * self.dx * self.dp)


def _displacement_factors(betas: np.ndarray, dim: int):
    """Vectorized <m|D(beta)|n> for an array of displacements."""
    b2 = np.abs(betas) ** 2
    pref = np.exp(-0.5 * b2)
    elems = np.empty((dim, dim) + betas.shape, dtype=np.complex128)
    for m in range(dim):
        for n in range(dim):
            k, diff = min(m, n), abs(m - n)
            acc = np.zeros(betas.shape)
            lognorm = 0.5 * (gammaln(m + 1) + gammaln(n + 1))
            for j in range(k + 1):
                c = np.exp(lognorm - gammaln(j + 1) - gammaln(diff + j + 1)
                           - gammaln(k - j + 1))
                acc = acc + ((-1.0) ** j) * c * b2 ** j
            if m >= n:
                elems[m, n] = pref * betas ** diff * acc
            else:
                elems[m, n] = pref * (-np.conjugate(betas)) ** diff * acc
    return elems


def wigner(rho: DensityOperator, points: int = 256, extent: float = 5.0,
           auto_extend: bool = False) -> WignerGrid:
    """Displaced-parity Wigner function of a single-mode state on a square grid.

    Raises if the state is not confined to the grid (integral deviates from 1
    beyond 1e-3) unless auto_extend is set, in which case the extent grows
    until the normalization check passes.
    """
    if rho.layout.n_modes != 1:
        raise ValueError("wigner expects a single-mode density operator")
    dim = rho.layout.dims[0]
    ext = float(extent)
    for _ in range(6):
        xs = np.linspace(-ext, ext, points)
        ps = np.linspace(-ext, ext, points)
        alpha = xs[:, None] + 1j * ps[None, :]
        d2 = _displacement_factors(2.0 * alpha, dim)
        parity = (-1.0) ** np.arange(dim)
        w = np.einsum("m,mn,nmij->ij", parity, rho.matrix, d2)
        w = np.real(w) * (2.0 / np.pi)
        grid = WignerGrid(xs, ps, w, WIGNER_CONVENTION, 0.0)
        resid = abs(grid.integral() - 1.0)
        grid.norm_residual = resid
        if resid <= WIGNER_NORM_TOL:
            return grid
        if not auto_extend:
            raise ValueError(
                f"Wigner normalization off by {resid:.3e}: grid extent {ext} too "
                f"small, try extent >= {1.5 * ext:.1f}"
            )
        ext *= 1.5
    raise ValueError("Wigner grid auto-extension failed to confine the state")


def wigner_via_characteristic(rho: DensityOperator, alphas: np.ndarray,
                              xi_extent: float = 7.0, xi_points: int = 141) -> np.ndarray:
    """Fourier transform of the characteristic function (slow test oracle).

    W(alpha) = pi^-2 int chi(xi) exp(alpha xi* - alpha* xi) d^2 xi with
    chi(xi) = Tr[rho D(xi)].
    """
    dim = rho.layout.dims[0]
    u = np.linspace(-xi_extent, xi_extent, xi_points)
    du = u[1] - u[0]
    xi = u[:, None] + 1j * u[None, :]
    d_elems = _displacement_factors(xi, dim)
    chi = np.einsum("mn,nmij->ij", rho.matrix, d_elems)
    out = np.empty(len(alphas))
    for i, a in enumerate(np.asarray(alphas, dtype=complex)):
        phase = np.exp(a * np.conjugate(xi) - np.conjugate(a) * xi)
        out[i] = np.real(np.sum(chi * phase)) * du * du / np.pi ** 2
    return out


def negativity(grid: WignerGrid) -> float:
    """Integrated negative volume: int (|W| - W) over the grid."""
    w = grid.values
    return float(np.sum(np.abs(w) - w) * grid.dx * grid.dp)


def purity(rho: DensityOperator) -> float:
    """Tr[rho^2]."""
    return float(np.real(np.einsum("ij,ji->", rho.matrix, rho.matrix)))
