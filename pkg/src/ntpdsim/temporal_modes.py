"""Dominant temporal modes of the output field and virtual-cavity couplings.

The discretized coherence kernel is turned into a quadrature-weighted
Hermitian eigenproblem; the eigenvector of the largest eigenvalue is the most
populated output wavepacket and its eigenvalue the photon number it carries.
Composite Simpson weights (with a 3/8 tail when the interval count is odd)
keep the occupation of a smooth kernel accurate to ~1e-8 on a few hundred
grid points, which trapezoid weights cannot reach.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_simpson

from .trajectories import CorrelationKernel

DEFAULT_ONSET_EPS = 1e-6
DEFAULT_G_CAP = 50.0     # in units sqrt(g); finite stand-in for the t->0 divergence


def quad_weights(n: int, dt: float) -> np.ndarray:
    """Composite Simpson weights on a uniform grid of n points."""
    if n < 2:
        raise ValueError("need at least two grid points")
    if n == 2:
        return np.array([0.5, 0.5]) * dt
    w = np.zeros(n)
    intervals = n - 1
    if intervals % 2 == 0:
        w[0] = w[-1] = 1.0
        w[1:-1:2] = 4.0
        w[2:-1:2] = 2.0
        w *= dt / 3.0
    elif intervals == 3:
        w[:] = np.array([1.0, 3.0, 3.0, 1.0]) * 3.0 * dt / 8.0
    else:
        head = quad_weights(n - 3, dt)
        w[: n - 3] += head
        w[n - 4:] += np.array([1.0, 3.0, 3.0, 1.0]) * 3.0 * dt / 8.0
    return w


@dataclass
class TemporalMode:
    """Normalized output wavepacket and the photon number it carries."""

    times: np.ndarray
    samples: np.ndarray        # complex mu(t_i); sum w_i |mu|^2 = 1
    occupation: float
    mode: int

    def normalization_residual(self) -> float:
        dt = self.times[1] - self.times[0]
        w = quad_weights(len(self.times), dt)
        return abs(float(np.dot(w, np.abs(self.samples) ** 2)) - 1.0)


@dataclass
class CouplingSchedule:
    """Virtual-cavity coupling g_mu(t).

    Mode-filter schedules keep the smooth ingredients (wavepacket samples and
    cumulative norm) and apply the defining ratio at query time, so the
    near-divergence at small t is reproduced between grid points instead of
    being linearly interpolated away; constant schedules are exact.
    """

    times: np.ndarray
    values: np.ndarray                    # sampled values (export, plots)
    g_cap: float | None = None
    onset_eps: float | None = None
    is_constant: bool = False
    mu: np.ndarray | None = None          # wavepacket samples for the ratio form
    cum: np.ndarray | None = None         # cumulative norm of mu

    def __call__(self, t: float) -> complex:
        if self.is_constant:
            return complex(self.values[0])
        if self.mu is not None:
            c = float(np.interp(t, self.times, self.cum))
            if c < self.onset_eps:
                return 0.0
            m = complex(np.interp(t, self.times, self.mu.real)
                        + 1j * np.interp(t, self.times, self.mu.imag))
            g = -np.conjugate(m) / np.sqrt(c)
            if abs(g) > self.g_cap:
                g *= self.g_cap / abs(g)
            return g
        return complex(
            np.interp(t, self.times, self.values.real)
            + 1j * np.interp(t, self.times, self.values.imag)
        )

    def clamped_fraction(self) -> float:
        if self.g_cap is None:
            return 0.0
        return float(np.mean(np.abs(self.values) >= self.g_cap * (1.0 - 1e-12)))


def mode_decomposition(kernel: CorrelationKernel):
    """All (occupation, mode) pairs of the discretized kernel, descending."""
    times = kernel.times
    dt = times[1] - times[0]
    w = quad_weights(len(times), dt)
    sw = np.sqrt(w)
    sym = sw[:, None] * kernel.matrix * sw[None, :]
    sym = 0.5 * (sym + sym.conj().T)
    vals, vecs = np.linalg.eigh(sym)
    order = np.argsort(vals)[::-1]
    occupations = vals[order]
    modes = []
    for r, idx in enumerate(order):
        mu = vecs[:, idx] / sw
        peak = int(np.argmax(np.abs(mu)))
        phase = mu[peak]
        if abs(phase) > 0:
            mu = mu * (abs(phase) / phase)
        modes.append(TemporalMode(times, mu, float(occupations[r]), kernel.mode))
    return occupations, modes


def most_populated_mode(kernel: CorrelationKernel) -> TemporalMode:
    """Largest-occupation eigenmode; global phase fixed at the peak sample."""
    occupations, modes = mode_decomposition(kernel)
    if occupations[0] < 1e-12:
        raise ValueError("vacuum output, no dominant mode")
    return modes[0]


def coupling_from_mode(
    mode: TemporalMode,
    g_cap: float = DEFAULT_G_CAP,
    onset_eps: float = DEFAULT_ONSET_EPS,
) -> CouplingSchedule:
    """g_mu(t) = -mu^*(t)/sqrt(int_0^t |mu|^2), regularized near t = 0.

    The coupling is held at zero while the cumulative norm is below
    ``onset_eps`` and its magnitude is clamped to ``g_cap``; both knobs only
    matter in the initial window where the exact expression diverges.
    """
    times = mode.times
    dt = times[1] - times[0]
    cum = cumulative_simpson(np.abs(mode.samples) ** 2, dx=dt, initial=0.0)
    values = np.zeros(len(times), dtype=np.complex128)
    live = cum >= onset_eps
    values[live] = -np.conjugate(mode.samples[live]) / np.sqrt(cum[live])
    mag = np.abs(values)
    over = mag > g_cap
    values[over] *= g_cap / mag[over]
    return CouplingSchedule(times, values, g_cap=g_cap, onset_eps=onset_eps,
                            mu=mode.samples, cum=cum)


def constant_coupling(g_mu_value: float, grid: np.ndarray) -> CouplingSchedule:
    """Constant filter coupling, i.e. a Lorentzian virtual cavity sqrt(gamma_mu)."""
    if g_mu_value <= 0:
        raise ValueError("constant coupling must be positive")
    values = np.full(len(grid), complex(g_mu_value))
    return CouplingSchedule(np.asarray(grid, dtype=float), values, is_constant=True)


# ---------------------------------------------------------------------------
# Cache files: kernel and mode CSVs with JSON sidecars


def save_kernel(path, kernel: CorrelationKernel, extra: dict | None = None):
    n = len(kernel.times)
    with open(path, "w") as fh:
        fh.write("# kernel-cache schema v1: i, j, re, im\n")
        for i in range(n):
            for j in range(n):
                v = kernel.matrix[i, j]
                fh.write(f"{i},{j},{v.real:.17g},{v.imag:.17g}\n")
    side = {
        "schema": "kernel-cache v1",
        "mode": kernel.mode,
        "gamma": kernel.gamma,
        "t0": float(kernel.times[0]),
        "dt": float(kernel.times[1] - kernel.times[0]),
        "points": n,
    }
    side.update(extra or {})
    with open(str(path) + ".json", "w") as fh:
        json.dump(side, fh, indent=1, sort_keys=True)


def load_kernel(path) -> CorrelationKernel:
    with open(str(path) + ".json") as fh:
        side = json.load(fh)
    n = side["points"]
    mat = np.zeros((n, n), dtype=np.complex128)
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                continue
            i, j, re, im = line.strip().split(",")
            mat[int(i), int(j)] = float(re) + 1j * float(im)
    times = side["t0"] + side["dt"] * np.arange(n)
    return CorrelationKernel(times, mat, side["mode"], side["gamma"])


def save_mode(path, mode: TemporalMode, extra: dict | None = None):
    with open(path, "w") as fh:
        fh.write("# temporal-mode schema v1: t, re_mu, im_mu\n")
        for t, v in zip(mode.times, mode.samples):
            fh.write(f"{t:.17g},{v.real:.17g},{v.imag:.17g}\n")
    side = {
        "schema": "temporal-mode v1",
        "mode": mode.mode,
        "occupation": mode.occupation,
        "t0": float(mode.times[0]),
        "dt": float(mode.times[1] - mode.times[0]),
        "points": len(mode.times),
    }
    side.update(extra or {})
    with open(str(path) + ".json", "w") as fh:
        json.dump(side, fh, indent=1, sort_keys=True)


def load_mode(path) -> TemporalMode:
    with open(str(path) + ".json") as fh:
        side = json.load(fh)
    rows = np.loadtxt(path, delimiter=",", comments="#")
    times = rows[:, 0]
    samples = rows[:, 1] + 1j * rows[:, 2]
    return TemporalMode(times, samples, side["occupation"], side["mode"])
