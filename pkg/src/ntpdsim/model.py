"""Generators of the triple-photon downconversion cascade.

Builds the nonlinear three-mode interaction, the unidirectional exchange
coupling to the virtual output cavities, the collective jump operators, and
the non-Hermitian effective Hamiltonian used by the jump unraveling.  Mode
convention: cavity modes occupy layout slots 0..2, virtual modes 3..5.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .fock import LayoutError, ModeLayout, SparseOperator, identity_op, make_ladder

N_CHANNELS = 3


@dataclass(frozen=True)
class ModelParams:
    """Physical rates of the downconversion cascade, in units where g sets the clock."""

    g: float = 1.0
    theta: float = np.pi / 2
    gammas: tuple[float, float, float] = (0.0, 0.0, 0.0)
    include_virtual: bool = False

    def __post_init__(self):
        object.__setattr__(self, "gammas", tuple(float(x) for x in self.gammas))
        if self.g < 0:
            raise ValueError("interaction strength g must be nonnegative")
        if len(self.gammas) != N_CHANNELS or any(x < 0 for x in self.gammas):
            raise ValueError("need three nonnegative cavity decay rates")


def cascade_layout(d_cavity: int, d_virtual: int | None = None) -> ModeLayout:
    """Layout (cavity 1..3[, virtual 1..3]) with uniform truncations."""
    dims = (d_cavity,) * N_CHANNELS
    if d_virtual is not None:
        dims = dims + (d_virtual,) * N_CHANNELS
    return ModeLayout(dims)


def _check_cascade_layout(params: ModelParams, layout: ModeLayout):
    need = 2 * N_CHANNELS if params.include_virtual else N_CHANNELS
    if layout.n_modes != need:
        raise LayoutError(
            f"layout has {layout.n_modes} modes, model needs {need} "
            f"(include_virtual={params.include_virtual})"
        )


def triple_photon_hamiltonian(params: ModelParams, layout: ModeLayout) -> SparseOperator:
    """g (e^{i theta} b1 b2 b3 + h.c.), the classical-pump downconversion term."""
    if layout.n_modes < N_CHANNELS:
        raise LayoutError("need at least three cavity modes")
    b = [make_ladder(layout, k, "lower") for k in range(N_CHANNELS)]
    triple = b[0] @ b[1] @ b[2]
    term = (params.g * np.exp(1j * params.theta)) * triple
    return term + term.dag()


def exchange_hamiltonian(
    params: ModelParams, layout: ModeLayout, g_mu: Sequence[complex]
) -> SparseOperator:
    """(i/2) sum_k (sqrt(gamma_k) g_mu_k^* b_k^dag b_mu_k - h.c.)."""
    _check_cascade_layout(params, layout)
    if not params.include_virtual:
        raise LayoutError("exchange coupling requires virtual modes")
    total = SparseOperator(layout, sp.csr_matrix((layout.total_dim, layout.total_dim)))
    for k in range(N_CHANNELS):
        bk_dag = make_ladder(layout, k, "raise")
        bmu = make_ladder(layout, N_CHANNELS + k, "lower")
        term = (0.5j * np.sqrt(params.gammas[k]) * np.conjugate(g_mu[k])) * (bk_dag @ bmu)
        total = total + term + term.dag()
    return total


def jump_operators(
    params: ModelParams, layout: ModeLayout, g_mu: Sequence[complex] | None = None
) -> list[SparseOperator]:
    """Collective jump operators J_k = sqrt(gamma_k) b_k + g_mu_k^* b_mu_k."""
    _check_cascade_layout(params, layout)
    if g_mu is None:
        g_mu = (0.0,) * N_CHANNELS
    ops = []
    for k in range(N_CHANNELS):
        j = np.sqrt(params.gammas[k]) * make_ladder(layout, k, "lower")
        if params.include_virtual:
            j = j + np.conjugate(g_mu[k]) * make_ladder(layout, N_CHANNELS + k, "lower")
        ops.append(j)
    return ops


class GeneratorSet:
    """Precomputed pieces of the cascade generators, reusable at any time.

    The factory methods are pure in t: the same time (through the same
    coupling schedules) yields identical operators, so workers can evaluate
    them independently.  The heavy trajectory path never assembles the full
    effective Hamiltonian; it applies the fixed pieces with time-dependent
    scalar weights.
    """

    def __init__(
        self,
        params: ModelParams,
        layout: ModeLayout,
        schedules: Sequence[Callable[[float], complex]] | None = None,
    ):
        _check_cascade_layout(params, layout)
        if params.include_virtual and schedules is None:
            raise ValueError("virtual modes require coupling schedules")
        self.params = params
        self.layout = layout
        self.schedules = list(schedules) if schedules is not None else None

        self.h_sys = triple_photon_hamiltonian(params, layout)
        self._h_sys_csr = self.h_sys.mat

        # gamma_k * n_k summed into one static decay diagonal
        decay = np.zeros(layout.total_dim)
        for k in range(N_CHANNELS):
            decay += params.gammas[k] * layout.occupations(k)
        self._decay_diag = decay

        self._b_cav = [make_ladder(layout, k, "lower").mat for k in range(N_CHANNELS)]
        if params.include_virtual:
            self._virt_number = [
                layout.occupations(N_CHANNELS + k).astype(float) for k in range(N_CHANNELS)
            ]
            self._b_virt = [
                make_ladder(layout, N_CHANNELS + k, "lower").mat for k in range(N_CHANNELS)
            ]
            # b_mu_k^dag b_k drives the virtual cavity from the master cavity;
            # the reverse term cancels in H_eff for a unidirectional cascade.
            self._cross = [
                (make_ladder(layout, N_CHANNELS + k, "raise")
                 @ make_ladder(layout, k, "lower")).mat
                for k in range(N_CHANNELS)
            ]
        else:
            self._virt_number = []
            self._b_virt = []
            self._cross = []

        dc = [layout.dims[k] - 1 for k in range(N_CHANNELS)]
        self._hs_bound = 2.0 * params.g * float(np.sqrt(np.prod(dc)))
        self._sqrt_dc = [np.sqrt(d) for d in dc]
        if params.include_virtual:
            self._sqrt_dv = [np.sqrt(layout.dims[N_CHANNELS + k] - 1) for k in range(N_CHANNELS)]
        else:
            self._sqrt_dv = [0.0] * N_CHANNELS

    # -- time sampling -----------------------------------------------------

    def g_mu_at(self, t: float) -> np.ndarray:
        if self.schedules is None:
            return np.zeros(N_CHANNELS, dtype=np.complex128)
        return np.array(
            [0.0 if s is None else s(t) for s in self.schedules], dtype=np.complex128
        )

    # -- assembled operators (tests, master-equation path) ------------------

    def exchange(self, g_mu: Sequence[complex]) -> SparseOperator:
        return exchange_hamiltonian(self.params, self.layout, g_mu)

    def jumps(self, g_mu: Sequence[complex] | None = None) -> list[SparseOperator]:
        return jump_operators(self.params, self.layout, g_mu)

    def effective_hamiltonian(self, g_mu: Sequence[complex] | None = None) -> SparseOperator:
        """H_s + H_ex - (i/2) sum J_k^dag J_k, assembled explicitly."""
        if g_mu is None:
            g_mu = self.g_mu_at(0.0)
        h = self.h_sys
        if self.params.include_virtual:
            h = h + self.exchange(g_mu)
        for k, j in enumerate(self.jumps(g_mu if self.params.include_virtual else None)):
            h = h + (-0.5j) * (j.dag() @ j)
        return h

    def master_pieces(self, g_mu: Sequence[complex] | None = None):
        """(A, [J_k]) with A = -i(H_s + H_ex) - 1/2 sum J^dag J, as csr matrices.

        Assembled from the cached static pieces, cheap enough to rebuild at
        every right-hand-side evaluation of a time-dependent master run.
        """
        if g_mu is None:
            g_mu = self.g_mu_at(0.0)
        a = -1j * self._h_sys_csr - 0.5 * sp.diags(self._decay_diag)
        jump_mats = []
        for k in range(N_CHANNELS):
            sg = np.sqrt(self.params.gammas[k])
            jm = sg * self._b_cav[k]
            if self.params.include_virtual:
                g = complex(g_mu[k])
                if g != 0.0:
                    jm = jm + np.conjugate(g) * self._b_virt[k]
                    # H_ex cross terms and the J^dag J cross terms merge into
                    # a single unidirectional drive term, as in H_eff
                    a = a - sg * g * self._cross[k]
                    a = a - 0.5 * abs(g) ** 2 * sp.diags(self._virt_number[k])
            jump_mats.append(jm)
        return sp.csr_matrix(a), jump_mats

    # -- fast application (trajectory path) ---------------------------------

    def decay_diagonal(self, g_mu: np.ndarray) -> np.ndarray:
        """Diagonal of sum_k J_k^dag J_k for frozen coupling values."""
        d = self._decay_diag.copy()
        for k in range(len(self._virt_number)):
            w = abs(g_mu[k]) ** 2
            if w:
                d += w * self._virt_number[k]
        return d

    def schroedinger_rhs(self, psi, g_mu: np.ndarray, decay_diag: np.ndarray | None = None):
        """-i H_eff psi for a state column or a (dim, batch) block."""
        if decay_diag is None:
            decay_diag = self.decay_diagonal(g_mu)
        out = -1j * (self._h_sys_csr @ psi)
        if psi.ndim == 2:
            out -= 0.5 * decay_diag[:, None] * psi
        else:
            out -= 0.5 * decay_diag * psi
        for k in range(len(self._cross)):
            c = -np.sqrt(self.params.gammas[k]) * g_mu[k]
            if c != 0.0:
                out += c * (self._cross[k] @ psi)
        return out

    def apply_jump(self, k: int, psi: np.ndarray, g_mu: np.ndarray) -> np.ndarray:
        out = np.sqrt(self.params.gammas[k]) * (self._b_cav[k] @ psi)
        if self.params.include_virtual:
            c = np.conjugate(g_mu[k])
            if c != 0.0:
                out += c * (self._b_virt[k] @ psi)
        return out

    def jump_weights(self, psi: np.ndarray, g_mu: np.ndarray) -> np.ndarray:
        """<J_k^dag J_k> (unnormalized) per channel for one state column."""
        w = np.empty(N_CHANNELS)
        for k in range(N_CHANNELS):
            jp = self.apply_jump(k, psi, g_mu)
            w[k] = np.real(np.vdot(jp, jp))
        return w

    def stiffness_bound(self, g_mu: np.ndarray) -> float:
        """Cheap upper bound on ||H_eff|| used for substep control."""
        s = self._hs_bound
        for k in range(N_CHANNELS):
            s += 0.5 * (
                np.sqrt(self.params.gammas[k]) * self._sqrt_dc[k]
                + abs(g_mu[k]) * self._sqrt_dv[k]
            ) ** 2
        return s
