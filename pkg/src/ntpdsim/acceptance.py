"""Desk-scale verification suites behind the ``verify`` CLI verb.

Each suite runs a handful of fast, fully deterministic checks with analytic
or cross-validated expectations and returns machine-readable results; check
failures are report content, not exceptions.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .conditioning import condition_on_homodyne, negativity, wigner
from .fock import (
    DensityOperator,
    DiagonalObservable,
    ModeLayout,
    StateVector,
    coherent_state,
    fock_state,
    vacuum_state,
    lowering_monomial,
)
from .model import GeneratorSet, ModelParams, cascade_layout
from .temporal_modes import constant_coupling
from .trajectories import integrate_master, run_ensemble, uniform_grid
from .witnesses import accumulate_moments, criteria_report


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    measured: float
    expected: float
    tolerance: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"[{status}] {self.suite}/{self.name}: measured {self.measured:.6g}, "
                f"expected {self.expected:.6g} (tol {self.tolerance:.3g})")


def _frac_within_3se(est, ms, names):
    """Worst-observable fraction of points within 3 standard errors.

    The error floor of one trajectory's weight (1/n) keeps the comparison
    meaningful at early times, where the jumped sector holds less than one
    expected trajectory and the sample standard error is itself unreliable.
    """
    floor = 1.0 / est.n_traj
    worst = 1.0
    for name in names:
        dev = np.abs(est.mean(name) - ms.values[name])
        se = np.maximum(est.stderr(name), floor)
        worst = min(worst, float(np.mean(dev <= 3.0 * se)))
    return worst


def oracle_suite(n_traj: int = 800, seed: int = 2024) -> list:
    """Trajectory ensembles against master-equation integration, small dims."""
    out = []
    # (a) three-mode downconversion, d = 3
    params = ModelParams(g=1.0, theta=np.pi / 2, gammas=(1.0, 1.0, 1.0))
    lay = cascade_layout(3)
    gens = GeneratorSet(params, lay)
    grid = uniform_grid(3.0, 0.005)
    obs = {
        "i1": DiagonalObservable(lay, lay.occupations(0).astype(float)),
        "m3": lowering_monomial(lay, {0: 1, 1: 1, 2: 1}),
    }
    res = run_ensemble(vacuum_state(lay), gens, grid, obs, seed, n_traj,
                       sample_stride=40, batch_size=64)
    ms = integrate_master(vacuum_state(lay).density_operator(), gens, grid,
                          observables=obs, sample_stride=40)
    frac = _frac_within_3se(res.estimate(), ms, ["i1", "m3"])
    out.append(CheckResult("oracle", "ntpd_d3_within_3se", frac >= 0.99, frac, 1.0, 0.01))

    # (b) full cascade at d = 2, constant coupling
    params2 = ModelParams(g=1.0, theta=np.pi / 2, gammas=(2.0, 2.0, 2.0),
                          include_virtual=True)
    lay2 = cascade_layout(2, 2)
    grid2 = uniform_grid(2.0, 0.005)
    sched = constant_coupling(1.2, grid2)
    gens2 = GeneratorSet(params2, lay2, schedules=[sched] * 3)
    obs2 = {
        "i1": DiagonalObservable(lay2, lay2.occupations(0).astype(float)),
        "imu1": DiagonalObservable(lay2, lay2.occupations(3).astype(float)),
        "m3mu": lowering_monomial(lay2, {3: 1, 4: 1, 5: 1}),
    }
    res2 = run_ensemble(vacuum_state(lay2), gens2, grid2, obs2, seed + 1, n_traj,
                        sample_stride=40, batch_size=64)
    ms2 = integrate_master(vacuum_state(lay2).density_operator(), gens2, grid2,
                           observables=obs2, sample_stride=40)
    frac2 = _frac_within_3se(res2.estimate(), ms2, ["i1", "imu1", "m3mu"])
    out.append(CheckResult("oracle", "cascade_d2_within_3se", frac2 >= 0.99, frac2, 1.0, 0.01))

    # (c) exponential waiting-time law for a single decaying photon
    params3 = ModelParams(g=0.0, gammas=(1.0, 0.0, 0.0))
    lay3 = cascade_layout(2)
    gens3 = GeneratorSet(params3, lay3)
    grid3 = uniform_grid(8.0, 0.01)
    res3 = run_ensemble(fock_state(lay3, (1, 0, 0)), gens3, grid3, {}, seed + 2,
                        max(n_traj, 400), sample_stride=len(grid3) - 1, batch_size=100)
    jt = np.array([r.jump_events[0][0] for r in res3.records if r.jump_events])
    t_cut = 8.0
    expected_mean = (1.0 - (1.0 + t_cut) * np.exp(-t_cut)) / (1.0 - np.exp(-t_cut))
    se = jt.std(ddof=1) / np.sqrt(len(jt))
    dev = abs(jt.mean() - expected_mean)
    out.append(CheckResult("oracle", "waiting_time_mean", dev <= 3 * se,
                           float(jt.mean()), expected_mean, float(3 * se)))
    return out


def _random_symmetric_state(rng, layout: ModeLayout, support: int = 4) -> StateVector:
    t = rng.normal(size=(support,) * 3) + 1j * rng.normal(size=(support,) * 3)
    sym = np.zeros_like(t)
    for p in itertools.permutations((0, 1, 2)):
        sym += np.transpose(t, p)
    full = np.zeros(layout.dims, dtype=complex)
    full[:support, :support, :support] = sym
    psi = full.ravel()
    return StateVector(layout, psi / np.linalg.norm(psi))


def witness_suite(n_states: int = 200, seed: int = 77) -> list:
    """Closed-form vs variance-route agreement and separable soundness."""
    out = []
    rng = np.random.default_rng(seed)
    lay = ModeLayout((8, 8, 8))
    agree = checked = 0
    for _ in range(n_states):
        st = _random_symmetric_state(rng, lay)
        n = int(rng.integers(1, 3))
        rep = criteria_report(accumulate_moments(st, (0, 1, 2), n),
                              symmetry_atol=1e-8)
        if rep.closed is not None and abs(rep.closed.e_g) > 1e-9:
            checked += 1
            agree += int((rep.closed.e_g > 0) == rep.genuine_entanglement)
    out.append(CheckResult("witness", "genuine_sign_agreement",
                           agree == checked, agree, checked, 0))

    false_pos = 0
    worst = -np.inf
    for trial in range(n_states):
        n = int(rng.integers(1, 3))
        if trial % 2 == 0:
            src = coherent_state(lay, rng.normal(scale=0.6, size=3)
                                 + 1j * rng.normal(scale=0.6, size=3))
        else:
            rho = np.zeros((lay.total_dim,) * 2, dtype=complex)
            for w in rng.dirichlet(np.ones(3)):
                st = coherent_state(lay, rng.normal(scale=0.5, size=3)
                                    + 1j * rng.normal(scale=0.5, size=3))
                rho += w * np.outer(st.amplitudes, st.amplitudes.conj())
            src = DensityOperator(lay, rho / np.real(np.trace(rho)), validate=False)
        rep = criteria_report(accumulate_moments(src, (0, 1, 2), n),
                              symmetry_atol=np.inf)
        margins = [*rep.variance.steering, *rep.variance.entanglement,
                   rep.variance.genuine_steering, rep.variance.genuine_entanglement,
                   rep.closed.e_f, rep.closed.e_g, rep.closed.s_f, rep.closed.s_g]
        worst = max(worst, max(margins))
        false_pos += int(max(margins) > 1e-9)
    out.append(CheckResult("witness", "separable_false_positives",
                           false_pos == 0, false_pos, 0, 0))

    # perturbative short-time values from the exact weak-drive state
    gt = 0.1
    lay4 = ModeLayout((4, 4, 4))
    psi = np.zeros(lay4.total_dim, dtype=complex)
    psi[lay4.flat_index((0, 0, 0))] = 1.0
    psi[lay4.flat_index((1, 1, 1))] = -1j * gt * np.exp(-1j * np.pi / 2)
    st = StateVector(lay4, psi)
    st.normalize()
    rep = criteria_report(accumulate_moments(st, (0, 1, 2), 1))
    eg_expect = gt - 3 * gt ** 2
    out.append(CheckResult("witness", "perturbative_e_g",
                           abs(rep.closed.e_g - eg_expect) <= 0.1 * eg_expect,
                           rep.closed.e_g, eg_expect, 0.1 * eg_expect))
    sf_bound = gt / np.sqrt(2.0)
    out.append(CheckResult("witness", "perturbative_steering_bound",
                           abs(rep.closed.bound_s_f - sf_bound) <= 0.1 * sf_bound,
                           rep.closed.bound_s_f, sf_bound, 0.1 * sf_bound))
    out.append(CheckResult("witness", "perturbative_no_genuine_steering",
                           not rep.genuine_steering and rep.fully_inseparable_steering,
                           rep.variance.genuine_steering, -1.0, 0))
    return out


def conditioning_suite() -> list:
    out = []
    lay1 = ModeLayout((6,))
    rho_vac = fock_state(lay1, (0,)).density_operator()
    n_vac = negativity(wigner(rho_vac, points=256, extent=5.0))
    out.append(CheckResult("conditioning", "vacuum_negativity",
                           n_vac < 1e-6, n_vac, 0.0, 1e-6))
    rho1 = fock_state(lay1, (1,)).density_operator()
    n1 = negativity(wigner(rho1, points=256, extent=5.0))
    n1_exact = 2.0 * (2.0 * np.exp(-0.5) - 1.0)
    out.append(CheckResult("conditioning", "single_photon_negativity",
                           abs(n1 - n1_exact) <= 0.01 * n1_exact, n1, n1_exact,
                           0.01 * n1_exact))
    lay3 = ModeLayout((3, 3, 3))
    psi = np.zeros(lay3.total_dim, dtype=complex)
    psi[lay3.flat_index((0, 0, 0))] = np.sqrt(0.7)
    psi[lay3.flat_index((1, 1, 1))] = np.sqrt(0.3)
    rho3 = StateVector(lay3, psi).density_operator()
    rho_c, _ = condition_on_homodyne(rho3, 0.0, 0.0)
    fid = float(np.real(rho_c.matrix[0, 0]))
    out.append(CheckResult("conditioning", "projection_kills_triplet",
                           fid > 1 - 1e-10, fid, 1.0, 1e-10))
    # conditioning far in the tail must produce the photon-dominated state
    rho_c5, _ = condition_on_homodyne(rho3, 5.0, 5.0)
    n5 = negativity(wigner(rho_c5, points=256, extent=5.0))
    out.append(CheckResult("conditioning", "tail_outcome_negative_wigner",
                           n5 > 0.1, n5, 0.4, 0.3))
    return out


SUITES = {
    "oracle": oracle_suite,
    "witness": witness_suite,
    "conditioning": conditioning_suite,
}


def verify(suite: str = "all") -> list:
    if suite == "all":
        results = []
        for fn in SUITES.values():
            results.extend(fn())
        return results
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; pick from {sorted(SUITES)} or 'all'")
    return SUITES[suite]()
