"""Scenario configuration, pipeline orchestration, and result emission.

A scenario file is a strict JSON document (schema 1, unknown keys rejected).
Rates are quoted in units of the downconversion strength g and times in 1/g;
the config's ``g`` therefore only rescales the dissipation relative to the
interaction, which is exactly the knob the interaction-strength sweeps turn.

Pipeline: (optional) intracavity kernel -> dominant output modes -> coupling
schedules -> propagation (unitary / master-equation / trajectory ensemble,
picked by dimension and noise) -> witness series -> optional homodyne
conditioning with a Wigner map.  All artifacts land in one output directory;
``report.json`` is written last and marks a completed run.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass

import numpy as np
from scipy.stats import poisson

from . import __version__
from .conditioning import condition_on_homodyne, negativity, purity, wigner
from .fock import (
    DensityOperator,
    ModeLayout,
    StateVector,
    TOP_LEVEL_TOL,
    coherent_state,
    vacuum_state,
)
from .model import GeneratorSet, ModelParams, N_CHANNELS, cascade_layout
from .temporal_modes import (
    DEFAULT_G_CAP,
    DEFAULT_ONSET_EPS,
    constant_coupling,
    coupling_from_mode,
    most_populated_mode,
    save_kernel,
    save_mode,
    load_kernel,
)
from .trajectories import (
    integrate_master,
    integrate_unitary,
    run_ensemble,
    two_time_correlation,
    uniform_grid,
)
from .witnesses import (
    criteria_report,
    moment_observables,
    moment_set_from_means,
    top_level_observables,
)

SCHEMA_VERSION = 1
MASTER_AUTO_MAX = 1800     # dense-rho route picked automatically up to this dim
OUTPUT_ROOT_ENV = "NTPDSIM_OUT"


class ValidationError(ValueError):
    """Configuration rejected before any compute is spent."""


_ALLOWED = {
    "": {"schema", "name", "model", "truncation", "grid", "ensemble",
         "coupling", "witnesses", "conditioning", "outputs"},
    "model": {"g", "theta", "gammas", "betas", "include_virtual"},
    "truncation": {"d_cavity", "d_virtual"},
    "grid": {"t_max", "dt", "kernel_points", "sample_stride", "reduced_stride"},
    "ensemble": {"n_traj", "master_seed", "n_blocks", "batch_size", "method"},
    "coupling": {"mode", "value", "g_cap", "onset_eps"},
    "witnesses": {"orders", "symmetry_sigma"},
    "conditioning": {"enabled", "x1", "x2", "wigner_points", "wigner_extent"},
    "outputs": {"directory", "formats"},
}


def _reject_unknown(section: str, d: dict):
    extra = set(d) - _ALLOWED[section]
    if extra:
        raise ValidationError(f"unknown key(s) {sorted(extra)} in section '{section or 'root'}'")


def _as_complex(v) -> complex:
    if isinstance(v, (list, tuple)):
        return complex(v[0], v[1])
    return complex(v)


@dataclass
class ScenarioConfig:
    """Validated scenario parameters; round-trips losslessly through JSON."""

    g: float = 1.0
    theta: float = float(np.pi / 2)
    gammas: tuple = (0.0, 0.0, 0.0)
    betas: tuple = (0j, 0j, 0j)
    include_virtual: bool = False
    d_cavity: int = 6
    d_virtual: int = 5
    t_max: float = 3.0
    dt: float = 2e-3
    kernel_points: int = 200
    sample_stride: int = 10
    reduced_stride: int = 4
    n_traj: int = 2000
    master_seed: int = 20240101
    n_blocks: int = 20
    batch_size: int = 64
    method: str = "auto"            # auto | unitary | master | trajectories
    coupling_mode: str = "constant"  # constant | most_populated
    coupling_value: float = 1.5
    g_cap: float = DEFAULT_G_CAP
    onset_eps: float = DEFAULT_ONSET_EPS
    orders: tuple = (1, 2)
    symmetry_sigma: float = 3.0
    conditioning_enabled: bool = False
    x1: float = 5.0
    x2: float = 5.0
    wigner_points: int = 256
    wigner_extent: float = 5.0
    name: str = ""
    out_directory: str = ""
    formats: tuple = ("csv", "json")

    # -- serialization -------------------------------------------------------

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioConfig":
        if doc.get("schema") != SCHEMA_VERSION:
            raise ValidationError(f"unsupported or missing schema (need {SCHEMA_VERSION})")
        _reject_unknown("", doc)
        for sec in ("model", "truncation", "grid", "ensemble", "coupling",
                    "witnesses", "conditioning", "outputs"):
            _reject_unknown(sec, doc.get(sec, {}))
        m = doc.get("model", {})
        t = doc.get("truncation", {})
        gr = doc.get("grid", {})
        en = doc.get("ensemble", {})
        co = doc.get("coupling", {})
        wi = doc.get("witnesses", {})
        cd = doc.get("conditioning", {})
        ou = doc.get("outputs", {})
        cfg = cls(
            g=float(m.get("g", 1.0)),
            theta=float(m.get("theta", np.pi / 2)),
            gammas=tuple(float(x) for x in m.get("gammas", (0.0,) * 3)),
            betas=tuple(_as_complex(x) for x in m.get("betas", (0,) * 3)),
            include_virtual=bool(m.get("include_virtual", False)),
            d_cavity=int(t.get("d_cavity", 6)),
            d_virtual=int(t.get("d_virtual", 5)),
            t_max=float(gr.get("t_max", 3.0)),
            dt=float(gr.get("dt", 2e-3)),
            kernel_points=int(gr.get("kernel_points", 200)),
            sample_stride=int(gr.get("sample_stride", 10)),
            reduced_stride=int(gr.get("reduced_stride", 4)),
            n_traj=int(en.get("n_traj", 2000)),
            master_seed=int(en.get("master_seed", 20240101)),
            n_blocks=int(en.get("n_blocks", 20)),
            batch_size=int(en.get("batch_size", 64)),
            method=str(en.get("method", "auto")),
            coupling_mode=str(co.get("mode", "constant")),
            coupling_value=float(co.get("value", 1.5)),
            g_cap=float(co.get("g_cap", DEFAULT_G_CAP)),
            onset_eps=float(co.get("onset_eps", DEFAULT_ONSET_EPS)),
            orders=tuple(int(n) for n in wi.get("orders", (1, 2))),
            symmetry_sigma=float(wi.get("symmetry_sigma", 3.0)),
            conditioning_enabled=bool(cd.get("enabled", False)),
            x1=float(cd.get("x1", 5.0)),
            x2=float(cd.get("x2", 5.0)),
            wigner_points=int(cd.get("wigner_points", 256)),
            wigner_extent=float(cd.get("wigner_extent", 5.0)),
            name=str(doc.get("name", "")),
            out_directory=str(ou.get("directory", "")),
            formats=tuple(ou.get("formats", ("csv", "json"))),
        )
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "name": self.name,
            "model": {
                "g": self.g, "theta": self.theta, "gammas": list(self.gammas),
                "betas": [[b.real, b.imag] for b in self.betas],
                "include_virtual": self.include_virtual,
            },
            "truncation": {"d_cavity": self.d_cavity, "d_virtual": self.d_virtual},
            "grid": {"t_max": self.t_max, "dt": self.dt,
                     "kernel_points": self.kernel_points,
                     "sample_stride": self.sample_stride,
                     "reduced_stride": self.reduced_stride},
            "ensemble": {"n_traj": self.n_traj, "master_seed": self.master_seed,
                         "n_blocks": self.n_blocks, "batch_size": self.batch_size,
                         "method": self.method},
            "coupling": {"mode": self.coupling_mode, "value": self.coupling_value,
                         "g_cap": self.g_cap, "onset_eps": self.onset_eps},
            "witnesses": {"orders": list(self.orders),
                          "symmetry_sigma": self.symmetry_sigma},
            "conditioning": {"enabled": self.conditioning_enabled,
                             "x1": self.x1, "x2": self.x2,
                             "wigner_points": self.wigner_points,
                             "wigner_extent": self.wigner_extent},
            "outputs": {"directory": self.out_directory, "formats": list(self.formats)},
        }

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    # -- validation ----------------------------------------------------------

    def gammas_internal(self) -> tuple:
        """Dissipation rates in units of g (the internal clock)."""
        if self.g == 0.0:
            return self.gammas
        return tuple(x / self.g for x in self.gammas)

    def validate(self):
        if self.g < 0 or any(x < 0 for x in self.gammas):
            raise ValidationError("rates must be nonnegative")
        if len(self.gammas) != N_CHANNELS or len(self.betas) != N_CHANNELS:
            raise ValidationError("need three gammas and three betas")
        if self.d_cavity < 2 or (self.include_virtual and self.d_virtual < 2):
            raise ValidationError("truncations need at least two levels")
        if self.method not in ("auto", "unitary", "master", "trajectories"):
            raise ValidationError(f"unknown method {self.method!r}")
        if self.coupling_mode not in ("constant", "most_populated"):
            raise ValidationError(f"unknown coupling mode {self.coupling_mode!r}")
        if self.coupling_mode == "constant" and self.include_virtual and self.coupling_value <= 0:
            raise ValidationError("constant coupling must be positive")
        if any(n not in (1, 2) for n in self.orders):
            raise ValidationError("witness orders are restricted to {1, 2}")
        if self.conditioning_enabled and not self.include_virtual:
            raise ValidationError("conditioning requires virtual output modes")
        if self.t_max <= 0 or self.dt <= 0:
            raise ValidationError("grid must have positive extent and step")
        # stability guard on the fixed propagation step; adaptive integrators
        # (master / unitary routes) choose their own steps
        if self.resolved_method() == "trajectories":
            g_mu_sq = 0.0
            if self.include_virtual:
                # mode-matched couplings settle near the cavity linewidth; the
                # brief capped onset window is covered by adaptive substepping
                g_mu_sq = (self.coupling_value ** 2 if self.coupling_mode == "constant"
                           else max(self.gammas_internal()))
            fastest = max(max(self.gammas_internal(), default=0.0), 1.0, g_mu_sq)
            if self.dt >= 0.1 / fastest:
                raise ValidationError(
                    f"dt={self.dt} too coarse for the fastest rate {fastest:g} "
                    f"(need dt < {0.1 / fastest:.3e}); note the most-populated "
                    f"coupling is capped at g_cap={self.g_cap}"
                )
        # truncation-leakage projection for coherent seeds, before any compute
        for beta in self.betas:
            lam = abs(beta) ** 2
            tail = float(poisson.sf(self.d_cavity - 1, lam)) if lam > 0 else 0.0
            if tail > TOP_LEVEL_TOL:
                raise ValidationError(
                    f"coherent amplitude |beta|^2={lam:.3g} leaks {tail:.2e} past "
                    f"d_cavity={self.d_cavity} (policy {TOP_LEVEL_TOL:g})"
                )

    # -- derived objects ------------------------------------------------------

    def layout(self) -> ModeLayout:
        return cascade_layout(self.d_cavity, self.d_virtual if self.include_virtual else None)

    def model_params(self) -> ModelParams:
        # internal clock runs in units of 1/g; a degenerate g = 0 scenario
        # keeps raw rates and simply has no downconversion term
        return ModelParams(
            g=1.0 if self.g > 0 else 0.0, theta=self.theta,
            gammas=self.gammas_internal(), include_virtual=self.include_virtual,
        )

    def initial_state(self, layout: ModeLayout) -> StateVector:
        if self.include_virtual:
            cav = coherent_state(ModeLayout((self.d_cavity,) * 3), self.betas)
            vac = vacuum_state(ModeLayout((self.d_virtual,) * 3))
            amps = np.kron(cav.amplitudes, vac.amplitudes)
            st = StateVector(layout, amps, cav.meta)
            return st
        return coherent_state(layout, self.betas)

    def grid(self) -> np.ndarray:
        return uniform_grid(self.t_max, self.dt)

    def resolved_method(self) -> str:
        if self.method != "auto":
            return self.method
        dim = self.layout().total_dim
        if not self.include_virtual and all(x == 0 for x in self.gammas):
            return "unitary"
        if dim <= MASTER_AUTO_MAX:
            return "master"
        return "trajectories"


# ---------------------------------------------------------------------------
# Witness series assembly


@dataclass
class WitnessSeries:
    """Criteria reports per sampled time for one mode triple and order."""

    designation: str
    n: int
    times: np.ndarray
    reports: list
    errors: dict          # margin name -> array of MC standard errors (or zeros)

    def margin(self, name: str) -> np.ndarray:
        out = np.full(len(self.reports), np.nan)
        for i, r in enumerate(self.reports):
            if name in ("e_f", "e_g", "s_f", "s_g", "e_f_appendix", "e_g_appendix"):
                if r.closed is not None:
                    out[i] = getattr(r.closed, name)
            elif name == "genuine_steering":
                out[i] = r.variance.genuine_steering
            elif name == "genuine_entanglement":
                if r.variance.genuine_entanglement is not None:
                    out[i] = r.variance.genuine_entanglement
        return out


def witness_series(
    times: np.ndarray,
    mean_series: dict,
    err_series: dict,
    prefix: str,
    designation: str,
    n: int,
    n_samples: int,
    trusted_series: np.ndarray,
    block_means: list | None = None,
    symmetry_sigma: float = 3.0,
) -> WitnessSeries:
    """Criteria at every sampled time, with block-resampled margin errors."""
    reports = []
    margin_names = ("e_f", "e_g", "s_f", "s_g", "genuine_steering", "genuine_entanglement")
    moment_keys = [k for k in mean_series if k.startswith(prefix + ":")]
    for i in range(len(times)):
        means = {k: mean_series[k][i] for k in moment_keys}
        ms = moment_set_from_means(means, n, designation, prefix,
                                   n_samples=n_samples, trusted=bool(trusted_series[i]))
        se_scale = None
        if n_samples:
            se_scale = float(max(np.real(err_series[k][i]) for k in moment_keys))
        reports.append(criteria_report(ms, symmetry_sigma=symmetry_sigma,
                                       moment_se=se_scale))
    errors = {m: np.zeros(len(times)) for m in margin_names}
    if block_means:
        block_vals = {m: [] for m in margin_names}
        for bm in block_means:
            reps = []
            for i in range(len(times)):
                means = {k: bm[k][i] for k in moment_keys}
                ms = moment_set_from_means(means, n, designation, prefix, n_samples=1)
                reps.append(criteria_report(ms, symmetry_sigma=np.inf))
            block = WitnessSeries(designation, n, times, reps, {})
            for m in margin_names:
                block_vals[m].append(block.margin(m))
        nb = len(block_means)
        for m in margin_names:
            stack = np.stack(block_vals[m])
            errors[m] = np.nanstd(stack, axis=0, ddof=1) / np.sqrt(nb)
    return WitnessSeries(designation, n, times, reports, errors)


# ---------------------------------------------------------------------------
# Scenario runner


@dataclass
class RunReport:
    config: ScenarioConfig
    out_dir: str
    method: str
    sample_times: np.ndarray
    witness: dict                 # (designation, n) -> WitnessSeries
    photons: dict                 # name -> series
    photon_errors: dict
    purity_times: np.ndarray | None
    purity_series: np.ndarray | None
    leakage: dict                 # per-mode max top-level population
    conditioning: dict | None
    schedules_meta: list
    wall_seconds: float
    n_traj_effective: int

    def summary_dict(self) -> dict:
        doc = {
            "version": __version__,
            "schema": "run-report v1",
            "name": self.config.name,
            "method": self.method,
            "config": self.config.to_dict(),
            "leakage_max_top_level": self.leakage,
            "n_traj": self.n_traj_effective,
            "wall_seconds": self.wall_seconds,
            "files": sorted(os.listdir(self.out_dir)) if os.path.isdir(self.out_dir) else [],
            "conditioning": self.conditioning,
            "schedules": self.schedules_meta,
        }
        return doc


def _fmt(x) -> str:
    if isinstance(x, complex):
        return f"{x.real:.17g}"
    return f"{float(x):.17g}"


def _write_csv(path, header_comment: str, columns: dict):
    names = list(columns)
    n = len(next(iter(columns.values())))
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(f"# {header_comment}\n")
        fh.write(",".join(names) + "\n")
        for i in range(n):
            fh.write(",".join(_fmt(columns[k][i]) for k in names) + "\n")
    os.replace(tmp, path)


def build_schedules(cfg: ScenarioConfig, out_dir: str | None = None, workers: int = 1):
    """Coupling schedules for the three channels, plus cache metadata."""
    grid = cfg.grid()
    if not cfg.include_virtual:
        return None, []
    if cfg.coupling_mode == "constant":
        sched = constant_coupling(cfg.coupling_value, grid)
        return [sched] * N_CHANNELS, [
            {"mode": "constant", "value": cfg.coupling_value} for _ in range(N_CHANNELS)
        ]
    # most-populated mode from the intracavity-only kernel
    cav_layout = ModeLayout((cfg.d_cavity,) * N_CHANNELS)
    params = ModelParams(g=1.0, theta=cfg.theta, gammas=cfg.gammas_internal(),
                         include_virtual=False)
    gens = GeneratorSet(params, cav_layout)
    rho0 = coherent_state(cav_layout, cfg.betas).density_operator()
    kt = np.linspace(0.0, cfg.t_max, cfg.kernel_points)
    symmetric = len(set(cfg.gammas)) == 1 and len(set(cfg.betas)) == 1
    schedules = []
    meta = []
    kernel = None
    for k in range(N_CHANNELS):
        if kernel is None or not symmetric:
            cache = os.path.join(out_dir, f"kernel_mode{k + 1}.csv") if out_dir else None
            if cache and os.path.exists(cache) and os.path.exists(cache + ".json"):
                kernel = load_kernel(cache)
            else:
                kernel = two_time_correlation(rho0, gens, kt, k)
                if cache:
                    save_kernel(cache, kernel)
        mode = most_populated_mode(kernel)
        sched = coupling_from_mode(mode, g_cap=cfg.g_cap, onset_eps=cfg.onset_eps)
        if out_dir:
            save_mode(os.path.join(out_dir, f"temporal_mode{k + 1}.csv"), mode,
                      extra={"gamma": cfg.gammas_internal()[k], "g": 1.0})
        schedules.append(sched)
        meta.append({
            "mode": "most_populated",
            "occupation": mode.occupation,
            "g_cap": cfg.g_cap,
            "onset_eps": cfg.onset_eps,
            "clamped_fraction": sched.clamped_fraction(),
        })
    return schedules, meta


def run_scenario(cfg: ScenarioConfig, out_dir: str | None = None,
                 workers: int = 1) -> RunReport:
    """Execute the full pipeline for one scenario and write its artifacts."""
    cfg.validate()
    t_wall = time.time()
    out_dir = out_dir or cfg.out_directory or os.path.join(
        os.environ.get(OUTPUT_ROOT_ENV, "runs"), cfg.name or "scenario")
    os.makedirs(out_dir, exist_ok=True)

    layout = cfg.layout()
    grid = cfg.grid()
    psi0 = cfg.initial_state(layout)
    schedules, sched_meta = build_schedules(cfg, out_dir=out_dir, workers=workers)
    gens = GeneratorSet(cfg.model_params(), layout, schedules=schedules)

    observables = {}
    triples = [("cav", "cavity", (0, 1, 2))]
    if cfg.include_virtual:
        triples.append(("vir", "virtual", (3, 4, 5)))
    for prefix, _, modes in triples:
        observables.update(moment_observables(layout, modes, cfg.orders, prefix))
    observables.update(top_level_observables(layout))

    method = cfg.resolved_method()
    reduced_keep = (3, 4, 5) if cfg.include_virtual else None
    block_means = None
    n_traj_effective = 0

    if method == "trajectories":
        res = run_ensemble(
            psi0, gens, grid, observables, cfg.master_seed, cfg.n_traj,
            sample_stride=cfg.sample_stride, n_blocks=cfg.n_blocks,
            batch_size=cfg.batch_size, workers=workers,
            reduced_keep=reduced_keep, reduced_stride=cfg.reduced_stride,
            checkpoint_dir=os.path.join(out_dir, "checkpoints"),
        )
        est = res.estimate()
        sample_times = res.sample_times
        mean_series = {k: est.mean(k) for k in observables}
        err_series = {k: est.stderr(k) for k in observables}
        block_means = [
            {k: acc.mean()[:, i] for i, k in enumerate(acc.names)}
            for acc in res.acc_blocks
        ]
        reduced_times, reduced = res.reduced_times, (
            None if res.reduced_mean is None else list(res.reduced_mean))
        final_rho_virtual = None if res.reduced_mean is None else res.reduced_mean[-1]
        n_traj_effective = cfg.n_traj
    else:
        if method == "unitary":
            ms = integrate_unitary(psi0, gens, grid, observables=observables,
                                   sample_stride=cfg.sample_stride,
                                   reduced_keep=reduced_keep,
                                   reduced_stride=cfg.reduced_stride)
        else:
            ms = integrate_master(psi0.density_operator(), gens, grid,
                                  observables=observables,
                                  sample_stride=cfg.sample_stride,
                                  reduced_keep=reduced_keep,
                                  reduced_stride=cfg.reduced_stride)
        sample_times = ms.sample_times
        mean_series = ms.values
        err_series = {k: np.zeros(len(sample_times)) for k in observables}
        reduced_times, reduced = ms.reduced_times, ms.reduced
        final_rho_virtual = None if reduced is None else reduced[-1]

    # truncation bookkeeping: per-mode max of the top-level population
    leakage = {}
    top_series = np.zeros(len(sample_times))
    for m in range(layout.n_modes):
        series = np.real(mean_series[f"toplev:{m}"])
        leakage[f"mode{m}"] = float(series.max())
        top_series = np.maximum(top_series, series)
    trusted_series = top_series < TOP_LEVEL_TOL

    witness = {}
    for prefix, designation, _ in triples:
        for n in cfg.orders:
            witness[(designation, n)] = witness_series(
                sample_times, mean_series, err_series, prefix, designation, n,
                n_traj_effective, trusted_series, block_means=block_means,
                symmetry_sigma=cfg.symmetry_sigma,
            )

    photons = {}
    photon_errors = {}
    for prefix, designation, modes in triples:
        for k_loc in (1, 2, 3):
            name = f"i_{designation}{k_loc}"
            photons[name] = np.real(mean_series[f"{prefix}:i:{k_loc}"])
            photon_errors[name] = np.real(err_series[f"{prefix}:i:{k_loc}"])

    purity_times = purity_series = None
    if reduced is not None:
        purity_times = reduced_times
        purity_series = np.array([
            float(np.real(np.einsum("ij,ji->", r, r))) for r in reduced
        ])

    conditioning = None
    if cfg.conditioning_enabled:
        if final_rho_virtual is None:
            raise ValidationError("conditioning requires virtual modes")
        rho_v = DensityOperator(ModeLayout((cfg.d_virtual,) * 3),
                                np.asarray(final_rho_virtual), validate=False)
        np.save(os.path.join(out_dir, "rho_virtual_final.npy"), rho_v.matrix)
        rho_c, weight = condition_on_homodyne(rho_v, cfg.x1, cfg.x2)
        wg = wigner(rho_c, points=cfg.wigner_points, extent=cfg.wigner_extent,
                    auto_extend=True)
        neg = negativity(wg)
        _write_wigner(os.path.join(out_dir, "wigner.csv"), wg, neg)
        conditioning = {
            "x1": cfg.x1, "x2": cfg.x2,
            "success_weight": weight,
            "negativity": neg,
            "wigner_norm_residual": wg.norm_residual,
            "conditional_purity": purity(rho_c),
            "conditional_checksum": _matrix_checksum(rho_c.matrix),
        }

    report = RunReport(
        config=cfg, out_dir=out_dir, method=method, sample_times=sample_times,
        witness=witness, photons=photons, photon_errors=photon_errors,
        purity_times=purity_times, purity_series=purity_series,
        leakage=leakage, conditioning=conditioning, schedules_meta=sched_meta,
        wall_seconds=time.time() - t_wall, n_traj_effective=n_traj_effective,
    )
    _write_artifacts(report)
    return report


def _matrix_checksum(m: np.ndarray) -> str:
    import hashlib
    return hashlib.sha256(np.ascontiguousarray(m, dtype="<c16").tobytes()).hexdigest()


def _write_wigner(path, wg, neg):
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("# wigner schema v1: x, p, w\n")
        fh.write("x,p,w\n")
        for i, x in enumerate(wg.xs):
            for j, p in enumerate(wg.ps):
                fh.write(f"{x:.17g},{p:.17g},{wg.values[i, j]:.17g}\n")
    os.replace(tmp, path)
    side = {
        "schema": "wigner v1",
        "convention": wg.convention,
        "negativity": neg,
        "points": len(wg.xs),
        "extent": float(wg.xs[-1]),
        "norm_residual": wg.norm_residual,
    }
    with open(str(path) + ".json", "w") as fh:
        json.dump(side, fh, indent=1, sort_keys=True)


def _write_artifacts(report: RunReport):
    cfg = report.config
    out = report.out_dir
    if "csv" in cfg.formats:
        for (designation, n), ws in report.witness.items():
            cols = {"t": ws.times}
            for m, col in (("e_f", "ef"), ("e_g", "eg"), ("s_f", "sf"), ("s_g", "sg"),
                           ("e_f_appendix", "ef_app"), ("e_g_appendix", "eg_app"),
                           ("genuine_steering", "sg_var"),
                           ("genuine_entanglement", "eg_var")):
                cols[col] = ws.margin(m)
            for m in ("e_f", "e_g", "s_f", "s_g"):
                cols["se_" + m.replace("_", "")] = ws.errors[m]
            gains_s = np.array([r.variance.gains_steering[0] for r in ws.reports])
            gains_e = np.array([r.variance.gains_entanglement[0] for r in ws.reports])
            gains_g = np.array([r.variance.gains_genuine[0] for r in ws.reports])
            cols["gain_steer"] = gains_s
            cols["gain_ent"] = gains_e
            cols["gain_genuine"] = gains_g
            for k in range(3):
                cols[f"s{k + 1}"] = np.array(
                    [r.variance.variance_sums[k] for r in ws.reports])
            for flag in ("fully_inseparable_entanglement", "genuine_entanglement",
                         "fully_inseparable_steering", "genuine_steering"):
                cols[flag] = np.array([int(getattr(r, flag)) for r in ws.reports])
            cols["symmetric_ok"] = np.array([int(r.symmetric_ok) for r in ws.reports])
            cols["trusted"] = np.array([int(r.trusted) for r in ws.reports])
            _write_csv(os.path.join(out, f"witness_{designation}_n{n}.csv"),
                       f"witness-series schema v1; order n={n}; margins positive = "
                       "property certified; closed forms from the symmetric "
                       "reduction, *_var from the variance route", cols)
        cols = {"t": report.sample_times}
        for name, series in report.photons.items():
            cols[name] = series
            cols["se_" + name] = report.photon_errors[name]
        _write_csv(os.path.join(out, "photons.csv"), "photon-number series schema v1", cols)
        if report.purity_series is not None:
            _write_csv(os.path.join(out, "purity.csv"),
                       "virtual-triple purity schema v1",
                       {"t": report.purity_times, "purity": report.purity_series})
    doc = report.summary_dict()
    tmp = os.path.join(out, "report.json.tmp")
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
    os.replace(tmp, os.path.join(out, "report.json"))


# ---------------------------------------------------------------------------
# Steady-state extraction and sweeps


def steady_state(times: np.ndarray, series: np.ndarray, window: float = 0.25):
    """Mean and relative drift of a series over the trailing window."""
    n = len(times)
    lo = int(np.floor(n * (1.0 - window)))
    seg = series[lo:]
    mean = float(np.mean(seg))
    scale = max(abs(mean), 1e-12)
    drift = float((np.max(seg) - np.min(seg)) / scale)
    return mean, drift


def positive_duration(times: np.ndarray, series: np.ndarray) -> float:
    """Total measure of {t : margin > 0} on the sample grid."""
    if len(times) < 2:
        return 0.0
    dt = float(times[1] - times[0])
    return float(np.sum(np.asarray(series) > 0) * dt)


def sweep(cfg: ScenarioConfig, axis: str, values, out_root: str | None = None,
          workers: int = 1):
    """Run one scenario per axis value; collect maxima and steady-state rows.

    A failing sub-run aborts the sweep but completed sub-run directories and
    the partial summary are preserved.
    """
    if axis not in ("beta", "gamma", "g"):
        raise ValidationError(f"unknown sweep axis {axis!r}")
    values = list(values)
    if not values:
        raise ValidationError("sweep needs at least one value")
    out_root = out_root or os.path.join(
        os.environ.get(OUTPUT_ROOT_ENV, "runs"), (cfg.name or "scenario") + f"_sweep_{axis}")
    os.makedirs(out_root, exist_ok=True)
    rows = []
    reports = []
    failure = None
    for v in values:
        doc = cfg.to_dict()
        if axis == "beta":
            doc["model"]["betas"] = [[float(v), 0.0]] * 3
        elif axis == "gamma":
            doc["model"]["gammas"] = [float(v)] * 3
        else:
            doc["model"]["g"] = float(v)
        sub = ScenarioConfig.from_dict(doc)
        sub_dir = os.path.join(out_root, f"{axis}_{v:g}")
        try:
            rep = run_scenario(sub, out_dir=sub_dir, workers=workers)
        except Exception as exc:
            failure = (v, exc)
            break
        reports.append(rep)
        row = {"value": float(v)}
        for (designation, n), ws in rep.witness.items():
            for m, col in (("e_f", "ef"), ("e_g", "eg"), ("s_f", "sf"), ("s_g", "sg")):
                series = ws.margin(m)
                ok = np.isfinite(series)
                key = f"{col}_n{n}_{designation}"
                row[f"max_{key}"] = float(np.nanmax(series)) if ok.any() else np.nan
                ss, drift = steady_state(ws.times, np.where(ok, series, 0.0))
                row[f"ss_{key}"] = ss
                row[f"drift_{key}"] = drift
                row[f"duration_{key}"] = positive_duration(ws.times, np.where(ok, series, -1))
        if rep.conditioning is not None:
            row["negativity"] = rep.conditioning["negativity"]
        rows.append(row)
    if rows:
        rows.sort(key=lambda r: r["value"])
        names = list(rows[0])
        cols = {k: np.array([r.get(k, np.nan) for r in rows]) for k in names}
        _write_csv(os.path.join(out_root, "summary.csv"),
                   f"sweep summary schema v1; axis={axis}", cols)
    if failure is not None:
        raise RuntimeError(
            f"sweep aborted at {axis}={failure[0]!r}: {failure[1]}"
        ) from failure[1]
    return rows, reports
