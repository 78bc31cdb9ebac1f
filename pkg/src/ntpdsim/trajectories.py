"""Stochastic quantum-jump propagation, master-equation oracle, ensembles.

The unraveling is the waiting-time (norm-threshold) form of photon-counting
detection: the unnormalized state runs under the non-Hermitian effective
Hamiltonian until its squared norm crosses a uniform random threshold, the
crossing time is located by bisection, a collapse channel is drawn with
probability proportional to <J_k^dag J_k>, and the threshold is redrawn.
Statistically this reproduces the first-order jump expansion of the master
equation with much better jump-time resolution.

Trajectory randomness is keyed by (master_seed, trajectory_index) through a
Philox counter generator, so ensembles shard deterministically across any
batch or worker partition.  Per-column scalars that steer control flow are
always computed by the same routines in batched and single-trajectory runs.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .fock import (
    DensityOperator,
    DiagonalObservable,
    StateVector,
    partial_trace,
    partial_trace_pure,
    state_checksum,
)
from .model import GeneratorSet

MASTER_DIM_GUARD = 4096
NORM_UNDERFLOW = 1e-300
DEFAULT_STIFFNESS_BUDGET = 1.5   # substep size <= budget / ||H_eff|| bound
MAX_SUBSTEPS = 20000
JUMP_TIME_RTOL = 1e-6            # jump time located to this fraction of dt

CHECKPOINT_MAGIC = b"TRAJCKP1"
CHECKPOINT_VERSION = 1


class DimensionGuardError(RuntimeError):
    """Dense density-matrix integration refused; use the trajectory engine."""


class StepControlError(RuntimeError):
    """Propagation step control failed; rerun with a smaller dt."""


class NormUnderflowError(RuntimeError):
    """Trajectory norm underflowed; the state is no longer meaningful."""


def uniform_grid(t_max: float, dt: float) -> np.ndarray:
    n = int(round(t_max / dt))
    if n < 1 or abs(n * dt - t_max) > 1e-9 * max(t_max, dt):
        raise ValueError(f"t_max={t_max} is not an integer number of steps dt={dt}")
    return np.arange(n + 1) * dt


def _check_uniform(grid: np.ndarray) -> float:
    steps = np.diff(grid)
    if len(steps) == 0 or np.any(np.abs(steps - steps[0]) > 1e-9 * abs(steps[0])):
        raise ValueError("time grid must be uniform")
    return float(steps[0])


# ---------------------------------------------------------------------------
# Observable bookkeeping


class ObservableSet:
    """Named observables with diagonal / lag-monomial / sparse fast paths."""

    def __init__(self, observables: dict):
        self.names = list(observables)
        self.obs = observables
        self._diag_names = [k for k, o in observables.items() if isinstance(o, DiagonalObservable)]
        self._other_names = [k for k in self.names if k not in set(self._diag_names)]
        if self._diag_names:
            self._diag_mat = np.stack([observables[k].diag for k in self._diag_names])
        else:
            self._diag_mat = None
        self._pos = {k: i for i, k in enumerate(self.names)}
        self._diag_pos = np.array([self._pos[k] for k in self._diag_names], dtype=int)

    def __len__(self):
        return len(self.names)

    def evaluate(self, psi: np.ndarray, norm_sq: float) -> np.ndarray:
        """Normalized expectation of every observable on one state column."""
        out = np.empty(len(self.names), dtype=np.complex128)
        if self._diag_mat is not None:
            p = np.real(psi) ** 2 + np.imag(psi) ** 2
            out[self._diag_pos] = self._diag_mat @ p
        for k in self._other_names:
            out[self._pos[k]] = self.obs[k].expect(psi)
        out /= norm_sq
        return out

    def evaluate_rho(self, rho: np.ndarray) -> np.ndarray:
        out = np.empty(len(self.names), dtype=np.complex128)
        for i, k in enumerate(self.names):
            out[i] = self.obs[k].expect_rho(rho)
        return out


@dataclass
class MomentAccumulator:
    """Sufficient statistics (n, sum, sum|.|^2) per observable and time."""

    times: np.ndarray
    names: list
    n: int = 0
    s1: np.ndarray = None
    s2: np.ndarray = None

    def __post_init__(self):
        shape = (len(self.times), len(self.names))
        if self.s1 is None:
            self.s1 = np.zeros(shape, dtype=np.complex128)
        if self.s2 is None:
            self.s2 = np.zeros(shape, dtype=float)

    def add(self, values: np.ndarray):
        self.n += 1
        self.s1 += values
        self.s2 += np.abs(values) ** 2

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        if list(other.names) != list(self.names) or len(other.times) != len(self.times):
            raise ValueError("cannot merge accumulators with different schema")
        return MomentAccumulator(
            self.times, self.names, self.n + other.n, self.s1 + other.s1, self.s2 + other.s2
        )

    def mean(self) -> np.ndarray:
        return self.s1 / self.n

    def stderr(self) -> np.ndarray:
        if self.n < 2:
            return np.full(self.s1.shape, np.nan)
        var = np.maximum(self.s2 / self.n - np.abs(self.s1 / self.n) ** 2, 0.0)
        return np.sqrt(var / (self.n - 1))


def merge_pairwise(accs: list) -> "MomentAccumulator":
    """Stable pairwise reduction; order-independent to rounding."""
    items = list(accs)
    if not items:
        raise ValueError("nothing to merge")
    while len(items) > 1:
        nxt = []
        for i in range(0, len(items) - 1, 2):
            nxt.append(items[i].merge(items[i + 1]))
        if len(items) % 2:
            nxt.append(items[-1])
        items = nxt
    return items[0]


class EnsembleEstimate:
    """Per-observable, per-time Monte Carlo mean and standard error."""

    def __init__(self, acc: MomentAccumulator):
        if acc.n < 2:
            raise ValueError("need at least two trajectories")
        self.times = acc.times
        self.names = list(acc.names)
        self.n_traj = acc.n
        self._mean = acc.mean()
        self._se = acc.stderr()
        self._pos = {k: i for i, k in enumerate(self.names)}

    def mean(self, name: str) -> np.ndarray:
        return self._mean[:, self._pos[name]]

    def stderr(self, name: str) -> np.ndarray:
        return self._se[:, self._pos[name]]


@dataclass
class TrajectoryRecord:
    seed: int                       # trajectory index; RNG key is (master_seed, seed)
    jump_events: list               # [(time, channel 1..3), ...] strictly increasing
    sampled_observables: dict       # name -> complex array over sample times (may be empty)
    final_state_checksum: str
    final_state: StateVector | None = None


# ---------------------------------------------------------------------------
# Core propagation kernels


def _rk4(gens: GeneratorSet, y, h, g_mu, decay_diag):
    k1 = gens.schroedinger_rhs(y, g_mu, decay_diag)
    k2 = gens.schroedinger_rhs(y + (0.5 * h) * k1, g_mu, decay_diag)
    k3 = gens.schroedinger_rhs(y + (0.5 * h) * k2, g_mu, decay_diag)
    k4 = gens.schroedinger_rhs(y + h * k3, g_mu, decay_diag)
    return y + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)


def _col_norm_sq(block: np.ndarray) -> np.ndarray:
    """Squared norms per column; accumulation order does not depend on width."""
    return np.einsum("ib,ib->b", block.conj(), block).real


def _substep_count(gens, t0, dt, budget, max_substeps):
    stiff = gens.stiffness_bound(gens.g_mu_at(t0 + 0.5 * dt))
    n_sub = max(1, int(np.ceil(dt * stiff / budget)))
    if n_sub > max_substeps:
        raise StepControlError(
            f"step at t={t0:.4g} needs {n_sub} substeps; rerun with dt <= "
            f"{budget / stiff:.3e}"
        )
    return n_sub


def _rng_for(master_seed: int, index: int) -> np.random.Generator:
    key = np.array([master_seed & 0xFFFFFFFFFFFFFFFF, index & 0xFFFFFFFFFFFFFFFF],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _pick_channel(rng, weights) -> int:
    total = weights.sum()
    cum = np.cumsum(weights / total)
    return int(np.searchsorted(cum, rng.uniform(), side="right").clip(0, len(weights) - 1))


def _bisect_jump(gens, y0, seg_len, g_mu, dd, r, rtol_time):
    """Locate the norm-threshold crossing inside one frozen-coefficient segment.

    Returns (theta, state at theta*seg_len); crossing time accurate to
    rtol_time * seg_len in absolute terms.
    """
    lo, hi = 0.0, 1.0
    y_hi = _rk4(gens, y0, seg_len, g_mu, dd)
    while (hi - lo) > rtol_time:
        mid = 0.5 * (lo + hi)
        y_mid = _rk4(gens, y0, mid * seg_len, g_mu, dd)
        if _col_norm_sq(y_mid)[0] < r:
            hi, y_hi = mid, y_mid
        else:
            lo = mid
    return hi, y_hi


def _column_step_with_jumps(gens, y, t0, dt, n_sub, r, rng, events, rtol_time):
    """Redo one grid step for a single column (dim, 1), applying jumps.

    Substep midpoints and sizes replicate the batched pass exactly, so a
    column that does not cross its threshold reproduces the batched result.
    """
    h = dt / n_sub
    for j in range(n_sub):
        tm = t0 + (j + 0.5) * h
        g_mu = gens.g_mu_at(tm)
        dd = gens.decay_diagonal(g_mu)
        seg_t = t0 + j * h
        seg_len = h
        while True:
            y_end = _rk4(gens, y, seg_len, g_mu, dd)
            n2 = _col_norm_sq(y_end)[0]
            if not np.isfinite(n2) or n2 > 4.0:
                raise StepControlError(
                    f"norm grew to {n2:.3g} at t={seg_t:.4g}; rerun with smaller dt"
                )
            if n2 >= r:
                y = y_end
                break
            # threshold crossed inside this segment: locate, collapse, redraw
            theta, y_jump = _bisect_jump(gens, y, seg_len, g_mu, dd, r, rtol_time)
            weights = gens.jump_weights(y_jump[:, 0], g_mu)
            total = weights.sum()
            if total <= 0.0:
                # no open decay channel; the crossing is integrator noise
                y = _rk4(gens, y, seg_len, g_mu, dd)
                r = -np.inf
                break
            channel = _pick_channel(rng, weights)
            y_new = gens.apply_jump(channel, y_jump, g_mu)
            jn = np.sqrt(_col_norm_sq(y_new)[0])
            if jn < 1e-150:
                raise NormUnderflowError("collapsed state has zero norm")
            y = y_new / jn
            events.append((seg_t + theta * seg_len, channel + 1))
            r = rng.uniform()
            seg_t = seg_t + theta * seg_len
            seg_len = seg_len * (1.0 - theta)
            if seg_len <= 0.0:
                y = y
                break
    return y, r


@dataclass
class BatchResult:
    idx_start: int
    idx_end: int
    acc: MomentAccumulator
    records: list
    reduced_sum: np.ndarray | None     # (n_reduced_times, d, d) summed partial traces
    n_reduced: int


def run_batch(
    psi0: StateVector,
    gens: GeneratorSet,
    grid: np.ndarray,
    obs_set: ObservableSet,
    master_seed: int,
    idx_start: int,
    idx_end: int,
    sample_indices: np.ndarray,
    reduced_keep=None,
    reduced_indices: np.ndarray | None = None,
    keep_values: bool = False,
    keep_final_state: bool = False,
    stiffness_budget: float = DEFAULT_STIFFNESS_BUDGET,
    max_substeps: int = MAX_SUBSTEPS,
    rtol_time: float = JUMP_TIME_RTOL,
) -> BatchResult:
    """Propagate trajectories idx_start..idx_end-1 together through the grid."""
    dt = _check_uniform(grid)
    n_steps = len(grid) - 1
    width = idx_end - idx_start
    dim = psi0.layout.total_dim

    psi = psi0.amplitudes / np.sqrt(psi0.norm_sq)
    block = np.repeat(psi[:, None], width, axis=1)

    rngs = [_rng_for(master_seed, i) for i in range(idx_start, idx_end)]
    thresholds = np.array([rng.uniform() for rng in rngs])
    events = [[] for _ in range(width)]

    sample_set = {int(i): s for s, i in enumerate(sample_indices)}
    reduced_set = (
        {int(i): s for s, i in enumerate(reduced_indices)} if reduced_indices is not None else {}
    )
    sample_times = grid[sample_indices]
    acc = MomentAccumulator(sample_times, obs_set.names)
    values = np.zeros((width, len(sample_indices), len(obs_set)), dtype=np.complex128)

    reduced_sum = None
    if reduced_keep is not None and reduced_indices is not None:
        d_red = int(np.prod([psi0.layout.dims[m] for m in reduced_keep]))
        reduced_sum = np.zeros((len(reduced_indices), d_red, d_red), dtype=np.complex128)

    def sample_at(step_idx):
        s = sample_set.get(step_idx)
        if s is None:
            return
        n2 = _col_norm_sq(block)
        for c in range(width):
            values[c, s, :] = obs_set.evaluate(block[:, c], n2[c])
        rs = reduced_set.get(step_idx)
        if rs is not None:
            for c in range(width):
                red = partial_trace_pure(psi0.layout, block[:, c], reduced_keep)
                reduced_sum[rs] += red / n2[c]

    sample_at(0)
    for step in range(n_steps):
        t0 = grid[step]
        n_sub = _substep_count(gens, t0, dt, stiffness_budget, max_substeps)
        h = dt / n_sub
        start_block = block.copy()
        for j in range(n_sub):
            tm = t0 + (j + 0.5) * h
            g_mu = gens.g_mu_at(tm)
            dd = gens.decay_diagonal(g_mu)
            block = _rk4(gens, block, h, g_mu, dd)
        n2 = _col_norm_sq(block)
        if not np.all(np.isfinite(n2)) or n2.max() > 4.0:
            raise StepControlError(
                f"norm grew to {n2.max():.3g} at t={t0:.4g}; rerun with smaller dt"
            )
        if n2.min() < NORM_UNDERFLOW:
            raise NormUnderflowError(f"trajectory norm underflow at t={t0:.4g}")
        crossed = np.nonzero(n2 < thresholds)[0]
        for c in crossed:
            ycol, r_new = _column_step_with_jumps(
                gens, start_block[:, c:c + 1], t0, dt, n_sub,
                thresholds[c], rngs[c], events[c], rtol_time,
            )
            block[:, c] = ycol[:, 0]
            thresholds[c] = r_new
        sample_at(step + 1)

    n2 = _col_norm_sq(block)
    records = []
    for c in range(width):
        final = StateVector(psi0.layout, block[:, c] / np.sqrt(n2[c]))
        rec = TrajectoryRecord(
            seed=idx_start + c,
            jump_events=events[c],
            sampled_observables=(
                {k: values[c, :, i].copy() for i, k in enumerate(obs_set.names)}
                if keep_values else {}
            ),
            final_state_checksum=state_checksum(final),
            final_state=final if keep_final_state else None,
        )
        records.append(rec)
        acc.add(values[c])
    return BatchResult(idx_start, idx_end, acc, records,
                       reduced_sum, len(reduced_set))


def evolve_trajectory(
    psi0: StateVector,
    gens: GeneratorSet,
    grid: np.ndarray,
    master_seed: int,
    index: int = 0,
    observables: dict | None = None,
    sample_stride: int = 1,
    keep_final_state: bool = True,
    **kwargs,
) -> TrajectoryRecord:
    """Run a single trajectory; bit-identical to the same column of any batch."""
    obs_set = ObservableSet(observables or {})
    sample_indices = sample_grid_indices(len(grid) - 1, sample_stride)
    res = run_batch(
        psi0, gens, grid, obs_set, master_seed, index, index + 1,
        sample_indices, keep_values=True, keep_final_state=keep_final_state, **kwargs,
    )
    return res.records[0]


def sample_grid_indices(n_steps: int, stride: int) -> np.ndarray:
    idx = np.arange(0, n_steps + 1, max(1, int(stride)))
    if idx[-1] != n_steps:
        idx = np.append(idx, n_steps)
    return idx


# ---------------------------------------------------------------------------
# Ensemble driver with deterministic sharding, checkpointing, resume


@dataclass
class EnsembleResult:
    sample_times: np.ndarray
    acc_total: MomentAccumulator
    acc_blocks: list
    records: list
    reduced_times: np.ndarray | None
    reduced_mean: np.ndarray | None

    def estimate(self) -> EnsembleEstimate:
        return EnsembleEstimate(self.acc_total)


def _batch_ranges(n_traj: int, n_blocks: int, batch_size: int):
    """Batches never straddle block boundaries, so block sums are exact."""
    bounds = [n_traj * b // n_blocks for b in range(n_blocks + 1)]
    out = []
    for b in range(n_blocks):
        lo, hi = bounds[b], bounds[b + 1]
        start = lo
        while start < hi:
            end = min(start + batch_size, hi)
            out.append((b, start, end))
            start = end
    return out


def run_ensemble(
    psi0: StateVector,
    gens: GeneratorSet,
    grid: np.ndarray,
    observables: dict,
    master_seed: int,
    n_traj: int,
    sample_stride: int = 1,
    n_blocks: int = 20,
    batch_size: int = 64,
    workers: int = 1,
    reduced_keep=None,
    reduced_stride: int = 1,
    checkpoint_dir: str | None = None,
    progress=None,
    **kwargs,
) -> EnsembleResult:
    if n_traj < 2:
        raise ValueError("ensembles need at least two trajectories")
    n_blocks = min(n_blocks, n_traj)
    obs_set = ObservableSet(observables)
    n_steps = len(grid) - 1
    sample_indices = sample_grid_indices(n_steps, sample_stride)
    reduced_indices = None
    if reduced_keep is not None:
        reduced_indices = sample_indices[:: max(1, int(reduced_stride))]
        if reduced_indices[-1] != sample_indices[-1]:
            reduced_indices = np.append(reduced_indices, sample_indices[-1])

    tasks = _batch_ranges(n_traj, n_blocks, batch_size)

    def compute(task):
        b, lo, hi = task
        path = _checkpoint_path(checkpoint_dir, lo, hi)
        if path and os.path.exists(path):
            res = checkpoint_read(path, grid[sample_indices], obs_set.names)
            if res is not None:
                return b, res
        res = run_batch(
            psi0, gens, grid, obs_set, master_seed, lo, hi, sample_indices,
            reduced_keep=reduced_keep, reduced_indices=reduced_indices,
            keep_values=False, **kwargs,
        )
        if path:
            checkpoint_write(path, res, grid[sample_indices])
        return b, res

    if workers > 1:
        import multiprocessing as mp

        with mp.Pool(workers) as pool:
            results = pool.map(_PoolTask(psi0, gens, grid, obs_set, master_seed,
                                         sample_indices, reduced_keep, reduced_indices,
                                         checkpoint_dir, kwargs), tasks)
    else:
        results = [compute(t) for t in tasks]
        if progress:
            progress(len(tasks), len(tasks))

    # deterministic fold: batches arrive keyed by (block, idx_start)
    results.sort(key=lambda br: (br[0], br[1].idx_start))
    block_accs = {}
    records = []
    reduced_sum = None
    for b, res in results:
        block_accs.setdefault(b, []).append(res.acc)
        records.extend(res.records)
        if res.reduced_sum is not None:
            reduced_sum = res.reduced_sum if reduced_sum is None else reduced_sum + res.reduced_sum
    acc_blocks = [merge_pairwise(block_accs[b]) for b in sorted(block_accs)]
    acc_total = merge_pairwise(acc_blocks)
    reduced_mean = reduced_sum / n_traj if reduced_sum is not None else None
    return EnsembleResult(
        grid[sample_indices], acc_total, acc_blocks, records,
        grid[reduced_indices] if reduced_indices is not None else None,
        reduced_mean,
    )


class _PoolTask:
    """Picklable batch worker for multiprocessing pools."""

    def __init__(self, psi0, gens, grid, obs_set, master_seed, sample_indices,
                 reduced_keep, reduced_indices, checkpoint_dir, kwargs):
        self.args = (psi0, gens, grid, obs_set, master_seed, sample_indices,
                     reduced_keep, reduced_indices, checkpoint_dir, kwargs)

    def __call__(self, task):
        (psi0, gens, grid, obs_set, master_seed, sample_indices,
         reduced_keep, reduced_indices, checkpoint_dir, kwargs) = self.args
        b, lo, hi = task
        path = _checkpoint_path(checkpoint_dir, lo, hi)
        if path and os.path.exists(path):
            res = checkpoint_read(path, grid[sample_indices], obs_set.names)
            if res is not None:
                return b, res
        res = run_batch(
            psi0, gens, grid, obs_set, master_seed, lo, hi, sample_indices,
            reduced_keep=reduced_keep, reduced_indices=reduced_indices,
            keep_values=False, **kwargs,
        )
        if path:
            checkpoint_write(path, res, grid[sample_indices])
        return b, res


def ensemble_average(records: list, names: list | None = None) -> EnsembleEstimate:
    """Mean and standard error over trajectory records carrying sampled values."""
    if len(records) < 2:
        raise ValueError("need at least two records")
    first = records[0].sampled_observables
    if not first:
        raise ValueError("records carry no sampled observables")
    names = list(names or first.keys())
    n_times = len(first[names[0]])
    acc = MomentAccumulator(np.arange(n_times, dtype=float), names)
    for rec in records:
        if set(names) - set(rec.sampled_observables):
            raise ValueError("records disagree on observables")
        vals = np.stack([rec.sampled_observables[k] for k in names], axis=1)
        if vals.shape[0] != n_times:
            raise ValueError("records disagree on sample grids")
        acc.add(vals)
    return EnsembleEstimate(acc)


# ---------------------------------------------------------------------------
# Checkpoint files: header + accumulator + per-record event logs (+ snapshot)


def _checkpoint_path(checkpoint_dir, lo, hi):
    if checkpoint_dir is None:
        return None
    os.makedirs(checkpoint_dir, exist_ok=True)
    return os.path.join(checkpoint_dir, f"batch_{lo:08d}_{hi:08d}.ckpt")


def checkpoint_write(path: str, res: BatchResult, sample_times: np.ndarray):
    acc = res.acc
    parts = [CHECKPOINT_MAGIC,
             struct.pack("<HxxIIII", CHECKPOINT_VERSION, res.idx_start, res.idx_end,
                         len(sample_times), len(acc.names))]
    parts.append(np.asarray(sample_times, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(acc.s1, dtype="<c16").tobytes())
    parts.append(np.ascontiguousarray(acc.s2, dtype="<f8").tobytes())
    if res.reduced_sum is not None:
        nred, dred, _ = res.reduced_sum.shape
        parts.append(struct.pack("<II", nred, dred))
        parts.append(np.ascontiguousarray(res.reduced_sum, dtype="<c16").tobytes())
    else:
        parts.append(struct.pack("<II", 0, 0))
    for rec in res.records:
        ev = rec.jump_events
        parts.append(struct.pack("<QI", rec.seed, len(ev)))
        for t, ch in ev:
            parts.append(struct.pack("<dB", t, ch))
        parts.append(struct.pack("<B32s", 0, bytes.fromhex(rec.final_state_checksum[:64])))
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def checkpoint_read(path: str, sample_times: np.ndarray, names: list) -> BatchResult | None:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != CHECKPOINT_MAGIC:
        return None
    version, lo, hi, n_t, n_o = struct.unpack_from("<HxxIIII", buf, 8)
    if version != CHECKPOINT_VERSION or n_t != len(sample_times) or n_o != len(names):
        return None
    off = 8 + struct.calcsize("<HxxIIII")
    times = np.frombuffer(buf, "<f8", n_t, off)
    off += 8 * n_t
    if not np.allclose(times, sample_times):
        return None
    s1 = np.frombuffer(buf, "<c16", n_t * n_o, off).reshape(n_t, n_o).copy()
    off += 16 * n_t * n_o
    s2 = np.frombuffer(buf, "<f8", n_t * n_o, off).reshape(n_t, n_o).copy()
    off += 8 * n_t * n_o
    nred, dred = struct.unpack_from("<II", buf, off)
    off += 8
    reduced = None
    if nred:
        reduced = np.frombuffer(buf, "<c16", nred * dred * dred, off).reshape(nred, dred, dred).copy()
        off += 16 * nred * dred * dred
    records = []
    for _ in range(hi - lo):
        seed, n_ev = struct.unpack_from("<QI", buf, off)
        off += 12
        events = []
        for _ in range(n_ev):
            t, ch = struct.unpack_from("<dB", buf, off)
            events.append((t, ch))
            off += 9
        _, digest = struct.unpack_from("<B32s", buf, off)
        off += 33
        records.append(TrajectoryRecord(seed, events, {}, digest.hex()))
    acc = MomentAccumulator(np.asarray(sample_times), list(names), hi - lo, s1, s2)
    return BatchResult(lo, hi, acc, records, reduced, nred)


# ---------------------------------------------------------------------------
# Deterministic master-equation integration (the oracle route)


@dataclass
class MasterResult:
    sample_times: np.ndarray
    values: dict
    reduced_times: np.ndarray | None
    reduced: list | None
    final_rho: DensityOperator
    max_trace_drift: float

    def mean(self, name):
        return self.values[name]


def _liouvillian_rhs(a_mat, jump_mats, rho):
    """A rho + rho A^dag + sum J rho J^dag, valid for non-Hermitian rho too."""
    out = a_mat @ rho
    out += (a_mat @ rho.conj().T).conj().T
    for jm in jump_mats:
        out += jm @ ((jm @ rho.conj().T).conj().T)
    return out


def integrate_master(
    rho0: DensityOperator,
    gens: GeneratorSet,
    grid: np.ndarray,
    observables: dict | None = None,
    sample_stride: int = 1,
    reduced_keep=None,
    reduced_stride: int = 1,
    rtol: float = 1e-8,
    atol: float = 1e-11,
    time_dependent: bool | None = None,
) -> MasterResult:
    """Adaptive RK integration of the cascade master equation (dense rho).

    Hermiticity is restored at every grid point; overall trace drift beyond
    1e-8 raises.  Refuses layouts larger than MASTER_DIM_GUARD.
    """
    dim = rho0.layout.total_dim
    if dim > MASTER_DIM_GUARD:
        raise DimensionGuardError(
            f"total_dim {dim} exceeds {MASTER_DIM_GUARD}; use the trajectory engine"
        )
    obs_set = ObservableSet(observables or {})
    n_steps = len(grid) - 1
    _check_uniform(grid)
    sample_indices = sample_grid_indices(n_steps, sample_stride)
    reduced_indices = None
    reduced = None
    reduced_set = {}
    if reduced_keep is not None:
        reduced_indices = sample_indices[:: max(1, int(reduced_stride))]
        if reduced_indices[-1] != sample_indices[-1]:
            reduced_indices = np.append(reduced_indices, sample_indices[-1])
        reduced_set = {int(i): s for s, i in enumerate(reduced_indices)}
        reduced = [None] * len(reduced_indices)

    if time_dependent is None:
        time_dependent = gens.schedules is not None and not all(
            getattr(s, "is_constant", False) for s in gens.schedules
        )
    if not time_dependent:
        a_mat, jump_mats = gens.master_pieces(gens.g_mu_at(grid[0]))

        def rhs(t, y):
            rho = y.reshape(dim, dim)
            return _liouvillian_rhs(a_mat, jump_mats, rho).ravel()
    else:
        def rhs(t, y):
            a_mat, jump_mats = gens.master_pieces(gens.g_mu_at(t))
            rho = y.reshape(dim, dim)
            return _liouvillian_rhs(a_mat, jump_mats, rho).ravel()

    values = np.zeros((len(sample_indices), len(obs_set)), dtype=np.complex128)
    rho = rho0.matrix.astype(np.complex128).copy()
    drift = abs(np.trace(rho).real - 1.0)

    def record(s, rho):
        if len(obs_set):
            values[s] = obs_set.evaluate_rho(rho)
        rs = reduced_set.get(int(sample_indices[s]))
        if rs is not None:
            red = DensityOperator(rho0.layout, rho, validate=False)
            reduced[rs] = partial_trace(red, reduced_keep).matrix

    # one adaptive segment per sample interval; hermiticity restored at each
    record(0, rho)
    for s in range(len(sample_indices) - 1):
        sol = solve_ivp(
            rhs, (grid[sample_indices[s]], grid[sample_indices[s + 1]]), rho.ravel(),
            method="RK45", rtol=rtol, atol=atol, dense_output=False,
        )
        if not sol.success:
            raise RuntimeError(f"master integration failed at sample {s}: {sol.message}")
        rho = sol.y[:, -1].reshape(dim, dim)
        rho = 0.5 * (rho + rho.conj().T)
        drift = max(drift, abs(np.trace(rho).real - 1.0))
        record(s + 1, rho)
    if drift > 1e-8:
        raise RuntimeError(f"master-equation trace drift {drift:.3e} exceeds 1e-8")

    out_values = {k: values[:, i].copy() for i, k in enumerate(obs_set.names)}
    return MasterResult(
        grid[sample_indices], out_values,
        grid[reduced_indices] if reduced_indices is not None else None,
        reduced,
        DensityOperator(rho0.layout, rho, validate=False),
        drift,
    )


def integrate_unitary(
    psi0: StateVector,
    gens: GeneratorSet,
    grid: np.ndarray,
    observables: dict | None = None,
    sample_stride: int = 1,
    reduced_keep=None,
    reduced_stride: int = 1,
    rtol: float = 1e-10,
    atol: float = 1e-12,
) -> MasterResult:
    """Exact jump-free Schroedinger evolution (gamma = 0, no virtual modes)."""
    if any(gens.params.gammas) or gens.params.include_virtual:
        raise ValueError("unitary integration requires gamma = 0 and no cascade")
    obs_set = ObservableSet(observables or {})
    _check_uniform(grid)
    n_steps = len(grid) - 1
    sample_indices = sample_grid_indices(n_steps, sample_stride)
    reduced_indices = None
    reduced = None
    if reduced_keep is not None:
        reduced_indices = sample_indices[:: max(1, int(reduced_stride))]
        if reduced_indices[-1] != sample_indices[-1]:
            reduced_indices = np.append(reduced_indices, sample_indices[-1])
        reduced = []
    zero = np.zeros(3, dtype=np.complex128)

    def rhs(t, y):
        return gens.schroedinger_rhs(y, zero)

    psi_init = psi0.amplitudes / np.sqrt(psi0.norm_sq)
    sol = solve_ivp(rhs, (grid[0], grid[-1]), psi_init.astype(np.complex128),
                    method="RK45", rtol=rtol, atol=atol, t_eval=grid[sample_indices])
    if not sol.success:
        raise RuntimeError(f"unitary integration failed: {sol.message}")
    values = np.zeros((len(sample_indices), len(obs_set)), dtype=np.complex128)
    drift = 0.0
    reduced_pos = set(int(i) for i in (reduced_indices if reduced_indices is not None else []))
    for s, idx in enumerate(sample_indices):
        psi = sol.y[:, s]
        n2 = float(np.real(np.vdot(psi, psi)))
        drift = max(drift, abs(n2 - 1.0))
        if len(obs_set):
            values[s] = obs_set.evaluate(psi, n2)
        if int(idx) in reduced_pos:
            reduced.append(partial_trace_pure(psi0.layout, psi, reduced_keep) / n2)
    if drift > 1e-6:
        raise RuntimeError(f"unitary norm drift {drift:.3e}; tighten tolerances")
    final = StateVector(psi0.layout, sol.y[:, -1].copy()).normalize()
    out_values = {k: values[:, i].copy() for i, k in enumerate(obs_set.names)}
    return MasterResult(
        grid[sample_indices], out_values,
        grid[reduced_indices] if reduced_indices is not None else None,
        reduced,
        final.density_operator() if psi0.layout.total_dim <= 512 else None,
        drift,
    )


# ---------------------------------------------------------------------------
# Two-time correlation kernel via the quantum regression theorem


@dataclass
class CorrelationKernel:
    """Hermitian first-order coherence kernel of one output channel."""

    times: np.ndarray
    matrix: np.ndarray
    mode: int
    gamma: float

    def validate(self):
        if np.abs(self.matrix - self.matrix.conj().T).max() > 1e-8:
            raise ValueError("kernel is not Hermitian")
        if np.real(np.diag(self.matrix)).min() < -1e-10:
            raise ValueError("kernel has negative diagonal")


def two_time_correlation(
    rho0: DensityOperator,
    gens: GeneratorSet,
    kernel_times: np.ndarray,
    mode: int,
    rtol: float = 1e-8,
    atol: float = 1e-11,
) -> CorrelationKernel:
    """gamma_k <b_k^dag(t_j) b_k(t_i)> for t_j >= t_i on the kernel grid.

    Uses the intracavity-only generator (no virtual-cavity coupling); the
    lower triangle is filled by Hermitian symmetry.
    """
    if gens.params.include_virtual:
        raise ValueError("kernel extraction uses the intracavity-only generator")
    dim = rho0.layout.total_dim
    if dim > MASTER_DIM_GUARD:
        raise DimensionGuardError(
            f"total_dim {dim} exceeds {MASTER_DIM_GUARD}; reduce the kernel system"
        )
    gamma = gens.params.gammas[mode]
    a_mat, jump_mats = gens.master_pieces()
    b = gens._b_cav[mode]
    b_dag = b.conjugate().transpose().tocsr()

    def rhs(t, y):
        return _liouvillian_rhs(a_mat, jump_mats, y.reshape(dim, dim)).ravel()

    n = len(kernel_times)
    kern = np.zeros((n, n), dtype=np.complex128)
    rho = rho0.matrix.astype(np.complex128).copy()
    for i in range(n):
        if i > 0:
            sol = solve_ivp(rhs, (kernel_times[i - 1], kernel_times[i]), rho.ravel(),
                            method="RK45", rtol=rtol, atol=atol)
            rho = sol.y[:, -1].reshape(dim, dim)
            rho = 0.5 * (rho + rho.conj().T)
        sigma = b @ rho
        kern[i, i] = gamma * np.trace(b_dag @ sigma)
        if i + 1 < n:
            sol = solve_ivp(rhs, (kernel_times[i], kernel_times[-1]), sigma.ravel(),
                            method="RK45", rtol=rtol, atol=atol,
                            t_eval=kernel_times[i + 1:])
            for jj in range(sol.y.shape[1]):
                sig = sol.y[:, jj].reshape(dim, dim)
                kern[i, i + 1 + jj] = gamma * np.trace(b_dag @ sig)
    # spec orientation: K[i][j] = gamma <b^dag(t_j) b(t_i)> for t_j >= t_i
    kern = kern + np.triu(kern, 1).conj().T
    out = CorrelationKernel(np.asarray(kernel_times, dtype=float), kern, mode, gamma)
    out.validate()
    return out
