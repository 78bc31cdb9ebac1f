"""Truncated multimode bosonic Fock space: layouts, states, sparse operators.

Basis ordering is row-major over the mode list (mode 0 varies slowest), so a
flat index i corresponds to occupations ``np.unravel_index(i, dims)``.  All
operators carry the layout they were built for; mixing layouts raises
:class:`LayoutError`.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

# Policy thresholds shared across the package.
TOP_LEVEL_TOL = 1e-3      # max tolerated population of the highest kept Fock level
NORM_TOL = 1e-12          # |norm^2 - 1| after an explicit normalization
HERMITICITY_TOL = 1e-10   # max element |rho - rho^dag|
TRACE_TOL = 1e-8
EIGEN_FLOOR = -1e-8       # smallest admissible density-operator eigenvalue
_EIGEN_CHECK_MAX_DIM = 512  # full spectral check only below this size (O(d^3))

SNAPSHOT_MAGIC = b"FOCKSNP1"
SNAPSHOT_VERSION = 1


class LayoutError(ValueError):
    """Mode layouts of the operands do not match, or a mode index is invalid."""


@dataclass(frozen=True)
class ModeLayout:
    """Per-mode truncation dimensions of the tensor-product Fock space."""

    dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        if not dims or any(d < 2 for d in dims):
            raise LayoutError(f"every mode needs >= 2 levels, got {dims}")

    @property
    def n_modes(self) -> int:
        return len(self.dims)

    @cached_property
    def total_dim(self) -> int:
        return int(np.prod(self.dims))

    @cached_property
    def strides(self) -> tuple[int, ...]:
        """Row-major flat-index stride of each mode."""
        out = []
        acc = 1
        for d in reversed(self.dims):
            out.append(acc)
            acc *= d
        return tuple(reversed(out))

    def flat_index(self, occupations) -> int:
        return int(np.ravel_multi_index(tuple(occupations), self.dims))

    def multi_index(self, flat: int) -> tuple[int, ...]:
        return tuple(int(x) for x in np.unravel_index(flat, self.dims))

    @cached_property
    def _occupation_table(self) -> np.ndarray:
        # (n_modes, total_dim) int array; row m holds the occupation of mode m.
        return np.array(np.unravel_index(np.arange(self.total_dim), self.dims))

    def occupations(self, mode: int) -> np.ndarray:
        """Occupation of ``mode`` for every flat basis index."""
        self._check_mode(mode)
        return self._occupation_table[mode]

    def _check_mode(self, mode: int):
        if not 0 <= mode < self.n_modes:
            raise LayoutError(f"mode {mode} out of range for {self.n_modes} modes")


def _check_same_layout(a, b):
    if a.layout != b.layout:
        raise LayoutError(f"layout mismatch: {a.layout.dims} vs {b.layout.dims}")


class SparseOperator:
    """Complex sparse matrix tagged with the mode layout it acts on."""

    def __init__(self, layout: ModeLayout, mat):
        mat = sp.csr_matrix(mat, dtype=np.complex128)
        if mat.shape != (layout.total_dim, layout.total_dim):
            raise LayoutError(
                f"matrix shape {mat.shape} does not match total_dim {layout.total_dim}"
            )
        mat.sum_duplicates()
        self.layout = layout
        self.mat = mat

    # Small algebra surface so generator assembly reads like the formulas.
    def __add__(self, other):
        _check_same_layout(self, other)
        return SparseOperator(self.layout, self.mat + other.mat)

    def __sub__(self, other):
        _check_same_layout(self, other)
        return SparseOperator(self.layout, self.mat - other.mat)

    def __neg__(self):
        return SparseOperator(self.layout, -self.mat)

    def __mul__(self, scalar):
        return SparseOperator(self.layout, self.mat * scalar)

    __rmul__ = __mul__

    def __matmul__(self, other):
        if isinstance(other, SparseOperator):
            _check_same_layout(self, other)
            return SparseOperator(self.layout, self.mat @ other.mat)
        return self.mat @ other

    def dag(self) -> "SparseOperator":
        return SparseOperator(self.layout, self.mat.conjugate().transpose())

    def to_dense(self) -> np.ndarray:
        return self.mat.toarray()

    @property
    def nnz(self) -> int:
        return self.mat.nnz

    def hermiticity_error(self) -> float:
        d = self.mat - self.mat.conjugate().transpose()
        return 0.0 if d.nnz == 0 else float(np.abs(d.data).max())


class StateVector:
    """Pure state over the truncated basis; amplitudes are single-owner mutable."""

    def __init__(self, layout: ModeLayout, amplitudes, meta: dict | None = None):
        amps = np.asarray(amplitudes, dtype=np.complex128)
        if amps.shape != (layout.total_dim,):
            raise LayoutError(
                f"amplitude length {amps.shape} does not match total_dim {layout.total_dim}"
            )
        self.layout = layout
        self.amplitudes = amps
        self.meta = dict(meta or {})

    @property
    def norm_sq(self) -> float:
        return float(np.real(np.vdot(self.amplitudes, self.amplitudes)))

    def normalize(self) -> "StateVector":
        n2 = self.norm_sq
        if n2 <= 0.0:
            raise ValueError("cannot normalize a zero state")
        self.amplitudes /= np.sqrt(n2)
        return self

    def copy(self) -> "StateVector":
        return StateVector(self.layout, self.amplitudes.copy(), self.meta)

    def density_operator(self) -> "DensityOperator":
        psi = self.amplitudes / np.sqrt(self.norm_sq)
        return DensityOperator(self.layout, np.outer(psi, psi.conjugate()))

    def top_level_populations(self) -> np.ndarray:
        """Per-mode population of the highest kept level n = d - 1."""
        p = np.abs(self.amplitudes) ** 2
        p /= p.sum()
        out = np.empty(self.layout.n_modes)
        for m, d in enumerate(self.layout.dims):
            out[m] = p[self.layout.occupations(m) == d - 1].sum()
        return out


class DensityOperator:
    """Hermitian, unit-trace, positive matrix over the truncated basis."""

    def __init__(self, layout: ModeLayout, matrix, validate: bool = True):
        mat = np.asarray(matrix, dtype=np.complex128)
        if mat.shape != (layout.total_dim, layout.total_dim):
            raise LayoutError(
                f"matrix shape {mat.shape} does not match total_dim {layout.total_dim}"
            )
        self.layout = layout
        self.matrix = mat
        if validate:
            self.validate()

    def validate(self, strict: bool = False):
        """Check hermiticity, trace and (for small dims or strict=True) positivity."""
        herm = np.abs(self.matrix - self.matrix.conjugate().T).max()
        if herm > HERMITICITY_TOL:
            raise ValueError(f"density operator not Hermitian: max deviation {herm:.3e}")
        tr = self.trace()
        if abs(tr - 1.0) > TRACE_TOL:
            raise ValueError(f"density operator trace {tr} deviates from 1")
        if strict or self.layout.total_dim <= _EIGEN_CHECK_MAX_DIM:
            lo = float(np.linalg.eigvalsh(self.matrix)[0])
            if lo < EIGEN_FLOOR:
                raise ValueError(f"density operator has negative eigenvalue {lo:.3e}")

    def trace(self) -> float:
        return float(np.real(np.trace(self.matrix)))

    def copy(self) -> "DensityOperator":
        return DensityOperator(self.layout, self.matrix.copy(), validate=False)

    def top_level_populations(self) -> np.ndarray:
        p = np.real(np.diag(self.matrix))
        p = p / p.sum()
        out = np.empty(self.layout.n_modes)
        for m, d in enumerate(self.layout.dims):
            out[m] = p[self.layout.occupations(m) == d - 1].sum()
        return out


# ---------------------------------------------------------------------------
# Operator construction


def _single_mode_ladder(d: int, kind: str) -> sp.csr_matrix:
    if kind == "lower":
        return sp.diags(np.sqrt(np.arange(1, d)), 1, format="csr", dtype=np.complex128)
    if kind == "raise":
        return sp.diags(np.sqrt(np.arange(1, d)), -1, format="csr", dtype=np.complex128)
    if kind == "number":
        return sp.diags(np.arange(d, dtype=float), 0, format="csr", dtype=np.complex128)
    raise ValueError(f"unknown ladder kind {kind!r}")


def make_ladder(layout: ModeLayout, mode: int, kind: str) -> SparseOperator:
    """Single-mode ladder operator embedded with identities on the other modes.

    Parameters
    ----------
    layout : ModeLayout
    mode : int
        Which tensor factor the operator acts on.
    kind : {"lower", "raise", "number"}
        ``lower`` maps ``|n> -> sqrt(n)|n-1>`` in the truncated basis.
    """
    layout._check_mode(mode)
    op = _single_mode_ladder(layout.dims[mode], kind)
    left = int(np.prod(layout.dims[:mode], dtype=np.int64)) if mode else 1
    right = int(np.prod(layout.dims[mode + 1:], dtype=np.int64)) if mode + 1 < layout.n_modes else 1
    mat = op
    if left > 1:
        mat = sp.kron(sp.identity(left, format="csr"), mat, format="csr")
    if right > 1:
        mat = sp.kron(mat, sp.identity(right, format="csr"), format="csr")
    return SparseOperator(layout, mat)


def identity_op(layout: ModeLayout) -> SparseOperator:
    return SparseOperator(layout, sp.identity(layout.total_dim, format="csr"))


def fock_state(layout: ModeLayout, occupations) -> StateVector:
    """Basis state |n_0 n_1 ...>."""
    occupations = tuple(occupations)
    if len(occupations) != layout.n_modes:
        raise LayoutError("occupation list length does not match mode count")
    for n, d in zip(occupations, layout.dims):
        if not 0 <= n < d:
            raise LayoutError(f"occupation {n} outside truncation {d}")
    amps = np.zeros(layout.total_dim, dtype=np.complex128)
    amps[layout.flat_index(occupations)] = 1.0
    return StateVector(layout, amps)


def vacuum_state(layout: ModeLayout) -> StateVector:
    return fock_state(layout, (0,) * layout.n_modes)


def coherent_state(layout: ModeLayout, betas) -> StateVector:
    """Product of truncated coherent states, renormalized to unit norm.

    A mode with ``|beta|^2`` within 3 of the truncation edge ``d - 1`` is
    flagged as truncation-unsafe in ``state.meta["truncation_unsafe_modes"]``.
    """
    betas = np.asarray(betas, dtype=np.complex128)
    if betas.shape != (layout.n_modes,):
        raise LayoutError("need one amplitude per mode")
    unsafe = []
    factors = []
    for m, (beta, d) in enumerate(zip(betas, layout.dims)):
        if abs(beta) ** 2 >= d - 1 - 3:
            unsafe.append(m)
        n = np.arange(d)
        log_fact = np.cumsum(np.concatenate(([0.0], np.log(np.arange(1, d)))))
        amp = np.exp(-0.5 * abs(beta) ** 2 - 0.5 * log_fact) * beta ** n
        factors.append(amp)
    amps = factors[0]
    for f in factors[1:]:
        amps = np.kron(amps, f)
    state = StateVector(layout, amps)
    state.normalize()
    if unsafe:
        state.meta["truncation_unsafe_modes"] = unsafe
    return state


# ---------------------------------------------------------------------------
# Expectation values and reductions


def expectation(state, op: SparseOperator) -> complex:
    """<psi|O|psi>/<psi|psi> for a StateVector, Tr[O rho] for a DensityOperator."""
    _check_same_layout(state, op)
    if isinstance(state, StateVector):
        return complex(np.vdot(state.amplitudes, op.mat @ state.amplitudes) / state.norm_sq)
    if isinstance(state, DensityOperator):
        # Tr[O rho] = sum_ij O_ij rho_ji, evaluated on the nnz of O only.
        return complex(op.mat.multiply(state.matrix.T).sum())
    raise TypeError(f"unsupported state type {type(state)!r}")


def partial_trace(rho: DensityOperator, keep) -> DensityOperator:
    """Reduce a density operator to the modes in ``keep`` (indices, any order)."""
    keep = sorted(set(int(k) for k in keep))
    if not keep:
        raise LayoutError("keep set must be nonempty")
    for k in keep:
        rho.layout._check_mode(k)
    n = rho.layout.n_modes
    dims = rho.layout.dims
    tensor = rho.matrix.reshape(dims + dims)
    letters = "abcdefghijkl"
    bra = []
    ket = []
    out = []
    next_letter = 0
    for m in range(n):
        if m in keep:
            bra.append(letters[next_letter])
            ket.append(letters[next_letter + 1])
            out.append((letters[next_letter], letters[next_letter + 1]))
            next_letter += 2
        else:
            bra.append(letters[next_letter])
            ket.append(letters[next_letter])
            next_letter += 1
    subscript = "".join(bra) + "".join(ket) + "->" + "".join(x for pair in out for x in pair)
    # interleaved (bra, ket) output axes, regrouped to (bra..., ket...)
    reduced = np.einsum(subscript, tensor)
    kept_dims = tuple(dims[m] for m in keep)
    axes = list(range(0, 2 * len(keep), 2)) + list(range(1, 2 * len(keep), 2))
    reduced = reduced.transpose(axes).reshape(
        int(np.prod(kept_dims)), int(np.prod(kept_dims))
    )
    return DensityOperator(ModeLayout(kept_dims), reduced, validate=False)


def partial_trace_pure(layout: ModeLayout, amplitudes: np.ndarray, keep) -> np.ndarray:
    """Reduced density matrix of a pure state, without building |psi><psi|."""
    keep = sorted(set(int(k) for k in keep))
    if not keep:
        raise LayoutError("keep set must be nonempty")
    dims = layout.dims
    psi = np.asarray(amplitudes).reshape(dims)
    order = keep + [m for m in range(layout.n_modes) if m not in keep]
    psi = np.transpose(psi, order)
    dk = int(np.prod([dims[m] for m in keep]))
    a = psi.reshape(dk, -1)
    return a @ a.conjugate().T


# ---------------------------------------------------------------------------
# Fast expectation forms used by the trajectory engine

class DiagonalObservable:
    """Operator diagonal in the Fock basis, stored as its diagonal vector."""

    def __init__(self, layout: ModeLayout, diag: np.ndarray):
        self.layout = layout
        self.diag = np.asarray(diag, dtype=float)

    def expect(self, psi: np.ndarray) -> complex:
        p = np.real(psi) ** 2 + np.imag(psi) ** 2
        return complex(np.dot(self.diag, p))

    def expect_rho(self, rho: np.ndarray) -> complex:
        return complex(np.dot(self.diag, np.real(np.diag(rho))))

    def to_sparse(self) -> SparseOperator:
        return SparseOperator(self.layout, sp.diags(self.diag, 0))


class MonomialObservable:
    """Product of per-mode lowering powers: O = sum_i c_i |i - lag><i|.

    Any operator ``prod_j a_j^{n_j}`` shifts every flat index by the constant
    ``lag = sum_j n_j * stride_j``, with a real coefficient vector c (zero
    where some occupation is below its power), so the expectation reduces to
    one lag-offset correlation of the amplitude array.
    """

    def __init__(self, layout: ModeLayout, lag: int, coeff: np.ndarray):
        self.layout = layout
        self.lag = int(lag)
        self.coeff = np.asarray(coeff, dtype=float)

    def expect(self, psi: np.ndarray) -> complex:
        lag = self.lag
        if lag == 0:
            return complex(np.vdot(psi, self.coeff * psi))
        return complex(np.vdot(psi[:-lag], self.coeff[lag:] * psi[lag:]))

    def expect_rho(self, rho: np.ndarray) -> complex:
        lag = self.lag
        idx = np.arange(lag, self.layout.total_dim)
        return complex(np.dot(self.coeff[lag:], rho[idx, idx - lag]))

    def to_sparse(self) -> SparseOperator:
        n = self.layout.total_dim
        rows = np.arange(self.lag, n) - self.lag
        cols = np.arange(self.lag, n)
        vals = self.coeff[self.lag:]
        keep = vals != 0.0
        mat = sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(n, n))
        return SparseOperator(self.layout, mat)


class MatrixObservable:
    """Fallback wrapper for an arbitrary sparse operator."""

    def __init__(self, op: SparseOperator):
        self.layout = op.layout
        self.op = op

    def expect(self, psi: np.ndarray) -> complex:
        return complex(np.vdot(psi, self.op.mat @ psi))

    def expect_rho(self, rho: np.ndarray) -> complex:
        return complex(self.op.mat.multiply(rho.T).sum())

    def to_sparse(self) -> SparseOperator:
        return self.op


def lowering_monomial(layout: ModeLayout, powers: dict[int, int]) -> MonomialObservable:
    """Build ``prod_j a_j^{n_j}`` (truncated) as a MonomialObservable."""
    lag = 0
    coeff = np.ones(layout.total_dim)
    for mode, p in powers.items():
        layout._check_mode(mode)
        if p < 0:
            raise ValueError("powers must be nonnegative")
        occ = layout.occupations(mode)
        fall = np.ones(layout.total_dim)
        for r in range(p):
            fall *= np.maximum(occ - r, 0)
        coeff *= np.sqrt(fall)
        lag += p * layout.strides[mode]
    return MonomialObservable(layout, lag, coeff)


# ---------------------------------------------------------------------------
# Binary state snapshots (documented in README: byte-exact format)


def state_to_bytes(state: StateVector) -> bytes:
    head = SNAPSHOT_MAGIC + struct.pack(
        "<HH", SNAPSHOT_VERSION, state.layout.n_modes
    )
    head += struct.pack(f"<{state.layout.n_modes}I", *state.layout.dims)
    interleaved = np.empty(2 * state.layout.total_dim, dtype="<f8")
    interleaved[0::2] = np.real(state.amplitudes)
    interleaved[1::2] = np.imag(state.amplitudes)
    return head + interleaved.tobytes()


def state_from_bytes(buf: bytes) -> StateVector:
    if buf[:8] != SNAPSHOT_MAGIC:
        raise ValueError("not a state snapshot (bad magic)")
    version, n_modes = struct.unpack_from("<HH", buf, 8)
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    dims = struct.unpack_from(f"<{n_modes}I", buf, 12)
    layout = ModeLayout(dims)
    off = 12 + 4 * n_modes
    raw = np.frombuffer(buf, dtype="<f8", offset=off, count=2 * layout.total_dim)
    return StateVector(layout, raw[0::2] + 1j * raw[1::2])


def save_state(path, state: StateVector):
    with open(path, "wb") as fh:
        fh.write(state_to_bytes(state))


def load_state(path) -> StateVector:
    with open(path, "rb") as fh:
        return state_from_bytes(fh.read())


def state_checksum(state: StateVector) -> str:
    return hashlib.sha256(state_to_bytes(state)).hexdigest()
