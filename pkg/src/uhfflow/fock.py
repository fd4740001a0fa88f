"""Flow matrix elements between exponential vectors on truncated bases.

The quantum stochastic flow j_t driven by one creation/annihilation pair
per (translate, Kraus member) never needs to be built as an operator:
between exponential vectors its matrix elements

    F_t(y) = < u e(f), j_t(y) v e(g) >

satisfy a closed linear ODE on any operator basis stable under the
structure maps,

    dF_t(y)/dt = sum_j [ g_j(t) F_t(delta_j^dag y)
                       + conj(f_j(t)) F_t(delta_j y) ]  + F_t(Lhat y),

with piecewise-constant coefficients for step test functions, so each
cell is solved by a matrix exponential.  The pair elements

    G_t(x, y) = < j_t(x*) u e(f), j_t(y) v e(g) >

satisfy the doubled system carrying one quantum Ito correction term
sum_j G(delta_j^dag x, delta_j y); the homomorphism claim is exactly
F_t(xy) = G_t(x, y).  Truncation to a finite site window drops operator
mass outside it; that l1 mass is recorded per map and drives every error
estimate reported here.
"""

from __future__ import annotations

import cmath
import itertools
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import scipy.sparse
from scipy.integrate import cumulative_simpson as _cumulative_simpson_real
from scipy.sparse.linalg import expm_multiply


def _cumulative_simpson(y: np.ndarray, dx: float, axis: int = 0) -> np.ndarray:
    """Complex-safe cumulative Simpson (scipy's casts to real)."""
    re = _cumulative_simpson_real(y.real, dx=dx, axis=axis, initial=0.0)
    im = _cumulative_simpson_real(y.imag, dx=dx, axis=axis, initial=0.0)
    return re + 1j * im

from . import dense, lindblad as _lb
from .algebra import (
    AlgebraParams,
    LocalOperator,
    Site,
    WeylLabel,
    c_const,
    gns_inner,
    gns_norm,
    theta,
    weyl_mul,
)
from .errors import SizeGuardError, WindowError

DEFAULT_MAX_DIM = 4096
MAX_PAIR_DIM = 70_000

ModeKey = tuple[Site, int]  # (lattice site of the translate, Kraus member id)


# -- test functions -----------------------------------------------------------


@dataclass(frozen=True)
class StepFunction:
    """Piecewise-constant complex function on [0, t_max), zero beyond."""

    t_max: float
    values: tuple[complex, ...]

    def __post_init__(self):
        if self.t_max <= 0 or not self.values:
            raise ValueError("step function needs t_max > 0 and at least one cell")
        object.__setattr__(self, "values", tuple(complex(v) for v in self.values))

    @property
    def cells(self) -> int:
        return len(self.values)

    @property
    def dt(self) -> float:
        return self.t_max / self.cells

    def value_at(self, t: float) -> complex:
        if t < 0 or t >= self.t_max:
            return 0j
        return self.values[min(int(t / self.dt), self.cells - 1)]

    def l2_sq(self) -> float:
        return sum(abs(v) ** 2 for v in self.values) * self.dt


def _norm_key(key, d: int) -> ModeKey:
    site, member = key
    site = tuple(int(c) for c in site)
    if len(site) != d:
        raise ValueError(f"mode site {site} does not have {d} coordinates")
    return site, int(member)


@dataclass(frozen=True)
class TestFunction:
    """Finitely many noise modes, each a step function on a shared grid."""

    t_max: float
    cells: int
    modes: tuple[tuple[ModeKey, tuple[complex, ...]], ...]
    d: int = 1

    @staticmethod
    def build(t_max: float, cells: int, modes: dict, d: int = 1) -> "TestFunction":
        if t_max <= 0 or cells < 1:
            raise ValueError("need t_max > 0 and cells >= 1")
        packed = []
        for key, vals in modes.items():
            vals = tuple(complex(v) for v in vals)
            if len(vals) != cells:
                raise ValueError(f"mode {key}: expected {cells} cell values, got {len(vals)}")
            packed.append((_norm_key(key, d), vals))
        return TestFunction(t_max, cells, tuple(sorted(packed)), d)

    @staticmethod
    def zero(t_max: float = 1.0, cells: int = 1, d: int = 1) -> "TestFunction":
        return TestFunction(t_max, cells, (), d)

    @property
    def dt(self) -> float:
        return self.t_max / self.cells

    def mode_keys(self) -> tuple[ModeKey, ...]:
        return tuple(k for k, _ in self.modes)

    def mode_values(self, key: ModeKey) -> tuple[complex, ...]:
        for k, vals in self.modes:
            if k == key:
                return vals
        return (0j,) * self.cells

    def cell_value(self, key: ModeKey, cell: int | None) -> complex:
        if cell is None:
            return 0j
        return self.mode_values(key)[cell]

    def value_at(self, key: ModeKey, t: float) -> complex:
        if t < 0 or t >= self.t_max:
            return 0j
        return self.cell_value(key, min(int(t / self.dt), self.cells - 1))

    def norm_sq_cell(self, cell: int) -> float:
        return sum(abs(vals[cell]) ** 2 for _k, vals in self.modes)

    def sup_norm(self) -> float:
        if not self.modes:
            return 0.0
        return max(math.sqrt(self.norm_sq_cell(i)) for i in range(self.cells))

    def l2_sq(self) -> float:
        return sum(abs(v) ** 2 for _k, vals in self.modes for v in vals) * self.dt

    def gamma(self, t0: float) -> float:
        """gamma_f(t0) = integral_0^t0 (1 + ||f(s)||^2) ds, exact on the grid."""
        if t0 < 0:
            raise ValueError("t0 must be nonnegative")
        acc = t0
        for i in range(self.cells):
            lo, hi = i * self.dt, (i + 1) * self.dt
            overlap = max(0.0, min(hi, t0) - lo)
            if overlap > 0:
                acc += overlap * self.norm_sq_cell(i)
        return acc

    def inner(self, other: "TestFunction") -> complex:
        """<f, g> = sum_k integral conj(f_k) g_k, conjugate-linear on the left."""
        if self.modes and other.modes and (self.t_max, self.cells) != (other.t_max, other.cells):
            raise ValueError("test functions use different step grids")
        acc = 0j
        keys = set(self.mode_keys()) & set(other.mode_keys())
        for key in keys:
            a = self.mode_values(key)
            b = other.mode_values(key)
            acc += sum(x.conjugate() * y for x, y in zip(a, b)) * self.dt
        return acc

    def shifted(self, j) -> "TestFunction":
        """(f o shift_j)_k = f_{k+j}: relabel mode sites by -j."""
        j = tuple(int(c) for c in j)
        moved = tuple(
            sorted(((tuple(s - dj for s, dj in zip(site, j)), m), vals)
                   for (site, m), vals in self.modes)
        )
        return TestFunction(self.t_max, self.cells, moved, self.d)

    def restrict_sites(self, sites) -> "TestFunction":
        allowed = {tuple(s) for s in sites}
        kept = tuple((k, v) for k, v in self.modes if k[0] in allowed)
        return TestFunction(self.t_max, self.cells, kept, self.d)

    def mode_sites(self) -> set[Site]:
        return {site for (site, _m) in self.mode_keys()}


def exp_inner(f: TestFunction, g: TestFunction) -> complex:
    """<e(f), e(g)> = exp(<f, g>) for step test functions."""
    return cmath.exp(f.inner(g))


@dataclass(frozen=True)
class ExponentialVectorSpec:
    """The vector u e(f) in h_0 (x) Gamma."""

    u: LocalOperator
    f: TestFunction

    def norm(self) -> float:
        return gns_norm(self.u) * math.exp(0.5 * self.f.l2_sq())


# -- generator systems ---------------------------------------------------------


@dataclass
class FlowGeneratorSystem:
    """Truncated-basis matrices of the structure maps on a site window.

    Matrices are stored transposed (ready to act on matrix-element
    vectors); ``leak`` holds the per-column l1 coefficient mass each map
    pushes outside the window.
    """

    lindbladian: "_lb.Lindbladian"
    sites: tuple[Site, ...]
    basis: list[WeylLabel]
    index: dict[WeylLabel, int]
    noise: list[ModeKey]
    delta_t: dict[ModeKey, scipy.sparse.csr_matrix]
    delta_dag_t: dict[ModeKey, scipy.sparse.csr_matrix]
    lhat_t: scipy.sparse.csr_matrix
    leak: dict[object, np.ndarray]

    @property
    def params(self) -> AlgebraParams:
        return self.lindbladian.params

    @property
    def dim(self) -> int:
        return len(self.basis)

    def leak_max(self, key) -> float:
        return float(self.leak[key].max()) if self.dim else 0.0

    def map_l1(self, key) -> float:
        mat = self.lhat_t if key == "lhat" else (
            self.delta_t[key] if key in self.delta_t else self.delta_dag_t[key]
        )
        if mat.nnz == 0:
            return 0.0
        return float(np.abs(mat).sum(axis=1).max())

    def leak_free(self) -> bool:
        return all(arr.max() == 0.0 for arr in self.leak.values()) if self.leak else True


def _map_to_matrix(params, basis, index, allowed, fn):
    dim = len(basis)
    rows, cols, vals = [], [], []
    leak = np.zeros(dim)
    for col, lab in enumerate(basis):
        img = fn(LocalOperator.weyl(params, lab))
        for out_lab, c in img.items():
            if set(out_lab.support) <= allowed:
                rows.append(index[out_lab])
                cols.append(col)
                vals.append(c)
            else:
                leak[col] += abs(c)
    mat = scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(dim, dim), dtype=complex)
    return mat, leak


def build_generator_system(L: "_lb.Lindbladian", window_sites, f: TestFunction | None = None,
                           g: TestFunction | None = None,
                           max_dim: int = DEFAULT_MAX_DIM) -> FlowGeneratorSystem:
    """Assemble delta / delta^dag / Lhat matrices over the window basis.

    One noise index per (translate, Kraus member) with nonzero action on
    the window.  ``f`` and ``g`` are accepted for interface symmetry; the
    noise set does not depend on them (vacuum modes still matter through
    the Ito correction of the pair system).
    """
    del f, g
    sites = tuple(tuple(s) for s in window_sites)
    if not sites:
        raise WindowError("window must be nonempty")
    dim = L.params.N ** (2 * len(sites))
    if dim > max_dim:
        raise SizeGuardError(f"window basis dimension {dim} exceeds guard {max_dim}")
    basis = dense.window_basis(L.params, sites)
    index = {lab: i for i, lab in enumerate(basis)}
    allowed = set(sites)

    members = L.base_members()
    keys: list[ModeKey] = []
    for member_id, op in enumerate(members):
        msupp = op.support()
        if not msupp:
            continue
        ks = {tuple(w[c] - b[c] for c in range(L.params.d)) for w in sites for b in msupp}
        keys.extend((k, member_id) for k in sorted(ks))
    keys.sort()

    delta_t, delta_dag_t, leak = {}, {}, {}
    for key in keys:
        k, member_id = key
        m_k = members[member_id].translate(k)
        m_k_adj = m_k.adjoint()
        mat_d, leak_d = _map_to_matrix(
            L.params, basis, index, allowed, lambda y: y * m_k - m_k * y
        )
        mat_dd, leak_dd = _map_to_matrix(
            L.params, basis, index, allowed, lambda y: m_k_adj * y - y * m_k_adj
        )
        delta_t[key] = mat_d.transpose().tocsr()
        delta_dag_t[key] = mat_dd.transpose().tocsr()
        leak[("d", key)] = leak_d
        leak[("dd", key)] = leak_dd

    lhat, leak_l = _map_to_matrix(L.params, basis, index, allowed, L.apply)
    leak["lhat"] = leak_l

    return FlowGeneratorSystem(
        lindbladian=L,
        sites=sites,
        basis=basis,
        index=index,
        noise=keys,
        delta_t=delta_t,
        delta_dag_t=delta_dag_t,
        lhat_t=lhat.transpose().tocsr(),
        leak=leak,
    )


# -- trajectories ---------------------------------------------------------------


@dataclass
class MatrixElementTrajectory:
    """F_t(U_b) for every window basis label, on a time grid."""

    grid: np.ndarray
    basis: list[WeylLabel]
    index: dict[WeylLabel, int]
    F: np.ndarray  # (T, dim)
    error_estimate: np.ndarray  # (T,)
    method: str

    def of_label(self, lab: WeylLabel) -> np.ndarray:
        try:
            return self.F[:, self.index[lab]]
        except KeyError:
            raise WindowError(f"label {lab} outside the trajectory basis") from None

    def of_operator(self, x: LocalOperator) -> np.ndarray:
        out = np.zeros(len(self.grid), dtype=complex)
        for lab, c in x.items():
            out += c * self.of_label(lab)
        return out


@dataclass
class PairTrajectory:
    """G_t(U_a, U_b) for every window basis pair, on a time grid."""

    grid: np.ndarray
    basis: list[WeylLabel]
    index: dict[WeylLabel, int]
    G: np.ndarray  # (T, dim, dim)
    error_estimate: np.ndarray
    consistent: bool
    consistency_violation: float

    def of_labels(self, a: WeylLabel, b: WeylLabel) -> np.ndarray:
        return self.G[:, self.index[a], self.index[b]]

    def of_pair(self, x: LocalOperator, y: LocalOperator) -> np.ndarray:
        cx = dense.coefficient_vector(x, self.index)
        cy = dense.coefficient_vector(y, self.index)
        return np.einsum("tab,a,b->t", self.G, cx, cy)


# -- shared solving machinery ----------------------------------------------------


def _validate_grid(t_grid) -> np.ndarray:
    grid = np.asarray(t_grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("time grid must be a nonempty 1-D array")
    if grid[0] < 0 or np.any(np.diff(grid) < 0):
        raise ValueError("time grid must be nonnegative and ascending")
    return grid


def _harmonize(f: TestFunction | None, g: TestFunction | None) -> tuple[TestFunction, TestFunction]:
    f = f if f is not None else TestFunction.zero()
    g = g if g is not None else TestFunction.zero()
    if f.modes and g.modes:
        if (f.t_max, f.cells) != (g.t_max, g.cells):
            raise ValueError("f and g must share the step grid")
        return f, g
    if f.modes and not g.modes:
        return f, TestFunction.zero(f.t_max, f.cells, f.d)
    if g.modes and not f.modes:
        return TestFunction.zero(g.t_max, g.cells, g.d), g
    return f, g


def _breakpoints(grid: np.ndarray, f: TestFunction) -> list[float]:
    pts = {0.0}
    pts.update(float(t) for t in grid)
    if f.modes:
        t_end = float(grid[-1])
        for i in range(1, f.cells + 1):
            e = i * f.dt
            if 0.0 < e < t_end:
                pts.add(e)
        if 0.0 < f.t_max < t_end:
            pts.add(float(f.t_max))
    return sorted(pts)


def _cell_of(t: float, f: TestFunction) -> int | None:
    if t < 0 or t >= f.t_max:
        return None
    return min(int(t / f.dt), f.cells - 1)


def _initial_vector(sys: FlowGeneratorSystem, u, v, f, g) -> np.ndarray:
    scale = exp_inner(f, g)
    F0 = np.empty(sys.dim, dtype=complex)
    for i, lab in enumerate(sys.basis):
        F0[i] = gns_inner(u, LocalOperator.weyl(sys.params, lab) * v) * scale
    return F0


def _step(A, vec, dt, solver, substeps):
    if dt <= 0:
        return vec
    if solver == "expm":
        return expm_multiply(A * dt, vec)
    if solver == "rk4":
        h = dt / substeps
        for _ in range(substeps):
            k1 = A @ vec
            k2 = A @ (vec + 0.5 * h * k1)
            k3 = A @ (vec + 0.5 * h * k2)
            k4 = A @ (vec + h * k3)
            vec = vec + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        return vec
    raise ValueError(f"unknown solver {solver!r}")


class _SingleAssembly:
    """Per-cell generator matrix and leak rate for the F system."""

    def __init__(self, sys: FlowGeneratorSystem, f: TestFunction, g: TestFunction):
        self.sys = sys
        self.f = f
        self.g = g
        self._cache: dict = {}

    def matrix(self, t: float):
        cell = _cell_of(t, self.f)
        if cell not in self._cache:
            A = self.sys.lhat_t.copy()
            for key in self.sys.noise:
                gv = self.g.cell_value(key, cell)
                fv = self.f.cell_value(key, cell)
                if gv != 0j:
                    A = A + gv * self.sys.delta_dag_t[key]
                if fv != 0j:
                    A = A + fv.conjugate() * self.sys.delta_t[key]
            self._cache[cell] = A.tocsr()
        return self._cache[cell]

    def leak_rate(self, t: float) -> float:
        cell = _cell_of(t, self.f)
        rate = self.sys.leak_max("lhat")
        for key in self.sys.noise:
            rate += abs(self.g.cell_value(key, cell)) * self.sys.leak_max(("dd", key))
            rate += abs(self.f.cell_value(key, cell)) * self.sys.leak_max(("d", key))
        return rate


class _PairAssembly:
    """Per-cell generator matrix and leak rate for the doubled G system."""

    def __init__(self, sys: FlowGeneratorSystem, f: TestFunction, g: TestFunction):
        self.sys = sys
        self.f = f
        self.g = g
        n = sys.dim
        eye = scipy.sparse.identity(n, dtype=complex, format="csr")
        static = scipy.sparse.kron(sys.lhat_t, eye, format="csr")
        static = static + scipy.sparse.kron(eye, sys.lhat_t, format="csr")
        for key in sys.noise:
            static = static + scipy.sparse.kron(
                sys.delta_dag_t[key], sys.delta_t[key], format="csr"
            )
        self.static = static
        self._eye = eye
        self._drive: dict[ModeKey, tuple] = {}
        self._cache: dict = {}

    def _driving(self, key):
        if key not in self._drive:
            dT = self.sys.delta_t[key]
            ddT = self.sys.delta_dag_t[key]
            self._drive[key] = (
                scipy.sparse.kron(dT, self._eye, format="csr")
                + scipy.sparse.kron(self._eye, dT, format="csr"),
                scipy.sparse.kron(ddT, self._eye, format="csr")
                + scipy.sparse.kron(self._eye, ddT, format="csr"),
            )
        return self._drive[key]

    def matrix(self, t: float):
        cell = _cell_of(t, self.f)
        if cell not in self._cache:
            A = self.static
            for key in self.sys.noise:
                gv = self.g.cell_value(key, cell)
                fv = self.f.cell_value(key, cell)
                if gv != 0j or fv != 0j:
                    both_d, both_dd = self._driving(key)
                    if fv != 0j:
                        A = A + fv.conjugate() * both_d
                    if gv != 0j:
                        A = A + gv * both_dd
            self._cache[cell] = A.tocsr()
        return self._cache[cell]

    def leak_rate(self, t: float) -> float:
        cell = _cell_of(t, self.f)
        sys = self.sys
        rate = 2.0 * sys.leak_max("lhat")
        for key in sys.noise:
            gv = abs(self.g.cell_value(key, cell))
            fv = abs(self.f.cell_value(key, cell))
            rate += 2.0 * (gv * sys.leak_max(("dd", key)) + fv * sys.leak_max(("d", key)))
            # Ito correction term: missing flux bounded by leak x map mass.
            ld, ldd = sys.leak_max(("d", key)), sys.leak_max(("dd", key))
            rate += ldd * sys.map_l1(key) + sys.map_l1(key) * ld + ldd * ld
        return rate


def _propagate(assembly, F0, grid, f, solver, substeps, tol, scale):
    """Walk the breakpoints, recording vectors and leak budgets at grid points."""
    bps = _breakpoints(grid, f)
    grid_list = [float(t) for t in grid]
    out = [None] * len(grid_list)
    est = np.zeros(len(grid_list))
    vec = F0.copy()
    acc_leak = 0.0
    t_cur = 0.0

    def record(t):
        for i, tg in enumerate(grid_list):
            if tg == t and out[i] is None:
                out[i] = vec.copy()
                est[i] = tol + scale * acc_leak

    record(0.0)
    for t_next in bps:
        if t_next <= t_cur:
            continue
        mid = 0.5 * (t_cur + t_next)
        A = assembly.matrix(mid)
        vec = _step(A, vec, t_next - t_cur, solver, substeps)
        acc_leak += assembly.leak_rate(mid) * (t_next - t_cur)
        t_cur = t_next
        record(t_cur)
    return np.array(out), est


# -- the flow front-ends -----------------------------------------------------------


def flow_element(sys: FlowGeneratorSystem, x: LocalOperator, u, f, v, g, t_grid,
                 method: str = "ode", solver: str = "expm", substeps: int = 16,
                 tol: float = 1e-10, picard_depth: int | None = None,
                 picard_sub: int = 64) -> MatrixElementTrajectory:
    """Solve F_t on the window basis; ``x`` fixes the support validation.

    ``ode`` advances cell by cell (matrix exponential, or fixed-substep
    RK4 when solver='rk4'); ``picard`` iterates the integral equation by
    cumulative Simpson sweeps, certified by the iteration tail bound for
    single-operator families.
    """
    grid = _validate_grid(t_grid)
    f, g = _harmonize(f, g)
    if not set(x.support()) <= set(sys.sites):
        raise WindowError(f"observable support {x.support()} outside window {sys.sites}")
    F0 = _initial_vector(sys, u, v, f, g)
    scale = gns_norm(u) * math.exp(0.5 * f.l2_sq()) * gns_norm(v) * math.exp(0.5 * g.l2_sq())
    assembly = _SingleAssembly(sys, f, g)

    if method == "ode":
        F, est = _propagate(assembly, F0, grid, f, solver, substeps, tol, scale)
        return MatrixElementTrajectory(grid, sys.basis, sys.index, F, est, f"ode/{solver}")

    if method == "picard":
        F, est = _picard_propagate(
            sys, assembly, F0, grid, f, g, x, picard_depth, picard_sub, tol, scale
        )
        return MatrixElementTrajectory(grid, sys.basis, sys.index, F, est, "picard")

    raise ValueError(f"unknown method {method!r}")


def _picard_propagate(sys, assembly, F0, grid, f, g, x, depth, sub, tol, scale):
    if sub % 2:
        sub += 1
    bps = _breakpoints(grid, f)
    if bps[-1] < float(grid[-1]):
        bps.append(float(grid[-1]))
    # Global node array; every breakpoint (hence every grid point) is a node.
    nodes = [0.0]
    pieces = []  # (start_idx, end_idx, h, A)
    for a, b in zip(bps[:-1], bps[1:]):
        if b <= a:
            continue
        start = len(nodes) - 1
        seg = np.linspace(a, b, sub + 1)
        nodes.extend(seg[1:].tolist())
        pieces.append((start, len(nodes) - 1, (b - a) / sub, assembly.matrix(0.5 * (a + b))))
    nodes = np.asarray(nodes)
    n_nodes = nodes.size

    G = np.tile(F0, (n_nodes, 1))
    max_sweeps = depth if depth is not None else 200
    increment = math.inf
    sweeps = 0
    for _ in range(max_sweeps):
        integ = np.empty_like(G)
        for start, end, _h, A in pieces:
            integ[start:end + 1] = (A @ G[start:end + 1].T).T
        cum = np.zeros_like(G)
        offset = np.zeros_like(F0)
        for start, end, h, _A in pieces:
            seg = _cumulative_simpson(integ[start:end + 1], dx=h, axis=0)
            cum[start:end + 1] = seg + offset
            offset = cum[end]
        G_new = np.tile(F0, (n_nodes, 1)) + cum
        increment = float(np.max(np.abs(G_new - G)))
        G = G_new
        sweeps += 1
        # Extra sweeps past the numerical fixed point are no-ops; the
        # certificate below is still quoted at the requested depth.
        if increment < 1e-15 * max(1.0, float(np.max(np.abs(G)))):
            break

    idx = np.searchsorted(nodes, grid)
    idx = np.clip(idx, 0, n_nodes - 1)
    for i, t in enumerate(grid):
        if abs(nodes[idx[i]] - t) > 1e-12:
            raise AssertionError("grid point missed the picard node lattice")
    F = G[idx]

    t0 = float(grid[-1]) if grid[-1] > 0 else 1.0
    certified = None
    try:
        n_cert = depth if depth is not None else sweeps
        certified = picard_tail_bound(x, g, t0, n_cert, sys.lindbladian)
    except ValueError:
        certified = None
    base = certified if certified is not None else increment
    est = np.full(len(grid), tol + scale * (base if base is not None else 0.0))
    # Leakage accrues exactly as in the ODE path.
    acc = 0.0
    bp_pairs = list(zip(bps[:-1], bps[1:]))
    for i, t in enumerate(grid):
        acc = 0.0
        for a, b in bp_pairs:
            if b <= t + 1e-15:
                acc += assembly.leak_rate(0.5 * (a + b)) * (b - a)
        est[i] += scale * acc
    return F, est


def picard_error_bound(x: LocalOperator, f: TestFunction, t0: float, n: int,
                       L: "_lb.Lindbladian") -> float:
    """Unit-normalized bound on the n-th Picard increment.

    3^n (t0 c_f)^{n/2} (1+||r||)^n (2 theta_1(r) c_x)^n / sqrt(n!), with
    c_f = 2 e^{gamma_f(t0)} (1 + ||f||_inf^2); per unit norm of the
    evolved exponential vector.  Single-operator families only.
    """
    if n < 1:
        raise ValueError("picard depth must be >= 1")
    if t0 < 0:
        raise ValueError("t0 must be nonnegative")
    r = L.single_r()
    amp = 2.0 * theta(r, 1) * c_const(x)
    if amp == 0.0 or t0 == 0.0:
        return 0.0
    cf = 2.0 * math.exp(f.gamma(t0)) * (1.0 + f.sup_norm() ** 2)
    log_b = (
        n * (math.log(3.0) + math.log1p(dense.operator_norm(r)) + math.log(amp))
        + 0.5 * n * math.log(t0 * cf)
        - 0.5 * math.lgamma(n + 1)
    )
    return math.exp(min(log_b, 700.0))


def picard_tail_bound(x: LocalOperator, f: TestFunction, t0: float, n: int,
                      L: "_lb.Lindbladian", max_terms: int = 500_000) -> float:
    """sum_{m > n} of the increment bounds; converges by the sqrt(m!) factor."""
    r = L.single_r()
    amp = 2.0 * theta(r, 1) * c_const(x)
    if amp == 0.0 or t0 == 0.0:
        return 0.0
    cf = 2.0 * math.exp(f.gamma(t0)) * (1.0 + f.sup_norm() ** 2)
    log_base = math.log(3.0) + math.log1p(dense.operator_norm(r)) + math.log(amp) \
        + 0.5 * math.log(t0 * cf)
    total = 0.0
    m = n + 1
    while m < n + max_terms:
        log_term = m * log_base - 0.5 * math.lgamma(m + 1)
        term = math.exp(min(log_term, 700.0))
        total += term
        if term < 1e-30 * max(total, 1.0) and m > n + 4:
            break
        m += 1
    return total


def smallest_certified_depth(x: LocalOperator, f: TestFunction, t0: float,
                             L: "_lb.Lindbladian", tol: float,
                             n_max: int = 100_000) -> int:
    """Smallest n whose tail bound is below tol."""
    lo, hi = 1, 2
    while picard_tail_bound(x, f, t0, hi, L) >= tol:
        hi *= 2
        if hi > n_max:
            raise SizeGuardError(f"no certified depth below {n_max}")
    while lo < hi:
        mid = (lo + hi) // 2
        if picard_tail_bound(x, f, t0, mid, L) < tol:
            hi = mid
        else:
            lo = mid + 1
    return lo


def pair_element(sys: FlowGeneratorSystem, pairs, u, f, v, g, t_grid,
                 solver: str = "expm", substeps: int = 16, tol: float = 1e-10,
                 f_trajectory: MatrixElementTrajectory | None = None) -> PairTrajectory:
    """Solve the doubled system G_t(U_a, U_b); check G(1, .) against F."""
    grid = _validate_grid(t_grid)
    f, g = _harmonize(f, g)
    n = sys.dim
    if n * n > MAX_PAIR_DIM:
        raise SizeGuardError(f"pair basis dimension {n * n} exceeds guard {MAX_PAIR_DIM}")
    if pairs is not None:
        for a, b in pairs:
            for op in (a, b):
                if not set(op.support()) <= set(sys.sites):
                    raise WindowError("pair operand support outside window")

    F0 = _initial_vector(sys, u, v, f, g)
    G0 = np.empty(n * n, dtype=complex)
    for ia, la in enumerate(sys.basis):
        base = ia * n
        for ib, lb_ in enumerate(sys.basis):
            phase, lab = weyl_mul(sys.params, la, lb_)
            G0[base + ib] = sys.params.root(phase) * F0[sys.index[lab]]

    scale = gns_norm(u) * math.exp(0.5 * f.l2_sq()) * gns_norm(v) * math.exp(0.5 * g.l2_sq())
    assembly = _PairAssembly(sys, f, g)
    Gflat, est = _propagate(assembly, G0, grid, f, solver, substeps, tol, scale)
    G = Gflat.reshape(len(grid), n, n)

    if f_trajectory is None or f_trajectory.grid.shape != grid.shape or \
            not np.allclose(f_trajectory.grid, grid):
        f_trajectory = flow_element(
            sys, LocalOperator.identity(sys.params), u, f, v, g, grid,
            solver=solver, substeps=substeps, tol=tol,
        )
    id_row = sys.index[WeylLabel.identity()]
    violation = float(np.max(np.abs(G[:, id_row, :] - f_trajectory.F)))
    consistent = violation <= 10.0 * max(tol, float(np.max(f_trajectory.error_estimate)))
    return PairTrajectory(grid, sys.basis, sys.index, G, est, consistent, violation)


class HomomorphismReport(NamedTuple):
    defect: float
    error_estimate: float
    defects: np.ndarray
    consistent: bool


def homomorphism_defect(sys: FlowGeneratorSystem, x, y, u, f, v, g, t_grid,
                        **solve_opts) -> HomomorphismReport:
    """max_t |F_t(xy) - G_t(x, y)| together with the propagated estimate."""
    grid = _validate_grid(t_grid)
    xy = x * y
    ftraj = flow_element(sys, xy, u, f, v, g, grid, **solve_opts)
    gtraj = pair_element(sys, [(x, y)], u, f, v, g, grid,
                         f_trajectory=ftraj, **solve_opts)
    D = ftraj.of_operator(xy) - gtraj.of_pair(x, y)
    est = ftraj.error_estimate + gtraj.error_estimate
    return HomomorphismReport(
        float(np.max(np.abs(D))), float(np.max(est)), np.abs(D), gtraj.consistent
    )


class ContractionReport(NamedTuple):
    lhs: float
    rhs: float
    error: float


def contraction_check(sys: FlowGeneratorSystem, x: LocalOperator, family, t: float,
                      **solve_opts) -> ContractionReport:
    """Gram form ||j_t(x) xi||^2 against ||x||^2 ||xi||^2.

    ``family`` lists (c_i, u_i, f_i) members of xi = sum c_i u_i e(f_i).
    The left side is assembled from F trajectories of x*x, one per
    ordered pair, using adjoint symmetry for the lower triangle.
    """
    if len(family) > 8:
        raise SizeGuardError("contraction family limited to 8 members")
    xx = x.adjoint() * x
    vals: dict[tuple[int, int], complex] = {}
    errs = 0.0
    for i, (ci, ui, fi) in enumerate(family):
        for j, (cj, uj, fj) in enumerate(family):
            if i > j:
                continue
            traj = flow_element(sys, xx, ui, fi, uj, fj, [t], **solve_opts)
            vals[(i, j)] = traj.of_operator(xx)[0]
            w = abs(ci) * abs(cj)
            errs += w * float(traj.error_estimate[0]) * (1 if i == j else 2)
    lhs = 0j
    xi_sq = 0j
    for i, (ci, ui, fi) in enumerate(family):
        for j, (cj, uj, fj) in enumerate(family):
            coeff = ci.conjugate() * cj
            val = vals[(i, j)] if i <= j else vals[(j, i)].conjugate()
            lhs += coeff * val
            xi_sq += coeff * gns_inner(ui, uj) * exp_inner(fi, fj)
    rhs = dense.operator_norm(x) ** 2 * xi_sq.real
    return ContractionReport(lhs.real, rhs, errs + abs(lhs.imag))


class CovarianceReport(NamedTuple):
    deviation: float
    error_estimate: float


def covariance_check(L: "_lb.Lindbladian", window_sites, x, u, f, v, g, j, t_grid,
                     **solve_opts) -> CovarianceReport:
    """Shift invariance: F(x; u,f,v,g) vs the translated-by-(-j) problem."""
    grid = _validate_grid(t_grid)
    j = tuple(int(c) for c in j)
    neg = tuple(-c for c in j)
    sys_a = build_generator_system(L, window_sites)
    traj_a = flow_element(sys_a, x, u, f, v, g, grid, **solve_opts)
    sites_b = tuple(tuple(s[c] + neg[c] for c in range(L.params.d)) for s in sys_a.sites)
    sys_b = build_generator_system(L, sites_b)
    traj_b = flow_element(
        sys_b, x.translate(neg), u.translate(neg), f.shifted(j),
        v.translate(neg), g.shifted(j), grid, **solve_opts
    )
    dev = np.abs(traj_a.of_operator(x) - traj_b.of_operator(x.translate(neg)))
    est = traj_a.error_estimate + traj_b.error_estimate
    return CovarianceReport(float(dev.max()), float(est.max()))


# -- per-site and product flows ---------------------------------------------------


def eta_site_flow(state, k, x: LocalOperator, u, f, v, g, t_grid,
                  **solve_opts) -> MatrixElementTrajectory:
    """Single-site flow: exact closed system on the N^2 site labels."""
    k = tuple(int(c) for c in k)
    if any(site != k for site in x.support()):
        raise WindowError(f"observable must live at site {k}, supp={x.support()}")
    L = _lb.Lindbladian.partial_state(x.params, state)
    sys = build_generator_system(L, [k])
    return flow_element(sys, x, u, f, v, g, t_grid, **solve_opts)


def _site_factor_ops(params, lab: WeylLabel, site: Site) -> LocalOperator:
    a, b = lab.exponents(site)
    if (a, b) == (0, 0):
        return LocalOperator.identity(params)
    return LocalOperator.site_word(params, site, a, b)


def eta_product_flow(state, x: LocalOperator, u, f, v, g, t_grid, sites=None,
                     triple_guard: int = 20_000, **solve_opts) -> MatrixElementTrajectory:
    """Product flow: per-site solves multiplied with unused-mode overlaps.

    Works for any x, u, v by expanding all three over the string basis;
    every string factors over sites, so each triple is a product of
    independent single-site matrix elements.
    """
    grid = _validate_grid(t_grid)
    f, g = _harmonize(f, g)
    params = x.params
    if sites is None:
        sites = x.support()
    sites = {tuple(s) for s in sites}
    if not set(x.support()) <= sites:
        raise WindowError("x support outside the requested site set")

    xs, us, vs = x.items(), u.items(), v.items()
    if len(xs) * len(us) * len(vs) > triple_guard:
        raise SizeGuardError("basis expansion exceeds the triple guard")

    mode_sites = f.mode_sites() | g.mode_sites()
    overlap = {
        s: exp_inner(f.restrict_sites([s]), g.restrict_sites([s])) for s in mode_sites
    }

    cache: dict = {}

    def site_element(site, g_ab, a_ab, b_ab) -> tuple[np.ndarray, np.ndarray]:
        key = (site, g_ab, a_ab, b_ab)
        if key not in cache:
            op_g = LocalOperator.site_word(params, site, *g_ab) if g_ab != (0, 0) \
                else LocalOperator.identity(params)
            op_a = LocalOperator.site_word(params, site, *a_ab) if a_ab != (0, 0) \
                else LocalOperator.identity(params)
            op_b = LocalOperator.site_word(params, site, *b_ab) if b_ab != (0, 0) \
                else LocalOperator.identity(params)
            traj = eta_site_flow(
                state, site, op_g, op_a, f.restrict_sites([site]),
                op_b, g.restrict_sites([site]), grid, **solve_opts
            )
            cache[key] = (traj.of_operator(op_g), traj.error_estimate)
        return cache[key]

    total = np.zeros(len(grid), dtype=complex)
    est = np.zeros(len(grid))
    for lab_x, cx in xs:
        for lab_u, cu in us:
            for lab_v, cv in vs:
                coeff = cx * cu.conjugate() * cv
                factor_sites = sorted(
                    set(lab_x.support) | set(lab_u.support) | set(lab_v.support)
                )
                value = np.full(len(grid), coeff, dtype=complex)
                bound = abs(coeff)
                term_est = np.zeros(len(grid))
                for s in factor_sites:
                    g_ab = lab_x.exponents(s)
                    a_ab = lab_u.exponents(s)
                    b_ab = lab_v.exponents(s)
                    if g_ab == (0, 0):
                        # eta acts as the identity here: a constant overlap.
                        op_a = _site_factor_ops(params, lab_u, s)
                        op_b = _site_factor_ops(params, lab_v, s)
                        const = gns_inner(op_a, op_b) * exp_inner(
                            f.restrict_sites([s]), g.restrict_sites([s])
                        )
                        value *= const
                        term_est *= abs(const)
                        bound *= abs(const)
                    else:
                        vals, err = site_element(s, g_ab, a_ab, b_ab)
                        sup = float(np.max(np.abs(vals)))
                        term_est = term_est * sup + bound * err
                        value *= vals
                        bound *= max(sup, 1e-30)
                for s in sorted(mode_sites - set(factor_sites)):
                    value *= overlap[s]
                    term_est *= abs(overlap[s])
                total += value
                est += term_est
    return MatrixElementTrajectory(
        grid, [WeylLabel.identity()], {WeylLabel.identity(): 0},
        total.reshape(-1, 1), est, "eta-product",
    )


@dataclass
class ErgodicityScan:
    grid: np.ndarray
    values: np.ndarray  # |F_t(x) - target|
    trajectory: np.ndarray
    target: complex
    rate: float | None
    r2: float | None
    fit_start: float


def eta_ergodicity_scan(state, x: LocalOperator, u, f, v, g, t_grid,
                        **solve_opts) -> ErgodicityScan:
    """|F_t(x) - Phi(x) <u e(f), v e(g)>| and its fitted decay rate."""
    grid = _validate_grid(t_grid)
    f, g = _harmonize(f, g)
    traj = eta_product_flow(state, x, u, f, v, g, grid, **solve_opts)
    values = traj.F[:, 0]
    target = _lb.ergodic_state(state, x) * gns_inner(u, v) * exp_inner(f, g)
    dev = np.abs(values - target)
    drive_end = 0.0
    if f.modes or g.modes:
        drive_end = max(f.t_max if f.modes else 0.0, g.t_max if g.modes else 0.0)
    fit_start = drive_end + 0.1 * max(grid[-1] - drive_end, 0.0)
    mask = (grid >= fit_start) & (dev > 1e-14)
    rate = r2 = None
    if mask.sum() >= 4:
        try:
            rate, r2 = _lb.decay_rate_fit(grid[mask], dev[mask])
        except Exception:
            rate = r2 = None
    return ErgodicityScan(grid, dev, values, target, rate, r2, fit_start)


def hp_divergence_witness(r: LocalOperator, u: LocalOperator, K: int) -> list[float]:
    """Partial sums S_K' = sum_{|j|_inf <= K'} ||r_j u||^2 for K' = 1..K."""
    if K < 1:
        raise ValueError("K must be >= 1")
    d = r.params.d
    total = gns_norm(r * u) ** 2  # the j = 0 shell
    sums = []
    for kp in range(1, K + 1):
        for j in itertools.product(range(-kp, kp + 1), repeat=d):
            if max(abs(c) for c in j) != kp:
                continue
            total += gns_norm(r.translate(j) * u) ** 2
        sums.append(total)
    return sums
