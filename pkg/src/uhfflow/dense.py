"""Brute-force finite-dimensional realization on a site window.

Everything symbolic in :mod:`uhfflow.algebra` can be realized as a dense
matrix on a finite window of sites: clock/shift words per site, Kronecker
products across the window, operator norms, generator matrices in the
Weyl-string basis, exact semigroup evolution via the matrix exponential,
Choi matrices, and Kraus decompositions of on-site states.  This module
is the independent oracle the symbolic layer is tested against, so it
deliberately shares no arithmetic with it beyond the label definitions.
"""

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .algebra import AlgebraParams, LocalOperator, Site, WeylLabel, weyl_mul
from .errors import SizeGuardError, StateError, WindowError

# Entries-per-row guard for generator matrices in the window basis.
SUPEROP_DIM_GUARD = 10_000


@functools.lru_cache(maxsize=None)
def clock_shift(N: int) -> tuple[np.ndarray, np.ndarray]:
    """Shift and clock matrices with U V = omega V U; Paulis at N = 2.

    U is the cyclic raising shift (U e_i = e_{i+1 mod N}) and V the clock
    diag(omega**(-j)); this orientation is what makes the product law of
    ``weyl_mul`` come out right, and is validated once per N below.
    """
    if N < 2:
        raise ValueError(f"need N >= 2, got {N}")
    params = AlgebraParams(N=N, d=1)
    U = np.zeros((N, N), dtype=complex)
    for i in range(N):
        U[(i + 1) % N, i] = 1.0
    omega = params.root(1)
    V = np.diag([params.root(-j) for j in range(N)])
    if np.linalg.norm(U @ V - omega * V @ U) > 1e-14 * N:
        raise AssertionError("clock/shift orientation broken")
    _validate_single_site_products(N)
    return U, V


@functools.lru_cache(maxsize=None)
def site_word(N: int, alpha: int, beta: int) -> np.ndarray:
    """U^alpha V^beta as an N x N matrix."""
    U, V = clock_shift(N)
    return np.linalg.matrix_power(U, alpha % N) @ np.linalg.matrix_power(V, beta % N)


@functools.lru_cache(maxsize=None)
def _validate_single_site_products(N: int) -> bool:
    # Startup self-test: the symbolic product law must reproduce the dense
    # one for every pair of single-site words.  Runs once per N.
    params = AlgebraParams(N=N, d=1)
    U = np.zeros((N, N), dtype=complex)
    for i in range(N):
        U[(i + 1) % N, i] = 1.0
    V = np.diag([params.root(-j) for j in range(N)])

    def word(a, b):
        return np.linalg.matrix_power(U, a) @ np.linalg.matrix_power(V, b)

    site = (0,)
    for a1, b1, a2, b2 in itertools.product(range(N), repeat=4):
        g = WeylLabel.from_entries([(site, (a1, b1))], N, 1)
        h = WeylLabel.from_entries([(site, (a2, b2))], N, 1)
        phase, label = weyl_mul(params, g, h)
        (a, b) = label.exponents(site)
        lhs = word(a1, b1) @ word(a2, b2)
        rhs = params.root(phase) * word(a, b)
        if np.linalg.norm(lhs - rhs) > 1e-12 * N:
            raise AssertionError(f"weyl_mul disagrees with dense oracle at N={N}")
    return True


@dataclass(frozen=True)
class SiteWindow:
    """Ordered list of distinct sites; the order fixes tensor factors."""

    params: AlgebraParams
    sites: tuple[Site, ...]

    def __post_init__(self):
        sites = tuple(tuple(int(c) for c in s) for s in self.sites)
        if len(set(sites)) != len(sites):
            raise WindowError(f"window sites must be distinct: {sites}")
        for s in sites:
            if len(s) != self.params.d:
                raise WindowError(f"site {s} does not match lattice dimension {self.params.d}")
        object.__setattr__(self, "sites", sites)

    @property
    def dim(self) -> int:
        return self.params.N ** len(self.sites)

    def site_set(self) -> set[Site]:
        return set(self.sites)


def window(params: AlgebraParams, sites) -> SiteWindow:
    return SiteWindow(params, tuple(tuple(s) for s in sites))


@dataclass
class DenseOperator:
    window: SiteWindow
    matrix: np.ndarray

    def is_hermitian(self, tol: float = 1e-12) -> bool:
        return bool(np.linalg.norm(self.matrix - self.matrix.conj().T) <= tol * self.window.dim)

    def is_unitary(self, tol: float = 1e-12) -> bool:
        eye = np.eye(self.window.dim)
        return bool(np.linalg.norm(self.matrix @ self.matrix.conj().T - eye) <= tol * self.window.dim)


def realize(x: LocalOperator, win: SiteWindow) -> DenseOperator:
    """Kronecker realization of x on the window (identity off-support)."""
    if x.params != win.params:
        raise WindowError("operator and window use different algebra parameters")
    if not set(x.support()) <= win.site_set():
        raise WindowError(f"support {x.support()} not contained in window {win.sites}")
    N = win.params.N
    dim = win.dim
    out = np.zeros((dim, dim), dtype=complex)
    for label, coeff in x.items():
        acc = np.eye(1, dtype=complex)
        for site in win.sites:
            a, b = label.exponents(site)
            acc = np.kron(acc, site_word(N, a, b))
        out += coeff * acc
    return DenseOperator(win, out)


def operator_norm(x: LocalOperator) -> float:
    """Largest singular value of the realization on supp(x)."""
    if x.is_zero():
        return 0.0
    supp = x.support()
    if not supp:
        return abs(x.trace())
    win = SiteWindow(x.params, supp)
    return float(np.linalg.norm(realize(x, win).matrix, 2))


def window_basis(params: AlgebraParams, sites) -> list[WeylLabel]:
    """All Weyl labels supported in the window, in deterministic order.

    Site order follows the (sorted) window; per site the digit a*N + b runs
    lexicographically, with the first site as the most significant digit.
    """
    sites = tuple(tuple(int(c) for c in s) for s in sites)
    N = params.N
    labels = []
    for digits in itertools.product(range(N * N), repeat=len(sites)):
        entries = []
        for site, digit in zip(sites, digits):
            a, b = divmod(digit, N)
            if (a, b) != (0, 0):
                entries.append((site, (a, b)))
        labels.append(WeylLabel(tuple(sorted(entries))))
    return labels


def coefficient_vector(x: LocalOperator, basis_index: dict[WeylLabel, int]) -> np.ndarray:
    vec = np.zeros(len(basis_index), dtype=complex)
    for lab, c in x.items():
        try:
            vec[basis_index[lab]] = c
        except KeyError:
            raise WindowError(f"label {lab} outside the window basis") from None
    return vec


@dataclass
class WindowSuperoperator:
    """Matrix of a generator in the window's Weyl basis (column-stacked).

    Column b holds the coefficients of L(U_b) over the deterministic basis
    order; this is the vectorization of the generator in the orthonormal
    string basis of the window.
    """

    window: SiteWindow
    closure_mode: str
    basis: list[WeylLabel] = field(repr=False)
    matrix: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return len(self.basis)

    @functools.cached_property
    def index(self) -> dict[WeylLabel, int]:
        return {lab: i for i, lab in enumerate(self.basis)}


def superoperator(lindbladian, win: SiteWindow, closure_mode: str = "interior") -> WindowSuperoperator:
    """Generator matrix on the window; `lindbladian` supplies windowed_apply.

    ``interior`` keeps only fully contained translates (a genuine windowed
    Lindbladian); ``clipped`` keeps every intersecting translate with its
    Kraus factors clipped to the window.
    """
    if not win.sites:
        raise WindowError("window must be nonempty")
    dim = win.params.N ** (2 * len(win.sites))
    if dim > SUPEROP_DIM_GUARD:
        raise SizeGuardError(
            f"window basis has {dim} elements, above the guard {SUPEROP_DIM_GUARD}"
        )
    basis = window_basis(win.params, win.sites)
    index = {lab: i for i, lab in enumerate(basis)}
    mat = np.zeros((dim, dim), dtype=complex)
    for col, lab in enumerate(basis):
        image = lindbladian.windowed_apply(
            LocalOperator.weyl(win.params, lab), win.sites, closure_mode
        )
        for out_lab, c in image.items():
            mat[index[out_lab], col] = c
    return WindowSuperoperator(window=win, closure_mode=closure_mode, basis=basis, matrix=mat)


def expm_evolve(superop: WindowSuperoperator, t: float, x: LocalOperator) -> LocalOperator:
    """e^{t L} x via the matrix exponential of the window generator."""
    if t < 0:
        raise ValueError(f"time must be nonnegative, got {t}")
    vec = coefficient_vector(x, superop.index)
    out = scipy.linalg.expm(t * superop.matrix) @ vec
    terms = {lab: out[i] for i, lab in enumerate(superop.basis)}
    return LocalOperator(superop.window.params, terms)


def _basis_change(superop: WindowSuperoperator) -> np.ndarray:
    """Columns: vec(realize(U_b)) for each basis label (column stacking)."""
    dim = superop.window.dim
    B = np.zeros((dim * dim, len(superop.basis)), dtype=complex)
    for i, lab in enumerate(superop.basis):
        M = realize(LocalOperator.weyl(superop.window.params, lab), superop.window).matrix
        B[:, i] = M.reshape(-1, order="F")
    return B


def choi_matrix(superop: WindowSuperoperator, t: float) -> np.ndarray:
    """Choi matrix of e^{t L} on the window, dim^2 x dim^2."""
    dim = superop.window.dim
    # Change the generator to column-stacked matrix vectorization: the
    # string basis is orthonormal for tr, so B* B = dim * I.
    B = _basis_change(superop)
    M = B @ superop.matrix @ B.conj().T / dim
    E = scipy.linalg.expm(t * M)
    choi = np.zeros((dim * dim, dim * dim), dtype=complex)
    for i in range(dim):
        for j in range(dim):
            Eij = np.zeros((dim, dim), dtype=complex)
            Eij[i, j] = 1.0
            out = (E @ Eij.reshape(-1, order="F")).reshape(dim, dim, order="F")
            choi += np.kron(out, Eij)
    return choi


@dataclass(frozen=True)
class StateSpec:
    """Density matrix of the on-site state used by partial-state generators."""

    rho: np.ndarray

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=complex)
        if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
            raise StateError(f"density matrix must be square, got shape {rho.shape}")
        if np.linalg.norm(rho - rho.conj().T) > 1e-12:
            raise StateError("density matrix is not Hermitian")
        eigs = np.linalg.eigvalsh(rho)
        if eigs.min() < -1e-12:
            raise StateError(f"density matrix has negative eigenvalue {eigs.min():.3e}")
        if abs(np.trace(rho).real - 1.0) > 1e-12 or abs(np.trace(rho).imag) > 1e-12:
            raise StateError(f"density matrix trace is {np.trace(rho):.6f}, not 1")
        object.__setattr__(self, "rho", rho)

    @property
    def N(self) -> int:
        return self.rho.shape[0]

    def expect_word(self, alpha: int, beta: int) -> complex:
        """phi(U^alpha V^beta) = Tr(rho U^alpha V^beta)."""
        return complex(np.trace(self.rho @ site_word(self.N, alpha, beta)))


def state_kraus(state: StateSpec) -> list[np.ndarray]:
    """Kraus family with sum K* x K = Tr(rho x) 1 and sum K* K = 1.

    Built as K_{ij} = sqrt(p_i) |v_i><e_j| from the spectral decomposition
    of rho (zero-probability directions dropped); verified on the matrix
    basis before returning.
    """
    N = state.N
    probs, vecs = np.linalg.eigh(state.rho)
    ops = []
    for i in range(N - 1, -1, -1):  # descending probability
        p = probs[i]
        if p < 1e-14:
            continue
        for j in range(N):
            K = np.zeros((N, N), dtype=complex)
            K[:, j] = np.sqrt(p) * vecs[:, i]
            ops.append(K)
    total = sum(K.conj().T @ K for K in ops)
    if np.linalg.norm(total - np.eye(N)) > 1e-12:
        raise StateError("Kraus normalization sum K*K = 1 failed")
    for i in range(N):
        for j in range(N):
            E = np.zeros((N, N), dtype=complex)
            E[i, j] = 1.0
            lhs = sum(K.conj().T @ E @ K for K in ops)
            target = np.trace(state.rho @ E) * np.eye(N)
            if np.linalg.norm(lhs - target) > 1e-12:
                raise StateError("Kraus family does not implement the state")
    return ops


def matrix_to_local(params: AlgebraParams, site, mat: np.ndarray) -> LocalOperator:
    """Expand an N x N matrix over the on-site words at ``site``."""
    N = params.N
    mat = np.asarray(mat, dtype=complex)
    if mat.shape != (N, N):
        raise ValueError(f"matrix shape {mat.shape} does not match N={N}")
    terms = {}
    for a in range(N):
        for b in range(N):
            w = site_word(N, a, b)
            c = np.trace(w.conj().T @ mat) / N
            if abs(c) > 1e-15:
                label = WeylLabel.from_entries([(tuple(site), (a, b))], N, params.d)
                terms[label] = complex(c)
    return LocalOperator(params, terms)
