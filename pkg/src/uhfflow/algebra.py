"""Exact symbolic algebra of local lattice observables in the Weyl-string basis.

A local observable is a finite complex combination of unitary strings

    U_g = prod_j  U^{alpha_j} V^{beta_j}        (j over finitely many sites),

where ``U`` and ``V`` are the N-dimensional clock and shift unitaries with
``U V = omega V U`` and ``omega = exp(2 pi i / N)``.  Products, adjoints,
commutators, lattice translations, the normalized trace and the GNS inner
product are all computed exactly at the level of string labels and phases;
no matrices appear here.  The finite-dimensional realization lives in
:mod:`uhfflow.dense` and serves as an independent oracle.

Normal ordering per site is U-powers before V-powers; reordering across a
product contributes the phase ``omega**(-beta * alpha')`` per site.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping

from .errors import ParamsMismatchError

# Coefficients below this magnitude are dropped during canonicalization so
# that float dust cannot blow up supports.
COEFF_TOL = 1e-15

Site = tuple[int, ...]


@dataclass(frozen=True)
class AlgebraParams:
    """On-site dimension ``N`` and lattice dimension ``d``; immutable."""

    N: int
    d: int

    def __post_init__(self):
        if self.N < 2:
            raise ValueError(f"on-site dimension must be >= 2, got {self.N}")
        if self.d < 1:
            raise ValueError(f"lattice dimension must be >= 1, got {self.d}")
        w = self.omega
        if abs(w**self.N - 1.0) > 1e-14:
            raise ValueError("omega**N != 1")
        for k in range(1, self.N):
            if abs(w**k - 1.0) <= 1e-14:
                raise ValueError("omega is not a primitive root")

    @property
    def omega(self) -> complex:
        return cmath.exp(2j * math.pi / self.N)

    def root(self, k: int) -> complex:
        """omega**k, computed from the reduced exponent.

        Quarter turns are returned exactly so that N = 2 and N = 4 phase
        arithmetic stays free of float dust.
        """
        k %= self.N
        if (4 * k) % self.N == 0:
            return (1 + 0j, 1j, -1 + 0j, -1j)[(4 * k // self.N) % 4]
        return cmath.exp(2j * math.pi * k / self.N)

    def origin(self) -> Site:
        return (0,) * self.d


def _check_site(site, d: int) -> Site:
    site = tuple(int(c) for c in site)
    if len(site) != d:
        raise ValueError(f"site {site} does not have {d} coordinates")
    return site


@dataclass(frozen=True)
class WeylLabel:
    """Finitely supported exponent map site -> (alpha, beta) labeling U_g.

    ``entries`` is sorted by site and never contains an exponent pair
    (0, 0); the empty tuple labels the identity.
    """

    entries: tuple[tuple[Site, tuple[int, int]], ...]

    @staticmethod
    def identity() -> "WeylLabel":
        return WeylLabel(())

    @staticmethod
    def single(site: Iterable[int], alpha: int, beta: int, N: int, d: int) -> "WeylLabel":
        return WeylLabel.from_entries([(tuple(site), (alpha, beta))], N, d)

    @staticmethod
    def from_entries(items, N: int, d: int) -> "WeylLabel":
        """Build a canonical label: exponents reduced mod N, (0,0) dropped."""
        ent: dict[Site, tuple[int, int]] = {}
        for site, (a, b) in dict(items).items():
            site = _check_site(site, d)
            a, b = int(a) % N, int(b) % N
            if (a, b) != (0, 0):
                ent[site] = (a, b)
        return WeylLabel(tuple(sorted(ent.items())))

    @property
    def support(self) -> tuple[Site, ...]:
        return tuple(site for site, _ in self.entries)

    @property
    def weight(self) -> int:
        """|g| = number of supported sites."""
        return len(self.entries)

    def is_identity(self) -> bool:
        return not self.entries

    def exponents(self, site: Site) -> tuple[int, int]:
        for s, ab in self.entries:
            if s == site:
                return ab
        return (0, 0)

    def translated(self, k: Site) -> "WeylLabel":
        moved = tuple(
            (tuple(c + dk for c, dk in zip(site, k)), ab) for site, ab in self.entries
        )
        return WeylLabel(tuple(sorted(moved)))


def weyl_mul(params: AlgebraParams, g: WeylLabel, h: WeylLabel) -> tuple[int, WeylLabel]:
    """Exact product law: U_g U_h = omega**phase * U_label.

    Per site, (U^a V^b)(U^a' V^b') = omega**(-b a') U^(a+a') V^(b+b');
    phases multiply across sites, exponents add mod N.
    """
    N = params.N
    phase = 0
    ent = dict(g.entries)
    for site, (a2, b2) in h.entries:
        a1, b1 = ent.get(site, (0, 0))
        phase -= b1 * a2
        a, b = (a1 + a2) % N, (b1 + b2) % N
        if (a, b) == (0, 0):
            ent.pop(site, None)
        else:
            ent[site] = (a, b)
    return phase % N, WeylLabel(tuple(sorted(ent.items())))


def weyl_adjoint(params: AlgebraParams, g: WeylLabel) -> tuple[int, WeylLabel]:
    """Adjoint law: U_g* = omega**phase * U_label with negated exponents."""
    N = params.N
    phase = 0
    ent = []
    for site, (a, b) in g.entries:
        phase -= a * b
        ent.append((site, ((-a) % N, (-b) % N)))
    return phase % N, WeylLabel(tuple(sorted(ent)))


class LocalOperator:
    """Finite complex-weighted sum of Weyl strings; immutable once built.

    Terms are canonicalized on construction: equal labels merged, entries
    with |coefficient| < ``COEFF_TOL`` dropped, iteration order fixed by
    the lexicographic order on label entries.
    """

    __slots__ = ("params", "_terms")

    def __init__(self, params: AlgebraParams, terms: Mapping[WeylLabel, complex] | Iterable = ()):
        merged: dict[WeylLabel, complex] = {}
        items = terms.items() if isinstance(terms, Mapping) else terms
        for label, coeff in items:
            c = merged.get(label, 0j) + complex(coeff)
            if c == 0j:
                merged.pop(label, None)
            else:
                merged[label] = c
        clean = {lab: c for lab, c in merged.items() if abs(c) >= COEFF_TOL}
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "_terms", clean)

    def __setattr__(self, name, value):
        raise AttributeError("LocalOperator is immutable")

    # -- constructors -------------------------------------------------

    @staticmethod
    def zero(params: AlgebraParams) -> "LocalOperator":
        return LocalOperator(params)

    @staticmethod
    def identity(params: AlgebraParams) -> "LocalOperator":
        return LocalOperator(params, {WeylLabel.identity(): 1.0 + 0j})

    @staticmethod
    def weyl(params: AlgebraParams, label: WeylLabel, coeff: complex = 1.0) -> "LocalOperator":
        return LocalOperator(params, {label: coeff})

    @staticmethod
    def site_word(params: AlgebraParams, site, alpha: int, beta: int,
                  coeff: complex = 1.0) -> "LocalOperator":
        """coeff * U^alpha V^beta at one site."""
        label = WeylLabel.single(site, alpha, beta, params.N, params.d)
        return LocalOperator(params, {label: coeff})

    # -- ring structure ------------------------------------------------

    def _require_same_params(self, other: "LocalOperator"):
        if self.params != other.params:
            raise ParamsMismatchError(
                f"operands live on different algebras: {self.params} vs {other.params}"
            )

    def __add__(self, other):
        if isinstance(other, LocalOperator):
            self._require_same_params(other)
            out = dict(self._terms)
            for lab, c in other._terms.items():
                out[lab] = out.get(lab, 0j) + c
            return LocalOperator(self.params, out)
        return NotImplemented

    def __sub__(self, other):
        if isinstance(other, LocalOperator):
            return self + (-other)
        return NotImplemented

    def __neg__(self):
        return LocalOperator(self.params, {lab: -c for lab, c in self._terms.items()})

    def __mul__(self, other):
        if isinstance(other, LocalOperator):
            self._require_same_params(other)
            out: dict[WeylLabel, complex] = {}
            for g, cg in self._terms.items():
                for h, ch in other._terms.items():
                    phase, label = weyl_mul(self.params, g, h)
                    c = cg * ch * self.params.root(phase)
                    out[label] = out.get(label, 0j) + c
            return LocalOperator(self.params, out)
        if isinstance(other, (int, float, complex)):
            return LocalOperator(
                self.params, {lab: c * other for lab, c in self._terms.items()}
            )
        return NotImplemented

    def __rmul__(self, other):
        if isinstance(other, (int, float, complex)):
            return self * other
        return NotImplemented

    def __truediv__(self, other):
        if isinstance(other, (int, float, complex)):
            return self * (1.0 / other)
        return NotImplemented

    # -- *-algebra operations -------------------------------------------

    def adjoint(self) -> "LocalOperator":
        out: dict[WeylLabel, complex] = {}
        for g, c in self._terms.items():
            phase, label = weyl_adjoint(self.params, g)
            out[label] = out.get(label, 0j) + c.conjugate() * self.params.root(phase)
        return LocalOperator(self.params, out)

    def translate(self, k) -> "LocalOperator":
        k = _check_site(k, self.params.d)
        return LocalOperator(
            self.params, {lab.translated(k): c for lab, c in self._terms.items()}
        )

    def trace(self) -> complex:
        """Normalized trace: the coefficient of the identity string."""
        return self._terms.get(WeylLabel.identity(), 0j)

    # -- inspection ------------------------------------------------------

    def items(self) -> list[tuple[WeylLabel, complex]]:
        """Terms in the deterministic (site, alpha, beta) order."""
        return sorted(self._terms.items(), key=lambda kv: kv[0].entries)

    def coeff(self, label: WeylLabel) -> complex:
        return self._terms.get(label, 0j)

    def num_terms(self) -> int:
        return len(self._terms)

    def support(self) -> tuple[Site, ...]:
        sites: set[Site] = set()
        for lab in self._terms:
            sites.update(lab.support)
        return tuple(sorted(sites))

    @property
    def site_count(self) -> int:
        """|x| = cardinality of the support."""
        return len(self.support())

    def l1(self) -> float:
        return sum(abs(c) for c in self._terms.values())

    def is_zero(self, tol: float = 0.0) -> bool:
        return all(abs(c) <= tol for c in self._terms.values())

    def sup_diff(self, other: "LocalOperator") -> float:
        """Largest coefficient magnitude of self - other."""
        self._require_same_params(other)
        labels = set(self._terms) | set(other._terms)
        if not labels:
            return 0.0
        return max(abs(self.coeff(lab) - other.coeff(lab)) for lab in labels)

    def allclose(self, other: "LocalOperator", tol: float = 1e-12) -> bool:
        return self.sup_diff(other) <= tol

    def clip(self, sites) -> tuple["LocalOperator", float]:
        """Drop terms whose support leaves ``sites``; return (kept, leaked l1)."""
        allowed = {_check_site(s, self.params.d) for s in sites}
        kept: dict[WeylLabel, complex] = {}
        leaked = 0.0
        for lab, c in self._terms.items():
            if set(lab.support) <= allowed:
                kept[lab] = c
            else:
                leaked += abs(c)
        return LocalOperator(self.params, kept), leaked

    def __repr__(self):
        n = len(self._terms)
        return f"LocalOperator(N={self.params.N}, d={self.params.d}, {n} terms)"

    # -- text serialization ----------------------------------------------
    # One line per term:  "re im ; site:alpha,beta site:alpha,beta ..."
    # An empty site list denotes the identity string.

    def to_text(self) -> str:
        lines = []
        for lab, c in self.items():
            sites = " ".join(
                ",".join(str(v) for v in site) + f":{a},{b}"
                for site, (a, b) in lab.entries
            )
            lines.append(f"{c.real:.17g} {c.imag:.17g} ; {sites}".rstrip())
        return "\n".join(lines)

    @staticmethod
    def from_text(params: AlgebraParams, text: str) -> "LocalOperator":
        terms = []
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            head, _, tail = line.partition(";")
            parts = head.split()
            if len(parts) != 2:
                raise ValueError(f"term {line!r}: expected 're im ; sites'")
            coeff = complex(float(parts[0]), float(parts[1]))
            entries = []
            for tok in tail.split():
                site_txt, _, ab_txt = tok.partition(":")
                site = tuple(int(v) for v in site_txt.split(","))
                a_txt, _, b_txt = ab_txt.partition(",")
                entries.append((site, (int(a_txt), int(b_txt))))
            label = WeylLabel.from_entries(entries, params.N, params.d)
            terms.append((label, coeff))
        return LocalOperator(params, terms)


# -- GNS space ------------------------------------------------------------
# Vectors in L^2(A, tr) are represented by the LocalOperator they come from;
# the Weyl strings are an orthonormal basis for the GNS inner product.

GnsVector = LocalOperator


def commutator(x: LocalOperator, y: LocalOperator) -> LocalOperator:
    return x * y - y * x


def gns_inner(u: GnsVector, v: GnsVector) -> complex:
    """<u, v> = tr(u* v) = sum_g conj(c^u_g) c^v_g."""
    u._require_same_params(v)
    small, big = (u, v) if u.num_terms() <= v.num_terms() else (v, u)
    acc = 0j
    for lab, c in small._terms.items():
        other = big.coeff(lab)
        if u is small:
            acc += c.conjugate() * other
        else:
            acc += other.conjugate() * c
    return acc


def gns_norm(u: GnsVector) -> float:
    return math.sqrt(sum(abs(c) ** 2 for c in u._terms.values()))


def theta(x: LocalOperator, n: int) -> float:
    """sum_g |c_g| |g|**n over the terms of x."""
    if n < 1:
        raise ValueError("theta order must be >= 1")
    return sum(abs(c) * lab.weight**n for lab, c in x._terms.items())


def c_const(x: LocalOperator) -> float:
    """|x| * (1 + sum_g |c_g|), the growth constant attached to x."""
    if not x._terms:
        return 0.0
    return x.site_count * (1.0 + x.l1())


def seminorm_one(x: LocalOperator, convention: str = "exponentiated") -> float:
    """Commutator seminorm: sum over sites and exponent pairs of ||[W, x]||.

    ``exponentiated`` (default) sums ||[(U^a V^b)^{(j)}, x]|| over
    (a, b) != (0, 0); ``printed`` uses [U^{(j)} V^{(j)}, x] for every one
    of the N^2 exponent pairs, matching the literal formula it replaces.
    Only j in supp(x) can contribute; the identity has seminorm zero.
    """
    from . import dense  # local import: norms need the dense realization

    if not x._terms:
        return 0.0
    N = x.params.N
    if convention == "exponentiated":
        pairs = [(a, b) for a in range(N) for b in range(N) if (a, b) != (0, 0)]
    elif convention == "printed":
        pairs = [(1, 1)] * (N * N)
    else:
        raise ValueError(f"unknown seminorm convention {convention!r}")
    total = 0.0
    for j in x.support():
        for a, b in pairs:
            w = LocalOperator.site_word(x.params, j, a, b)
            total += dense.operator_norm(commutator(w, x))
    return total


def random_label(params: AlgebraParams, rng, sites, max_weight: int = 2) -> WeylLabel:
    """Random nonidentity label supported on ``sites`` (testing helper)."""
    sites = [tuple(s) for s in sites]
    weight = int(rng.integers(1, min(max_weight, len(sites)) + 1))
    chosen = rng.choice(len(sites), size=weight, replace=False)
    entries = []
    for idx in chosen:
        while True:
            a = int(rng.integers(0, params.N))
            b = int(rng.integers(0, params.N))
            if (a, b) != (0, 0):
                break
        entries.append((sites[idx], (a, b)))
    return WeylLabel.from_entries(entries, params.N, params.d)


def random_local(params: AlgebraParams, rng, sites, n_terms: int = 3,
                 max_weight: int = 2, include_identity: bool = False) -> LocalOperator:
    """Random local operator with unit-scale complex coefficients."""
    terms: dict[WeylLabel, complex] = {}
    for _ in range(n_terms):
        lab = random_label(params, rng, sites, max_weight)
        terms[lab] = terms.get(lab, 0j) + complex(rng.normal(), rng.normal())
    if include_identity:
        terms[WeylLabel.identity()] = complex(rng.normal(), rng.normal())
    return LocalOperator(params, terms)
