"""Raw-moment equations of mass-action networks and their zero-central-moment closure.

For ``f(x) = x^alpha`` the master equation gives

    d/dt E[X^alpha] = sum_j E[a_j(X) ((X + v_j)^alpha - X^alpha)],

which is linear in raw moments. With propensities of degree at most two the
right-hand side of an order-``k`` moment involves moments up to order
``k + 1``. The closed system of order ``M`` tracks every multi-index of order
``1..M`` and eliminates each order ``M + 1`` moment by requiring its central
moment to vanish.

Multi-indices are plain tuples of exponents. A :class:`MomentPolynomial` maps
monomials (sorted tuples of multi-indices, the empty tuple is the constant)
to coefficients; linear right-hand sides only use one-element monomials.
"""
from __future__ import annotations

import csv
import io
import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field
from math import comb

import numpy as np
from scipy import sparse
from scipy.integrate import solve_ivp

from . import _kernels as K
from .network import ReactionNetwork, propensity_polynomial

log = logging.getLogger(__name__)

__all__ = [
    "MomentPolynomial",
    "MomentODESystem",
    "MomentVector",
    "MomentIntegrationError",
    "MissingMomentError",
    "RealizabilityWarning",
    "enumerate_moment_indices",
    "n_moment_equations",
    "derive_raw_moment_ode",
    "closure_polynomial",
    "close_system",
    "integrate_moments",
    "init_moments_from_state",
    "moments_from_distribution",
    "central_from_raw",
    "raw_from_central",
    "format_multi_index",
    "parse_multi_index",
    "write_moments_csv",
    "read_moments_csv",
]


class MomentIntegrationError(RuntimeError):
    """The moment ODE integrator gave up (usually a sign of stiffness or blow-up)."""


class MissingMomentError(KeyError):
    pass


class RealizabilityWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# multi-indices


def _grlex_key(alpha):
    return (sum(alpha), tuple(-a for a in alpha))


def enumerate_moment_indices(n: int, order: int, min_order: int = 1) -> list[tuple[int, ...]]:
    """All exponent tuples with ``min_order <= |alpha| <= order``, graded-lex.

    Within one degree, ``x_1`` dominates: ``(2,0) < (1,1) < (0,2)`` in the
    returned order.
    """
    if n < 1:
        raise ValueError("need at least one species")
    out = []
    for k in range(max(min_order, 0), order + 1):
        for combo in itertools.combinations_with_replacement(range(n), k):
            alpha = [0] * n
            for i in combo:
                alpha[i] += 1
            out.append(tuple(alpha))
    return out


def n_moment_equations(n: int, order: int) -> int:
    return comb(n + order, order) - 1


def format_multi_index(alpha) -> str:
    return ":".join(str(int(a)) for a in alpha)


def parse_multi_index(text: str) -> tuple[int, ...]:
    try:
        alpha = tuple(int(s) for s in text.strip().split(":"))
    except ValueError:
        raise ValueError(f"bad multi-index {text!r}") from None
    if any(a < 0 for a in alpha):
        raise ValueError(f"negative exponent in {text!r}")
    return alpha


def _unit(n: int, i: int) -> tuple[int, ...]:
    return tuple(1 if k == i else 0 for k in range(n))


# ---------------------------------------------------------------------------
# symbolic polynomials over moment symbols


@dataclass
class MomentPolynomial:
    """Polynomial in raw-moment symbols ``E[X^beta]``.

    ``terms`` maps a sorted tuple of multi-indices to its coefficient; ``()``
    is the constant term and ``E[X^0] = 1`` never appears as a factor.
    """

    n: int
    terms: dict = field(default_factory=dict)

    def add(self, monomial, coeff: float):
        mono = tuple(sorted((b for b in monomial if any(b)), key=_grlex_key))
        value = self.terms.get(mono, 0.0) + coeff
        if value == 0.0:
            self.terms.pop(mono, None)
        else:
            self.terms[mono] = value

    def __iadd__(self, other: "MomentPolynomial"):
        for mono, c in other.terms.items():
            self.add(mono, c)
        return self

    def scaled(self, s: float) -> "MomentPolynomial":
        return MomentPolynomial(self.n, {m: c * s for m, c in self.terms.items()} if s else {})

    def times_symbol(self, beta) -> "MomentPolynomial":
        out = MomentPolynomial(self.n)
        for mono, c in self.terms.items():
            out.add(mono + (tuple(beta),), c)
        return out

    def symbols(self) -> set:
        return {b for mono in self.terms for b in mono}

    def max_order(self) -> int:
        return max((sum(b) for b in self.symbols()), default=0)

    def is_zero(self, tol: float = 0.0) -> bool:
        return all(abs(c) <= tol for c in self.terms.values())

    def evaluate(self, moments) -> float:
        """Evaluate with ``moments`` a mapping ``multi-index -> value``."""
        total = []
        for mono, c in self.terms.items():
            v = c
            for b in mono:
                try:
                    v *= moments[b]
                except KeyError:
                    raise MissingMomentError(b) from None
            total.append(v)
        return math.fsum(total)

    def sorted_terms(self):
        def key(item):
            mono = item[0]
            return (len(mono), [_grlex_key(b) for b in mono])

        return sorted(self.terms.items(), key=key)

    def format(self) -> str:
        parts = []
        for mono, c in self.sorted_terms():
            sym = "*".join(f"E[x^({','.join(map(str, b))})]" for b in mono)
            mag = repr(abs(c))
            body = f"{mag}*{sym}" if sym else mag
            parts.append(("- " if c < 0 else "+ ") + body)
        if not parts:
            return "0"
        text = " ".join(parts)
        return text[2:] if text.startswith("+ ") else "-" + text[2:]


# ---------------------------------------------------------------------------
# derivation


def _shift_expansion(alpha, change):
    """``(x + v)^alpha - x^alpha`` as ``{beta: coeff}``."""
    n = len(alpha)
    factors = []
    for i in range(n):
        a, v = alpha[i], change[i]
        if a == 0:
            factors.append([(0, 1)])
        elif v == 0:
            factors.append([(a, 1)])
        else:
            factors.append([(e, comb(a, e) * v ** (a - e)) for e in range(a + 1)])
    out: dict[tuple[int, ...], int] = {}
    for combo in itertools.product(*factors):
        beta = tuple(e for e, _ in combo)
        if beta == tuple(alpha):
            continue
        c = 1
        for _, fc in combo:
            c *= fc
        out[beta] = out.get(beta, 0) + c
    return {b: c for b, c in out.items() if c}


def _linear_rhs(net: ReactionNetwork, alpha, props=None) -> dict[tuple[int, ...], float]:
    n = net.n_species
    props = props if props is not None else [propensity_polynomial(net, j) for j in range(net.n_reactions)]
    out: dict[tuple[int, ...], float] = {}
    for j, poly in enumerate(props):
        diff = _shift_expansion(alpha, net.reactions[j].change)
        for beta, cb in diff.items():
            for gamma, cg in poly.items():
                key = tuple(beta[i] + gamma[i] for i in range(n))
                out[key] = out.get(key, 0.0) + cb * cg
    return {b: c for b, c in out.items() if c != 0.0}


def derive_raw_moment_ode(net: ReactionNetwork, alpha) -> MomentPolynomial:
    """Exact right-hand side of ``d/dt E[X^alpha]`` as a linear moment polynomial."""
    alpha = tuple(int(a) for a in alpha)
    if len(alpha) != net.n_species:
        raise ValueError("multi-index length does not match the species count")
    poly = MomentPolynomial(net.n_species)
    if not any(alpha):
        return poly
    for beta, c in _linear_rhs(net, alpha).items():
        poly.add((beta,), c)
    return poly


def _closure_terms(beta):
    """Terms of ``E[X^beta]`` when its central moment vanishes.

    Returns ``(coeff, gamma, mean_powers)`` with ``|gamma| < |beta|`` and
    ``mean_powers[i] = beta_i - gamma_i``.
    """
    ranges = [range(b + 1) for b in beta]
    out = []
    for gamma in itertools.product(*ranges):
        if gamma == tuple(beta):
            continue
        c = -1
        for b, g in zip(beta, gamma):
            c *= comb(b, g) * (-1) ** (b - g)
        out.append((c, gamma, tuple(b - g for b, g in zip(beta, gamma))))
    return out


def closure_polynomial(beta) -> MomentPolynomial:
    """``E[X^beta]`` in lower raw moments, from ``E[(X - mu)^beta] = 0``."""
    beta = tuple(beta)
    n = len(beta)
    poly = MomentPolynomial(n)
    for c, gamma, powers in _closure_terms(beta):
        mono = [gamma]
        for i, p in enumerate(powers):
            mono.extend([_unit(n, i)] * p)
        poly.add(mono, c)
    return poly


# ---------------------------------------------------------------------------
# closed system


@dataclass
class MomentODESystem:
    """Closed raw-moment equations of a network up to order ``order``.

    The right-hand side is ``linear @ [1, m] + lifted @ closure(m)`` where
    ``closure(m)`` evaluates the eliminated order ``order + 1`` moments from
    ``m`` through the kernel term list ``(targets, coeffs, factors)``.
    """

    species: tuple[str, ...]
    order: int
    tracked: list
    linear: sparse.csr_matrix
    closed: list
    lifted: sparse.csr_matrix
    term_targets: np.ndarray
    term_coeffs: np.ndarray
    term_factors: np.ndarray
    _position: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._position = {a: k for k, a in enumerate(self.tracked)}

    @property
    def n_equations(self) -> int:
        return len(self.tracked)

    def position(self, alpha) -> int:
        return self._position[tuple(alpha)]

    def closure_values(self, m: np.ndarray) -> np.ndarray:
        ext = np.concatenate(([1.0], m))
        return K.closure_eval(ext, self.term_factors, self.term_coeffs, self.term_targets,
                              len(self.closed))

    def rhs(self, t: float, m: np.ndarray) -> np.ndarray:
        ext = np.concatenate(([1.0], m))
        out = self.linear @ ext
        if self.closed:
            h = K.closure_eval(ext, self.term_factors, self.term_coeffs, self.term_targets,
                               len(self.closed))
            out += self.lifted @ h
        return out

    def polynomial(self, alpha) -> MomentPolynomial:
        """Closed right-hand side of one tracked index, expanded symbolically."""
        k = self.position(alpha)
        n = len(self.species)
        poly = MomentPolynomial(n)
        row = self.linear.getrow(k).tocoo()
        for col, c in zip(row.col, row.data):
            poly.add(() if col == 0 else (self.tracked[col - 1],), float(c))
        row = self.lifted.getrow(k).tocoo()
        for col, c in zip(row.col, row.data):
            poly += closure_polynomial(self.closed[col]).scaled(float(c))
        return poly

    def format(self) -> str:
        lines = []
        for alpha in self.tracked:
            lines.append(f"d/dt E[x^({','.join(map(str, alpha))})] = {self.polynomial(alpha).format()}")
        return "\n".join(lines) + "\n"


def close_system(net: ReactionNetwork, order: int) -> MomentODESystem:
    """Derive and close the raw-moment equations of ``net`` up to ``order``."""
    if order < 1:
        raise ValueError("order must be at least 1")
    max_deg = max((r.order for r in net.reactions), default=0)
    if order == 1 and max_deg > 1:
        raise ValueError("order 1 is only available for networks without bimolecular reactions")
    n = net.n_species
    tracked = enumerate_moment_indices(n, order)
    pos = {a: k + 1 for k, a in enumerate(tracked)}
    pos[(0,) * n] = 0
    props = [propensity_polynomial(net, j) for j in range(net.n_reactions)]

    lin_r, lin_c, lin_v = [], [], []
    hi_r, hi_c, hi_v = [], [], []
    closed_pos: dict[tuple[int, ...], int] = {}
    closed: list[tuple[int, ...]] = []
    for row, alpha in enumerate(tracked):
        for beta, c in _linear_rhs(net, alpha, props).items():
            col = pos.get(beta)
            if col is not None:
                lin_r.append(row)
                lin_c.append(col)
                lin_v.append(c)
                continue
            if sum(beta) != order + 1:  # pragma: no cover - degree bound
                raise AssertionError(f"unexpected moment order {sum(beta)}")
            q = closed_pos.get(beta)
            if q is None:
                q = closed_pos[beta] = len(closed)
                closed.append(beta)
            hi_r.append(row)
            hi_c.append(q)
            hi_v.append(c)

    nt = len(tracked)
    linear = sparse.csr_matrix((lin_v, (lin_r, lin_c)), shape=(nt, nt + 1))
    lifted = sparse.csr_matrix((hi_v, (hi_r, hi_c)), shape=(nt, len(closed)))
    linear.sum_duplicates()
    lifted.sum_duplicates()

    width = order + 2
    means = [pos[_unit(n, i)] for i in range(n)]
    targets, coeffs, factors = [], [], []
    for q, beta in enumerate(closed):
        for c, gamma, powers in _closure_terms(beta):
            f = [pos[gamma]]
            for i, p in enumerate(powers):
                f.extend([means[i]] * p)
            f.extend([0] * (width - len(f)))
            targets.append(q)
            coeffs.append(float(c))
            factors.append(f)
    return MomentODESystem(
        species=tuple(net.species),
        order=order,
        tracked=tracked,
        linear=linear,
        closed=closed,
        lifted=lifted,
        term_targets=np.asarray(targets, dtype=np.int64),
        term_coeffs=np.asarray(coeffs, dtype=np.float64),
        term_factors=np.asarray(factors, dtype=np.int64).reshape(-1, width),
    )


# ---------------------------------------------------------------------------
# moment values


@dataclass
class MomentVector:
    """Raw moments ``E[X^alpha]`` for a list of multi-indices at one time."""

    species: tuple[str, ...]
    indices: list
    values: np.ndarray
    time: float = 0.0
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.indices = [tuple(int(e) for e in a) for a in self.indices]
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if len(self.indices) != self.values.shape[0]:
            raise ValueError("indices and values differ in length")
        self._pos = {a: k for k, a in enumerate(self.indices)}
        if not self.warnings:
            self.warnings = self._check_realizable()

    def _check_realizable(self, tol: float = 1e-9) -> list[str]:
        out = []
        n = len(self.species)
        for i in range(n):
            e1, e2 = _unit(n, i), tuple(2 if k == i else 0 for k in range(n))
            if e1 in self._pos and e2 in self._pos:
                m1, m2 = self[e1], self[e2]
                if m2 < m1 * m1 - tol * max(1.0, m1 * m1):
                    out.append(f"{self.species[i]}: E[X^2]={m2!r} < E[X]^2={m1 * m1!r}")
        return out

    @property
    def order(self) -> int:
        return max((sum(a) for a in self.indices), default=0)

    def __getitem__(self, alpha) -> float:
        alpha = tuple(alpha)
        if not any(alpha):
            return 1.0
        try:
            return float(self.values[self._pos[alpha]])
        except KeyError:
            raise MissingMomentError(alpha) from None

    def __contains__(self, alpha) -> bool:
        return tuple(alpha) in self._pos or not any(alpha)

    def to_dict(self) -> dict:
        return {a: float(v) for a, v in zip(self.indices, self.values)}

    def species_index(self, species: int | str) -> int:
        return self.species.index(species) if isinstance(species, str) else int(species)

    def univariate(self, species: int | str, order: int | None = None) -> np.ndarray:
        """``(1, E[X_i], ..., E[X_i^order])`` for one species."""
        i = self.species_index(species)
        order = self.order if order is None else order
        n = len(self.species)
        return np.array([self[tuple(k if s == i else 0 for s in range(n))] for k in range(order + 1)])

    def means(self) -> np.ndarray:
        n = len(self.species)
        return np.array([self[_unit(n, i)] for i in range(n)])


def init_moments_from_state(x0, indices, species=None, time: float = 0.0) -> MomentVector:
    """Moments of the point mass at ``x0``: ``E[X^alpha] = x0^alpha``."""
    if isinstance(indices, MomentODESystem):
        species = indices.species if species is None else species
        indices = indices.tracked
    x0 = [int(v) for v in x0]
    species = tuple(species) if species is not None else tuple(f"X{i + 1}" for i in range(len(x0)))
    vals = []
    for alpha in indices:
        v = 1
        for x, a in zip(x0, alpha):
            v *= x ** a
        vals.append(float(v))
    return MomentVector(species, list(indices), np.array(vals), time)


def moments_from_distribution(dist, indices) -> MomentVector:
    """Raw moments of a sparse distribution for the given multi-indices."""
    from .direct import raw_moments

    if isinstance(indices, MomentODESystem):
        indices = indices.tracked
    return MomentVector(tuple(dist.species), list(indices), raw_moments(dist, indices), dist.time)


def integrate_moments(system: MomentODESystem, init: MomentVector, t_end: float,
                      rtol: float = 1e-8, atol: float = 1e-10, method: str = "RK45",
                      t_eval=None):
    """Integrate the closed moment equations from ``init.time`` to ``t_end``.

    Uses an adaptive embedded explicit Runge-Kutta pair. With ``t_eval`` a list
    of :class:`MomentVector` (one per requested time) is returned instead of
    the final vector.
    """
    m0 = np.array([init[a] for a in system.tracked])
    t0 = init.time
    if t_end < t0:
        raise ValueError("t_end lies before the initial time")
    if t_eval is None and (t_end == t0 or system.linear.nnz == 0 and not system.closed):
        return MomentVector(system.species, system.tracked, m0, t_end)
    sol = solve_ivp(system.rhs, (t0, t_end), m0, method=method, rtol=rtol, atol=atol,
                    t_eval=None if t_eval is None else np.asarray(t_eval, dtype=float))
    if sol.status != 0 or not np.all(np.isfinite(sol.y)):
        raise MomentIntegrationError(
            f"moment integration failed at t={sol.t[-1]:g}: {sol.message} (order {system.order}; "
            "the closed system may be stiff or unstable)"
        )
    log.debug("moment ODE order %d: %d rhs evaluations", system.order, sol.nfev)

    def make(t, y):
        mv = MomentVector(system.species, system.tracked, y, float(t))
        for w in mv.warnings:
            warnings.warn(f"unrealizable moments at t={t:g}: {w}", RealizabilityWarning, stacklevel=3)
        return mv

    if t_eval is not None:
        return [make(t, sol.y[:, k]) for k, t in enumerate(sol.t)]
    return make(sol.t[-1], sol.y[:, -1])


# ---------------------------------------------------------------------------
# central <-> raw


def _binomial_sum(values, alpha, shifts):
    """``sum_{gamma <= alpha} prod_i C(alpha_i, gamma_i) shift_i^(alpha_i-gamma_i) values[gamma]``."""
    acc = []
    for gamma in itertools.product(*(range(a + 1) for a in alpha)):
        c = 1.0
        for a, g, s in zip(alpha, gamma, shifts):
            if a != g:
                c *= comb(a, g) * s ** (a - g)
        if not any(gamma):
            v = 1.0
        else:
            try:
                v = values[gamma]
            except KeyError:
                raise MissingMomentError(gamma) from None
        acc.append(c * v)
    return math.fsum(acc)


def central_from_raw(raw, indices) -> dict:
    """Central moments ``E[(X - mu)^alpha]`` from a raw-moment mapping."""
    raw = raw.to_dict() if isinstance(raw, MomentVector) else dict(raw)
    indices = [tuple(a) for a in indices]
    n = len(indices[0]) if indices else 0
    try:
        mu = [raw[_unit(n, i)] for i in range(n)]
    except KeyError as exc:
        raise MissingMomentError(exc.args[0]) from None
    neg = [-m for m in mu]
    return {a: _binomial_sum(raw, a, neg) for a in indices}


def raw_from_central(central, means, indices) -> dict:
    """Inverse of :func:`central_from_raw`; order-one central moments are zero."""
    central = dict(central)
    means = [float(m) for m in means]
    n = len(means)
    for i in range(n):
        central[_unit(n, i)] = 0.0
    return {tuple(a): _binomial_sum(central, tuple(a), means) for a in indices}


# ---------------------------------------------------------------------------
# CSV dump


def write_moments_csv(mv: MomentVector, path_or_buf) -> None:
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        fh.write(f"# t={mv.time!r}, order={mv.order}, species={';'.join(mv.species)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["multi_index", "value"])
        for a in sorted(mv.indices, key=_grlex_key):
            w.writerow([format_multi_index(a), repr(mv[a])])
    finally:
        if own:
            fh.close()


def read_moments_csv(path_or_buf) -> MomentVector:
    if isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__"):
        with open(path_or_buf, newline="") as fh:
            text = fh.read()
    else:
        text = path_or_buf.read()
    time, species = 0.0, None
    rows = []
    for line in text.splitlines():
        if line.startswith("#"):
            for part in line[1:].split(","):
                if "=" not in part:
                    continue
                key, val = (s.strip() for s in part.split("=", 1))
                if key == "t":
                    time = float(val)
                elif key == "species":
                    species = tuple(s for s in val.split(";") if s)
        elif line.strip():
            rows.append(line)
    reader = csv.reader(io.StringIO("\n".join(rows)))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["multi_index", "value"]:
        raise ValueError("moment CSV must start with a 'multi_index,value' header")
    indices, values = [], []
    for rec in reader:
        if len(rec) != 2:
            raise ValueError(f"bad moment row {rec!r}")
        indices.append(parse_multi_index(rec[0]))
        values.append(float(rec[1]))
    if not indices:
        raise ValueError("moment CSV has no rows")
    n = len(indices[0])
    if any(len(a) != n for a in indices):
        raise ValueError("multi-indices of different lengths")
    if species is None or len(species) != n:
        species = tuple(f"X{i + 1}" for i in range(n))
    return MomentVector(species, indices, np.array(values), time)
