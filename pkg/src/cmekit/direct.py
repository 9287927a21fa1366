"""Direct integration of the chemical master equation on a truncated state space.

The support is kept in a :class:`StateSpace`: a growable table of population
vectors with an open-addressing hash index and, for every state and
reaction, the row of its successor state (``-1`` while the successor is not
in the table). Explicit Euler steps are then a single gather/scatter sweep
over the active rows plus a small pass over the frontier.

Truncation follows the significance thresholds: at the start of each step,
states with probability ``<= delta1`` are dropped; a state outside the
support is admitted when a single inflow term ``h * a_j(x) * p(x)`` into it
exceeds ``delta2``. All dropped probability is accounted as mass defect.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from . import _kernels as K
from .network import ReactionNetwork

log = logging.getLogger(__name__)

__all__ = [
    "NegativeProbabilityError",
    "SparseDistribution",
    "TruncationConfig",
    "StateSpace",
    "point_mass",
    "prune",
    "euler_step",
    "integrate",
    "marginal",
    "conditional_marginal",
    "empirical_moments",
    "raw_moments",
    "write_distribution_csv",
    "read_distribution_csv",
]


class NegativeProbabilityError(RuntimeError):
    """The Euler step is too large for the outflow rate of some state."""

    def __init__(self, state, rate: float, h: float):
        self.state = tuple(int(v) for v in state)
        self.rate = rate
        self.h = h
        super().__init__(
            f"step h={h:g} too large at state {self.state}: h * total rate = {h * rate:g} >= 1"
        )


@dataclass
class SparseDistribution:
    """Probabilities of a finite set of population vectors.

    ``states`` rows are kept in lexicographic order and every stored
    probability is positive. ``mass_defect`` is the probability discarded
    by truncation so far.
    """

    species: tuple[str, ...]
    states: np.ndarray
    probs: np.ndarray
    time: float = 0.0
    mass_defect: float = 0.0

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.int64).reshape(-1, len(self.species))
        probs = np.asarray(self.probs, dtype=np.float64).reshape(-1)
        if states.shape[0] != probs.shape[0]:
            raise ValueError("states and probs differ in length")
        keep = probs > 0
        states, probs = states[keep], probs[keep]
        if states.shape[0] > 1:
            order = np.lexsort(states.T[::-1])
            states, probs = states[order], probs[order]
        self.states, self.probs = states, probs

    def __len__(self) -> int:
        return self.probs.shape[0]

    def total(self) -> float:
        return math.fsum(self.probs)

    def to_dict(self) -> dict[tuple[int, ...], float]:
        return {tuple(int(v) for v in s): float(q) for s, q in zip(self.states, self.probs)}

    def __getitem__(self, state) -> float:
        row = np.asarray(state, dtype=np.int64)
        hit = np.flatnonzero(np.all(self.states == row, axis=1))
        return float(self.probs[hit[0]]) if hit.size else 0.0

    @classmethod
    def from_dict(cls, species, mapping, time=0.0, mass_defect=0.0):
        species = tuple(species)
        states = np.array(list(mapping.keys()), dtype=np.int64).reshape(-1, len(species))
        probs = np.array(list(mapping.values()), dtype=np.float64)
        return cls(species, states, probs, time, mass_defect)


def point_mass(net: ReactionNetwork, state=None) -> SparseDistribution:
    state = net.initial_state if state is None else state
    return SparseDistribution(net.species, np.array([state]), np.array([1.0]))


@dataclass(frozen=True)
class TruncationConfig:
    """Thresholds and step control for :func:`integrate`.

    ``step_size=None`` picks ``h = 0.1 / max_x sum_j a_j(x)`` over the current
    support at every step.

    ``truncation_interval=None`` prunes before every Euler step and admits a
    successor when its one-step inflow ``h * a_j(x) * p(x)`` exceeds
    ``delta2``. With an interval ``H``, pruning happens only at multiples of
    ``H`` and admission compares the inflow projected over the interval,
    ``H * a_j(x) * p(x)``, against ``delta2``.
    """

    t_end: float
    delta1: float = 1e-15
    delta2: float | None = None
    step_size: float | None = None
    truncation_interval: float | None = None
    compact_every: int = 50

    def __post_init__(self):
        if self.delta1 < 0 or (self.delta2 is not None and self.delta2 < 0):
            raise ValueError("thresholds must be non-negative")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.t_end < 0:
            raise ValueError("t_end must be non-negative")
        if self.truncation_interval is not None and not self.truncation_interval > 0:
            raise ValueError("truncation_interval must be positive")

    @property
    def inflow_threshold(self) -> float:
        return self.delta1 if self.delta2 is None else self.delta2


def _next_pow2(n: int) -> int:
    return 1 << max(4, int(n - 1).bit_length())


class StateSpace:
    """Mutable truncated support of a network used during integration."""

    def __init__(self, net: ReactionNetwork, states, probs, capacity: int = 1024):
        self.net = net
        self.n = net.n_species
        self.R = net.n_reactions
        self.V = net.stoichiometry.astype(np.int32)
        self.pairs = net.reactant_pairs
        self.rates = net.rates
        states = np.asarray(states, dtype=np.int32).reshape(-1, self.n)
        probs = np.asarray(probs, dtype=np.float64)
        cap = max(capacity, 2 * states.shape[0])
        self._alloc(cap)
        self.size = 0
        self.mass_defect = 0.0
        self._cand = np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64), np.empty(0)
        self._grow_candidates(1024)
        idx = self._add_rows(states)
        self.p[idx] = probs
        self.active[idx] = probs > 0

    # -- storage -----------------------------------------------------------
    def _alloc(self, cap: int):
        self.cap = cap
        self.X = np.zeros((cap, self.n), dtype=np.int32)
        self.succ = np.full((cap, self.R), -1, dtype=np.int32)
        self.p = np.zeros(cap)
        self.newp = np.zeros(cap)
        self.active = np.zeros(cap, dtype=bool)
        self.big = np.zeros(cap, dtype=bool)
        self.slots = np.full(_next_pow2(2 * cap), -1, dtype=np.int64)

    def _grow(self, need: int):
        if need <= self.cap:
            return
        cap = self.cap
        while cap < need:
            cap *= 2
        old = (self.X, self.succ, self.p, self.newp, self.active, self.big)
        s = self.size
        self._alloc(cap)
        for new, src in zip((self.X, self.succ, self.p, self.newp, self.active, self.big), old):
            new[:s] = src[:s]
        K.table_insert(self.slots, self.X, np.arange(s, dtype=np.int64))

    def _grow_candidates(self, n: int):
        self._cand = (
            np.empty(n, dtype=np.int64),
            np.empty(n, dtype=np.int64),
            np.empty(n, dtype=np.float64),
        )

    def lookup(self, rows) -> np.ndarray:
        rows = np.ascontiguousarray(rows, dtype=np.int32).reshape(-1, self.n)
        return K.table_lookup(self.slots, self.X, rows)

    def _add_rows(self, rows) -> np.ndarray:
        """Insert states not yet in the table and link them to their neighbours."""
        rows = np.ascontiguousarray(rows, dtype=np.int32).reshape(-1, self.n)
        m = rows.shape[0]
        self._grow(self.size + m)
        idx = np.arange(self.size, self.size + m, dtype=np.int64)
        self.X[idx] = rows
        self.p[idx] = 0.0
        self.active[idx] = False
        self.succ[idx] = -1
        K.table_insert(self.slots, self.X, idx)
        self.size += m
        self._link(idx, predecessors=True)
        return idx

    def _link(self, idx, predecessors: bool):
        if idx.size == 0:
            return
        Y = self.X[idx]
        A = K.propensities(Y, self.pairs, self.rates)
        for j in range(self.R):
            fire = A[:, j] > 0
            if fire.any():
                hit = self.lookup(Y[fire] + self.V[j])
                self.succ[idx[fire], j] = hit
            if not predecessors:
                continue
            pred = Y - self.V[j]
            ok = np.all(pred >= 0, axis=1)
            if not ok.any():
                continue
            rows = self.lookup(pred[ok])
            found = rows >= 0
            if not found.any():
                continue
            r = rows[found]
            a = K.propensities(self.X[r], self.pairs[j : j + 1], self.rates[j : j + 1])[:, 0]
            live = a > 0
            self.succ[r[live], j] = idx[ok][found][live]

    def compact(self):
        """Drop inactive rows and rebuild the index."""
        keep = np.flatnonzero(self.active[: self.size])
        X, p = self.X[keep].copy(), self.p[keep].copy()
        self._alloc(max(1024, 2 * keep.size))
        m = keep.size
        self.X[:m] = X
        self.p[:m] = p
        self.active[:m] = True
        self.size = m
        idx = np.arange(m, dtype=np.int64)
        K.table_insert(self.slots, self.X, idx)
        self._link(idx, predecessors=False)

    @property
    def n_active(self) -> int:
        return int(np.count_nonzero(self.active[: self.size]))

    def max_exit_rate(self) -> float:
        act = np.flatnonzero(self.active[: self.size])
        if act.size == 0:
            return 0.0
        return float(K.propensities(self.X[act], self.pairs, self.rates).sum(axis=1).max())

    # -- dynamics ----------------------------------------------------------
    def prune(self, delta1: float) -> float:
        mass = K.prune(self.p, self.active, self.size, delta1)
        self.mass_defect += mass
        return mass

    def euler_step(self, h: float, delta2: float) -> float:
        """One explicit Euler step; returns the largest total exit rate seen."""
        while True:
            ck, cj, cf = self._cand
            ncand, max_out, bad = K.euler_sweep(
                self.X, self.succ, self.p, self.active, self.size, self.pairs, self.rates,
                h, delta2, self.newp, self.big, ck, cj, cf,
            )
            if ncand <= ck.shape[0]:
                break
            self._grow_candidates(2 * ncand)
        if bad >= 0:
            rate = float(K.propensities(self.X[bad : bad + 1], self.pairs, self.rates).sum())
            raise NegativeProbabilityError(self.X[bad], rate, h)
        lost = K.resolve_inactive(self.newp, self.active, self.big, self.size)
        if ncand:
            ck, cj, cf = ck[:ncand], cj[:ncand], cf[:ncand]
            targets = self.X[ck] + self.V[cj]
            sig = cf > delta2
            if sig.any():
                fresh = np.unique(targets[sig], axis=0)
                new = self._add_rows(fresh)
                self.newp[new] = 0.0
                self.active[new] = True
            idx = self.lookup(targets)
            found = idx >= 0
            K.scatter_add(self.newp, idx[found], cf[found])
            lost += math.fsum(cf[~found])
        self.p, self.newp = self.newp, self.p
        self.mass_defect += lost
        return max_out

    def distribution(self, time: float, mass_defect: float | None = None) -> SparseDistribution:
        act = np.flatnonzero(self.active[: self.size] & (self.p[: self.size] > 0))
        return SparseDistribution(
            self.net.species,
            self.X[act].astype(np.int64),
            self.p[act].copy(),
            time,
            self.mass_defect if mass_defect is None else mass_defect,
        )


def prune(dist: SparseDistribution, delta1: float) -> SparseDistribution:
    keep = dist.probs > delta1
    removed = math.fsum(dist.probs[~keep])
    return SparseDistribution(
        dist.species, dist.states[keep], dist.probs[keep], dist.time, dist.mass_defect + removed
    )


def euler_step(net: ReactionNetwork, dist: SparseDistribution, h: float,
               delta2: float = 0.0) -> SparseDistribution:
    """Advance ``dist`` by one Euler step of length ``h`` without pruning."""
    space = StateSpace(net, dist.states, dist.probs)
    space.mass_defect = dist.mass_defect
    space.euler_step(h, delta2)
    return space.distribution(dist.time + h)


def integrate(net: ReactionNetwork, dist0: SparseDistribution,
              config: TruncationConfig) -> SparseDistribution:
    """Integrate the master equation from ``dist0`` up to ``config.t_end``.

    The returned distribution holds the states that survive a final pruning
    at ``t_end``; its ``mass_defect`` equals the initial total mass minus
    the retained mass.
    """
    span = config.t_end - dist0.time
    if span < 0:
        raise ValueError("t_end lies before the initial time")
    if span == 0:
        return replace(dist0)
    mass0 = dist0.total() + dist0.mass_defect
    space = StateSpace(net, dist0.states, dist0.probs)
    space.mass_defect = dist0.mass_defect
    delta1, delta2 = config.delta1, config.inflow_threshold

    if config.step_size is not None:
        n_steps = max(1, math.ceil(span / config.step_size - 1e-9))
        fixed_h = span / n_steps
    else:
        n_steps, fixed_h = None, None
    interval = config.truncation_interval
    next_prune = dist0.time
    t = dist0.time
    max_rate = space.max_exit_rate()
    step = 0
    while True:
        if fixed_h is not None:
            if step == n_steps:
                break
            h = fixed_h
        else:
            remaining = config.t_end - t
            if remaining <= 1e-12 * max(1.0, abs(config.t_end)):
                break
            h = min(remaining, 0.1 / max_rate) if max_rate > 0 else remaining
        if interval is None:
            space.prune(delta1)
            admit = delta2
        else:
            if t >= next_prune - 1e-9 * h:
                space.prune(delta1)
                next_prune += interval * max(1, math.floor((t - next_prune) / interval + 1 + 1e-9))
            admit = delta2 * h / interval
        max_rate = space.euler_step(h, admit)
        step += 1
        t = dist0.time + step * fixed_h if fixed_h is not None else t + h
        if config.compact_every and step % config.compact_every == 0:
            if space.size - space.n_active > max(space.n_active, 4096):
                space.compact()
        if log.isEnabledFor(logging.DEBUG) and step % 1000 == 0:
            log.debug("t=%.4g states=%d defect=%.3g", t, space.n_active, space.mass_defect)
    space.prune(delta1)
    dist = space.distribution(config.t_end)
    dist.mass_defect = mass0 - dist.total()
    return dist


# ---------------------------------------------------------------------------
# derived quantities


def marginal(dist: SparseDistribution, species: int) -> dict[int, float]:
    col = dist.states[:, species]
    if col.size == 0:
        return {}
    sums = np.bincount(col, weights=dist.probs)
    nz = np.flatnonzero(sums > 0)
    return {int(k): float(sums[k]) for k in nz}


def conditional_marginal(dist: SparseDistribution, condition: dict[int, int],
                         species: int) -> dict[int, float]:
    mask = np.ones(len(dist), dtype=bool)
    for i, v in condition.items():
        mask &= dist.states[:, i] == v
    mass = math.fsum(dist.probs[mask])
    if mass <= 0:
        raise ValueError(f"conditioning event {condition} has zero probability")
    sub = SparseDistribution(dist.species, dist.states[mask], dist.probs[mask] / mass, dist.time)
    return marginal(sub, species)


def empirical_moments(dist, species: int, order: int) -> np.ndarray:
    """Raw moments ``E[X_i^k]``, ``k = 0..order``, renormalized over retained mass.

    ``dist`` may also be a one-dimensional ``{count: probability}`` mapping,
    in which case ``species`` is ignored.
    """
    if isinstance(dist, dict):
        x = np.array(list(dist.keys()), dtype=np.float64)
        w = np.array(list(dist.values()), dtype=np.float64)
    else:
        x = dist.states[:, species].astype(np.float64)
        w = dist.probs
    total = math.fsum(w)
    if total <= 0:
        raise ValueError("empty distribution has no moments")
    out = np.empty(order + 1)
    xk = np.ones_like(x)
    for k in range(order + 1):
        out[k] = math.fsum(w * xk) / total
        xk = xk * x
    return out


def raw_moments(dist: SparseDistribution, indices) -> np.ndarray:
    """``E[X^alpha]`` for each multi-index, renormalized over retained mass."""
    total = math.fsum(dist.probs)
    if total <= 0:
        raise ValueError("empty distribution has no moments")
    X = dist.states.astype(np.float64)
    top = max((max(a) for a in indices), default=0)
    powers = [[np.ones(len(dist))] for _ in range(X.shape[1])]
    for i in range(X.shape[1]):
        for _ in range(top):
            powers[i].append(powers[i][-1] * X[:, i])
    out = np.empty(len(indices))
    for r, alpha in enumerate(indices):
        w = dist.probs
        for i, e in enumerate(alpha):
            if e:
                w = w * powers[i][e]
        out[r] = math.fsum(w) / total
    return out


# ---------------------------------------------------------------------------
# CSV dump


def write_distribution_csv(dist: SparseDistribution, path_or_buf) -> None:
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(dist.species) + ["probability"])
        for s, q in zip(dist.states, dist.probs):
            w.writerow([int(v) for v in s] + [repr(float(q))])
        fh.write(f"# t={dist.time!r}, mass_defect={dist.mass_defect!r}\n")
    finally:
        if own:
            fh.close()


def read_distribution_csv(path_or_buf) -> SparseDistribution:
    if isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__"):
        with open(path_or_buf, newline="") as fh:
            text = fh.read()
    else:
        text = path_or_buf.read()
    time, defect = 0.0, 0.0
    body = []
    for line in text.splitlines():
        if line.startswith("#"):
            for part in line[1:].split(","):
                if "=" in part:
                    key, val = (s.strip() for s in part.split("=", 1))
                    if key == "t":
                        time = float(val)
                    elif key == "mass_defect":
                        defect = float(val)
        elif line.strip():
            body.append(line)
    rows = list(csv.reader(io.StringIO("\n".join(body))))
    header, data = rows[0], rows[1:]
    if header[-1].strip() != "probability":
        raise ValueError("last column must be 'probability'")
    species = tuple(h.strip() for h in header[:-1])
    states = np.array([[int(v) for v in r[:-1]] for r in data], dtype=np.int64)
    probs = np.array([float(r[-1]) for r in data])
    return SparseDistribution(species, states.reshape(-1, len(species)), probs, time, defect)
