"""End-to-end benchmark runs: direct solve, closure per order, reconstruction, error tables.

A run is described by an :class:`ExperimentConfig` (usually parsed from a
``key = value`` file) and produces an :class:`ExperimentReport` whose tables
are written as CSV files:

``<name>_direct.csv``
    ``t_end, delta1, delta2, n_states, mass_defect, wall_seconds``
``<name>_moments.csv``
    ``order, n_equations, err_ord_1..err_ord_<max_order>, wall_seconds``
``<name>_reconstruction.csv``
    ``order, eps_<species>, eps_star_<species>, ...``
``<name>_fig_<species>_M<order>.csv``
    ``count, direct, closure_maxent, direct_maxent`` (plot data)

Cells that fail hold ``failed: <reason>``; the rest of the grid still runs.
"""
from __future__ import annotations

import csv
import logging
import math
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import reduce
from pathlib import Path

import numpy as np

from .closure import (
    MomentVector,
    close_system,
    init_moments_from_state,
    integrate_moments,
    moments_from_distribution,
)
from .direct import SparseDistribution, TruncationConfig, empirical_moments, integrate, marginal, point_mass
from .maxent import MaxEntOptions, MomentConstraints, discretize, solve_dual
from .network import BUILTIN_MODELS, REPORTED_SPECIES, ReactionNetwork, builtin_model, parse_network

log = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "ExperimentReport",
    "MomentRow",
    "ReconstructionRow",
    "DirectSummary",
    "chebyshev_distance",
    "relative_moment_error",
    "moment_error_detail",
    "species_lattice",
    "parse_config",
    "load_config",
    "load_network",
    "run_experiment",
]


class ConfigError(ValueError):
    """Malformed experiment configuration."""


# ---------------------------------------------------------------------------
# metrics


def _on_lattice(k: int, lattice) -> bool:
    step, offset = lattice
    return (k - offset) % step == 0


def chebyshev_distance(p: dict, q: dict, lattice=(1, 0), tol: float = 1e-12) -> float:
    """``max_x |p(x) - q(x)|`` over lattice points; missing points count as 0.

    ``lattice = (step, offset)`` names the admissible counts
    ``offset + k * step``. Mass above ``tol`` on any other count in either
    distribution raises ``ValueError``.
    """
    step, offset = int(lattice[0]), int(lattice[1])
    if step < 1 or not 0 <= offset < step:
        raise ValueError(f"invalid lattice {lattice!r}")
    best = 0.0
    for name, d in (("first", p), ("second", q)):
        for k, v in d.items():
            if abs(v) > tol and not _on_lattice(int(k), (step, offset)):
                raise ValueError(
                    f"lattice mismatch: the {name} distribution has mass {v:.3g} at {k}, "
                    f"off the lattice {offset} + {step}k"
                )
    for k in set(p) | set(q):
        if _on_lattice(int(k), (step, offset)):
            best = max(best, abs(p.get(k, 0.0) - q.get(k, 0.0)))
    return best


def _power_moments(mv, k: int) -> dict:
    """Per-species ``E[X_i^k]`` from a MomentVector, mapping or plain sequence."""
    if isinstance(mv, MomentVector):
        n = len(mv.species)
        return {s: mv[tuple(k if j == i else 0 for j in range(n))] for i, s in enumerate(mv.species)}
    if isinstance(mv, dict):
        out = {}
        for s, seq in mv.items():
            seq = np.atleast_1d(seq)
            out[s] = float(seq[k] if seq.shape[0] > k and seq.shape[0] > 1 else seq[-1])
        return out
    return {i: float(v) for i, v in enumerate(np.atleast_1d(mv))}


def moment_error_detail(approx, reference, k: int):
    """``(error, worst species, excluded species)`` for order ``k``.

    ``approx`` and ``reference`` are MomentVectors, ``{species: (mu_0..mu_M)}``
    mappings, or sequences holding ``E[X_i^k]`` per species directly.
    Species whose reference moment is zero are excluded.
    """
    a, r = _power_moments(approx, k), _power_moments(reference, k)
    missing = set(r) - set(a)
    if missing:
        raise KeyError(f"approximation lacks species {sorted(map(str, missing))}")
    excluded = [s for s, v in r.items() if v == 0.0]
    best, worst = -1.0, None
    for s, v in r.items():
        if v == 0.0:
            continue
        e = abs(a[s] - v) / abs(v)
        if e > best:
            best, worst = e, s
    if worst is None:
        raise ValueError(f"every reference moment of order {k} is zero")
    return best, worst, excluded


def relative_moment_error(approx, reference, k: int) -> float:
    """``max_i |approx_i - ref_i| / |ref_i|`` over species for ``E[X_i^k]``."""
    return moment_error_detail(approx, reference, k)[0]


def species_lattice(net: ReactionNetwork, species: int | str) -> tuple[int, int]:
    """``(step, offset)`` of the counts a species can reach.

    The step is the gcd of the species' net changes (1 when that exceeds 2,
    which the discretization does not support); the offset is the initial
    count modulo the step.
    """
    i = net.index(species)
    changes = [abs(int(v)) for v in net.stoichiometry[:, i] if v]
    g = reduce(math.gcd, changes, 0) or 1
    step = g if g in (1, 2) else 1
    return step, int(net.initial_state[i]) % step


# ---------------------------------------------------------------------------
# configuration


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _opt_float(text: str):
    t = text.strip().lower()
    return None if t in ("", "none", "auto") else float(t)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a benchmark run needs.

    ``model`` is a built-in name or a path to a network file. ``orders`` may
    be empty (direct solve only). ``species=None`` reconstructs the model's
    reported species (all species for custom networks).
    """

    model: str
    t_end: float
    orders: tuple = (2, 3, 4, 5)
    max_order: int = 5
    truncation: TruncationConfig | None = None
    maxent: MaxEntOptions = field(default_factory=MaxEntOptions)
    species: tuple | None = None
    out: str | None = None
    name: str | None = None
    rates: tuple = ()
    direct: bool = True
    timings: bool = True
    figures: bool = True
    jobs: int = 1

    def __post_init__(self):
        if not self.t_end > 0:
            raise ConfigError("t_end must be positive")
        orders = tuple(int(m) for m in self.orders)
        object.__setattr__(self, "orders", orders)
        if self.max_order < 2:
            raise ConfigError("max_order must be at least 2")
        bad = [m for m in orders if not 2 <= m <= self.max_order]
        if bad:
            raise ConfigError(f"orders {bad} outside 2..{self.max_order}")
        if len(set(orders)) != len(orders):
            raise ConfigError("orders must be distinct")
        if self.jobs < 1:
            raise ConfigError("jobs must be at least 1")
        trunc = self.truncation or TruncationConfig(t_end=self.t_end)
        if trunc.t_end != self.t_end:
            trunc = replace(trunc, t_end=self.t_end)
        object.__setattr__(self, "truncation", trunc)
        object.__setattr__(self, "rates", tuple(sorted(dict(self.rates).items())))

    @property
    def label(self) -> str:
        return self.name or Path(self.model).stem


_KEYS = {
    "model", "t_end", "orders", "max_order", "delta", "delta1", "delta2", "h", "step_size",
    "truncation_interval", "nodes", "max_nodes", "tol", "max_iter", "lnz_tol", "bounded_fallback",
    "upper_bound", "species", "out", "outputs", "name", "direct", "timings", "figures", "jobs",
}


def parse_config(text: str, base_dir: str | os.PathLike | None = None) -> ExperimentConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    Keys: ``model, t_end, orders`` (comma list, may be empty), ``max_order,
    delta`` (alias ``delta1``), ``delta2, h`` (alias ``step_size``),
    ``truncation_interval, nodes, max_nodes, tol, max_iter, lnz_tol,
    bounded_fallback, upper_bound, species, out`` (alias ``outputs``),
    ``name, direct, timings, figures, jobs`` and ``rate.<name>`` overrides.
    Relative model and output paths resolve against ``base_dir``.
    """
    raw: dict[str, str] = {}
    rates: dict[str, float] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.lower()
        if key.startswith("rate."):
            try:
                rates[key[5:]] = float(value)
            except ValueError:
                raise ConfigError(f"line {lineno}: bad rate value {value!r}") from None
            continue
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value
    if "model" not in raw or "t_end" not in raw:
        raise ConfigError("config needs 'model' and 't_end'")
    try:
        model = raw["model"]
        if base_dir is not None and model not in BUILTIN_MODELS:
            model = str(Path(base_dir) / model)
        t_end = float(raw["t_end"])
        orders = tuple(int(v) for v in raw.get("orders", "2,3,4,5").replace(" ", "").split(",") if v)
        delta1 = float(raw.get("delta", raw.get("delta1", "1e-15")))
        trunc = TruncationConfig(
            t_end=t_end,
            delta1=delta1,
            delta2=_opt_float(raw.get("delta2", "")),
            step_size=_opt_float(raw.get("h", raw.get("step_size", ""))),
            truncation_interval=_opt_float(raw.get("truncation_interval", "")),
        )
        defaults = MaxEntOptions()
        maxent = MaxEntOptions(
            tol=float(raw.get("tol", defaults.tol)),
            max_iter=int(raw.get("max_iter", defaults.max_iter)),
            nodes=int(raw.get("nodes", defaults.nodes)),
            max_nodes=int(raw.get("max_nodes", defaults.max_nodes)),
            lnz_tol=float(raw.get("lnz_tol", defaults.lnz_tol)),
            bounded_fallback=_bool(raw.get("bounded_fallback", "true")),
            upper_bound=_opt_float(raw.get("upper_bound", "")),
        )
        species = raw.get("species")
        species = tuple(s.strip() for s in species.split(",") if s.strip()) if species else None
        out = raw.get("out", raw.get("outputs"))
        if out is not None and base_dir is not None:
            out = str(Path(base_dir) / out)
        return ExperimentConfig(
            model=model,
            t_end=t_end,
            orders=orders,
            max_order=int(raw.get("max_order", max(5, *orders) if orders else 5)),
            truncation=trunc,
            maxent=maxent,
            species=species,
            out=out,
            name=raw.get("name"),
            rates=tuple(rates.items()),
            direct=_bool(raw.get("direct", "true")),
            timings=_bool(raw.get("timings", "true")),
            figures=_bool(raw.get("figures", "true")),
            jobs=int(raw.get("jobs", "1")),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), base_dir=path.parent)


def load_network(model: str, rates=()) -> ReactionNetwork:
    """Built-in model by name, or a network file; ``rates`` overrides by name.

    For network files a rate name is the 1-based reaction number (``r3``)
    or the bare number.
    """
    rates = dict(rates)
    if model in BUILTIN_MODELS:
        return builtin_model(model, **rates)
    net = parse_network(Path(model).read_text())
    if rates:
        values = list(net.rates)
        for key, v in rates.items():
            idx = int(key.lstrip("rR")) - 1
            if not 0 <= idx < len(values):
                raise ConfigError(f"no reaction {key!r} in {model}")
            values[idx] = v
        net = net.with_rates(values)
    return net


# ---------------------------------------------------------------------------
# report


@dataclass
class DirectSummary:
    n_states: int
    mass_defect: float
    wall_seconds: float


@dataclass
class MomentRow:
    order: int
    n_equations: int
    errors: list  # per order 1..max_order: float, None (not computed) or "failed: ..."
    wall_seconds: float
    status: str = "ok"


@dataclass
class ReconstructionRow:
    order: int
    eps: dict  # species -> float or "failed: ..."
    eps_star: dict


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    species: list
    direct: DirectSummary | None = None
    moment_rows: list = field(default_factory=list)
    reconstruction_rows: list = field(default_factory=list)
    figures: dict = field(default_factory=dict)  # (species, order) -> {count: (direct, closure, star)}
    notes: list = field(default_factory=list)

    def moment_row(self, order: int) -> MomentRow:
        return next(r for r in self.moment_rows if r.order == order)

    def reconstruction_row(self, order: int) -> ReconstructionRow:
        return next(r for r in self.reconstruction_rows if r.order == order)

    # -- tables --------------------------------------------------------------

    def _time(self, v: float) -> str:
        return _fmt(v) if self.config.timings else ""

    def direct_table(self) -> list[list[str]]:
        tc = self.config.truncation
        header = ["t_end", "delta1", "delta2", "n_states", "mass_defect", "wall_seconds"]
        if self.direct is None:
            return [header]
        d = self.direct
        return [header, [_fmt(self.config.t_end), _fmt(tc.delta1), _fmt(tc.inflow_threshold),
                         str(d.n_states), _fmt(d.mass_defect), self._time(d.wall_seconds)]]

    def moment_table(self) -> list[list[str]]:
        K = self.config.max_order
        rows = [["order", "n_equations", *[f"err_ord_{k}" for k in range(1, K + 1)], "wall_seconds"]]
        for r in sorted(self.moment_rows, key=lambda r: r.order):
            rows.append([str(r.order), str(r.n_equations), *[_fmt(e) for e in r.errors],
                         self._time(r.wall_seconds)])
        return rows

    def reconstruction_table(self) -> list[list[str]]:
        header = ["order"]
        for s in self.species:
            header.append(f"eps_{s}")
            if self.direct is not None:
                header.append(f"eps_star_{s}")
        rows = [header]
        for r in sorted(self.reconstruction_rows, key=lambda r: r.order):
            row = [str(r.order)]
            for s in self.species:
                row.append(_fmt(r.eps.get(s)))
                if self.direct is not None:
                    row.append(_fmt(r.eps_star.get(s)))
            rows.append(row)
        return rows

    def write(self, out_dir: str | os.PathLike) -> list[Path]:
        """Write every table (and figure data) to ``out_dir``; returns the paths."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        label = self.config.label
        written = [
            _write_csv(out / f"{label}_direct.csv", self.direct_table()),
        ]
        if self.moment_rows:
            written.append(_write_csv(out / f"{label}_moments.csv", self.moment_table()))
        if self.reconstruction_rows:
            written.append(_write_csv(out / f"{label}_reconstruction.csv", self.reconstruction_table()))
        for (s, M), data in sorted(self.figures.items(), key=lambda kv: (str(kv[0][0]), kv[0][1])):
            rows = [["count", "direct", "closure_maxent", "direct_maxent"]]
            for k in sorted(data):
                rows.append([str(k), *[_fmt(v) for v in data[k]]])
            written.append(_write_csv(out / f"{label}_fig_{_safe(s)}_M{M}.csv", rows))
        return written


def _safe(name) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in str(name))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    return format(float(v), ".10g")


def _write_csv(path: Path, rows) -> Path:
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    return path


# ---------------------------------------------------------------------------
# running


def _failed(exc: BaseException) -> str:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    return f"failed: {msg}"


def _reconstruct(moments, lattice, options: MaxEntOptions):
    sol = solve_dual(MomentConstraints(tuple(float(m) for m in moments)), options)
    return discretize(sol, step=lattice[0], offset=lattice[1])


def _timed(fn):
    t0 = time.perf_counter()
    value = fn()
    return value, time.perf_counter() - t0


def run_experiment(config: ExperimentConfig, write: bool = True) -> ExperimentReport:
    """Run the direct solve, each closure order and every reconstruction cell.

    Moment errors compare closure moments with the direct solution; ``eps``
    compares the reconstruction from closure moments with the direct
    marginal and ``eps_star`` the reconstruction from the direct solution's
    own moments. Failures are recorded per cell. With ``config.out`` set and
    ``write`` true the tables are written there.
    """
    net = load_network(config.model, config.rates)
    if config.species is not None:
        species = list(config.species)
    else:
        species = list(REPORTED_SPECIES.get(config.model, net.species))
    for s in species:
        net.index(s)
    report = ExperimentReport(config, species)

    dist: SparseDistribution | None = None
    if config.direct:
        dist, secs = _timed(lambda: integrate(net, point_mass(net), config.truncation))
        report.direct = DirectSummary(len(dist), float(dist.mass_defect), secs)
        log.info("direct solve: %d states, defect %.3g, %.1fs", len(dist), dist.mass_defect, secs)

    lattices = {s: species_lattice(net, s) for s in species}
    ref_marginals = {s: marginal(dist, net.index(s)) for s in species} if dist is not None else {}
    star_cache: dict = {}

    def star(s, M):
        key = (s, M)
        if key not in star_cache:
            try:
                mom = empirical_moments(dist, net.index(s), M)
                star_cache[key] = _reconstruct(mom, lattices[s], config.maxent)
            except Exception as exc:  # noqa: BLE001 - recorded in the report
                star_cache[key] = _failed(exc)
        return star_cache[key]

    def cell(M, s, mv):
        """Reconstruction cell: ``(eps, eps_star, closure dist, star dist)``."""
        try:
            closure_dist = _reconstruct(mv.univariate(s, M), lattices[s], config.maxent)
        except Exception as exc:  # noqa: BLE001
            closure_dist = _failed(exc)
        if dist is None:
            return None, None, closure_dist, None
        ref = ref_marginals[s]
        sd = star(s, M)
        eps = closure_dist if isinstance(closure_dist, str) else chebyshev_distance(ref, closure_dist, lattices[s])
        eps_star = sd if isinstance(sd, str) else chebyshev_distance(ref, sd, lattices[s])
        return eps, eps_star, closure_dist, sd

    for M in config.orders:
        t0 = time.perf_counter()
        errors: list = [None] * config.max_order
        try:
            system = close_system(net, M)
            mv = integrate_moments(system, init_moments_from_state(net.initial_state, system),
                                   config.t_end)
        except Exception as exc:  # noqa: BLE001
            n_eq = _n_equations(net, M)
            reason = _failed(exc)
            report.moment_rows.append(MomentRow(M, n_eq, [reason] * M + [None] * (config.max_order - M),
                                                time.perf_counter() - t0, reason))
            report.reconstruction_rows.append(
                ReconstructionRow(M, {s: reason for s in species},
                                  {s: (_eps_of(star(s, M), ref_marginals[s], lattices[s])
                                       if dist is not None else None) for s in species}))
            continue
        secs = time.perf_counter() - t0
        if dist is not None:
            ref = moments_from_distribution(dist, system.tracked)
            for k in range(1, M + 1):
                try:
                    errors[k - 1], _, excluded = moment_error_detail(mv, ref, k)
                    if excluded and k == 1:
                        report.notes.append(f"order {M}: zero reference moments for {excluded}")
                except ValueError as exc:
                    errors[k - 1] = _failed(exc)
        report.moment_rows.append(MomentRow(M, system.n_equations, errors, secs))

        # filters are process-wide, so silence fallback warnings here rather than per thread
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            if config.jobs > 1:
                with ThreadPoolExecutor(config.jobs) as pool:
                    results = dict(zip(species, pool.map(lambda s: cell(M, s, mv), species)))
            else:
                results = {s: cell(M, s, mv) for s in species}
        row = ReconstructionRow(M, {}, {})
        for s in species:
            eps, eps_star, cd, sd = results[s]
            row.eps[s] = eps if dist is not None else (cd if isinstance(cd, str) else None)
            row.eps_star[s] = eps_star
            if config.figures and dist is not None:
                report.figures[(s, M)] = _figure_data(ref_marginals[s], cd, sd)
        report.reconstruction_rows.append(row)

    if write and config.out:
        report.write(config.out)
    return report


def _eps_of(d, ref, lattice):
    return d if isinstance(d, str) else chebyshev_distance(ref, d, lattice)


def _n_equations(net, M) -> int:
    from .closure import n_moment_equations

    return n_moment_equations(net.n_species, M)


def _figure_data(ref: dict, closure_dist, star_dist) -> dict:
    parts = [ref, closure_dist if isinstance(closure_dist, dict) else {},
             star_dist if isinstance(star_dist, dict) else {}]
    keys = set().union(*parts)
    return {k: tuple(p.get(k, 0.0) for p in parts) for k in keys}
