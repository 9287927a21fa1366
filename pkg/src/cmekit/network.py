"""Reaction networks: data model, text format, propensities and built-in models.

Networks are written one reaction per line::

    # dimerization
    species: P, P2
    2 P -> P2 @ 0.00166
    P2 -> 2 P @ 0.2
    init: P=301

``0`` denotes an empty side. Propensities follow mass-action kinetics with
combinatorial counting, ``c * prod_i binom(x_i, l_i)``, restricted to at most
bimolecular reactions.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from math import comb, factorial

import numpy as np

__all__ = [
    "NetworkError",
    "NetworkSyntaxError",
    "SpeciesDef",
    "Reaction",
    "ReactionNetwork",
    "parse_network",
    "format_network",
    "propensity",
    "change_vector",
    "propensity_polynomial",
    "builtin_model",
    "BUILTIN_MODELS",
]


class NetworkError(ValueError):
    """Invalid network definition."""


class NetworkSyntaxError(NetworkError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class SpeciesDef:
    name: str
    index: int


@dataclass(frozen=True)
class Reaction:
    """A mass-action reaction ``sum l_i S_i -> sum l~_i S_i`` with rate constant."""

    reactants: tuple[int, ...]
    products: tuple[int, ...]
    rate: float

    @property
    def order(self) -> int:
        return sum(self.reactants)

    @property
    def change(self) -> tuple[int, ...]:
        return tuple(b - a for a, b in zip(self.reactants, self.products))


@dataclass(frozen=True)
class ReactionNetwork:
    species: tuple[str, ...]
    reactions: tuple[Reaction, ...]
    initial_state: tuple[int, ...]
    allow_noop: bool = False
    _arrays: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.species)
        if len(set(self.species)) != n:
            raise NetworkError("species names must be unique")
        if len(self.initial_state) != n:
            raise NetworkError("initial state length does not match species count")
        if any(int(v) != v or v < 0 for v in self.initial_state):
            raise NetworkError("initial state must be non-negative integers")
        for j, r in enumerate(self.reactions):
            if len(r.reactants) != n or len(r.products) != n:
                raise NetworkError(f"reaction {j}: coefficient vector length != {n}")
            if any(c < 0 for c in r.reactants + r.products):
                raise NetworkError(f"reaction {j}: negative stoichiometric coefficient")
            if r.order > 2:
                raise NetworkError(f"reaction {j}: trimolecular reaction not supported")
            if not r.rate > 0:
                raise NetworkError(f"reaction {j}: rate constant must be positive")
            if not self.allow_noop and not any(r.change):
                raise NetworkError(f"reaction {j}: reaction does not change the state")

    @property
    def n_species(self) -> int:
        return len(self.species)

    @property
    def n_reactions(self) -> int:
        return len(self.reactions)

    def species_defs(self) -> list[SpeciesDef]:
        return [SpeciesDef(name, i) for i, name in enumerate(self.species)]

    def index(self, name: str | int) -> int:
        if isinstance(name, (int, np.integer)):
            if not 0 <= name < self.n_species:
                raise KeyError(name)
            return int(name)
        try:
            return self.species.index(name)
        except ValueError:
            raise KeyError(f"unknown species {name!r}") from None

    @property
    def stoichiometry(self) -> np.ndarray:
        """Change vectors as an (R, n) integer array."""
        if "V" not in self._arrays:
            V = np.array([r.change for r in self.reactions], dtype=np.int64)
            self._arrays["V"] = V.reshape(self.n_reactions, self.n_species)
        return self._arrays["V"]

    @property
    def rates(self) -> np.ndarray:
        if "c" not in self._arrays:
            self._arrays["c"] = np.array([r.rate for r in self.reactions], dtype=np.float64)
        return self._arrays["c"]

    @property
    def reactant_pairs(self) -> np.ndarray:
        """(R, 2) reactant species indices, -1 padded; homodimers repeat the index."""
        if "pairs" not in self._arrays:
            pairs = np.full((self.n_reactions, 2), -1, dtype=np.int64)
            for j, r in enumerate(self.reactions):
                idx = [i for i, l in enumerate(r.reactants) for _ in range(l)]
                pairs[j, : len(idx)] = idx
            self._arrays["pairs"] = pairs
        return self._arrays["pairs"]

    def with_rates(self, rates) -> "ReactionNetwork":
        rates = list(rates)
        if len(rates) != self.n_reactions:
            raise NetworkError("need one rate constant per reaction")
        reactions = tuple(
            Reaction(r.reactants, r.products, float(c)) for r, c in zip(self.reactions, rates)
        )
        return ReactionNetwork(self.species, reactions, self.initial_state, self.allow_noop)

    def with_initial_state(self, state) -> "ReactionNetwork":
        return ReactionNetwork(
            self.species, self.reactions, tuple(int(v) for v in state), self.allow_noop
        )


def propensity(net: ReactionNetwork, j: int, x) -> float:
    r = net.reactions[j]
    value = r.rate
    for xi, li in zip(x, r.reactants):
        if li:
            value *= comb(int(xi), li) if xi >= li else 0
    return float(value)


def change_vector(net: ReactionNetwork, j: int) -> tuple[int, ...]:
    return net.reactions[j].change


def propensity_polynomial(net: ReactionNetwork, j: int) -> dict[tuple[int, ...], float]:
    """Propensity of reaction ``j`` as a polynomial ``{exponents: coefficient}``.

    ``binom(x, 2)`` expands to ``x^2/2 - x/2``, so the homodimer case needs no
    special handling downstream.
    """
    r = net.reactions[j]
    n = net.n_species
    poly = {(0,) * n: r.rate}
    for i, l in enumerate(r.reactants):
        if l == 0:
            continue
        # binom(x, l) = x (x-1) ... (x-l+1) / l!
        factor = {0: 1.0}
        for m in range(l):
            nxt: dict[int, float] = {}
            for e, c in factor.items():
                nxt[e + 1] = nxt.get(e + 1, 0.0) + c
                if m:
                    nxt[e] = nxt.get(e, 0.0) - m * c
            factor = nxt
        scale = 1.0 / factorial(l)
        out = {}
        for mono, c in poly.items():
            for e, fc in factor.items():
                if fc == 0.0:
                    continue
                key = mono[:i] + (mono[i] + e,) + mono[i + 1 :]
                out[key] = out.get(key, 0.0) + c * fc * scale
        poly = out
    return {k: v for k, v in poly.items() if v != 0.0}


# ---------------------------------------------------------------------------
# text format

_NAME = r"[A-Za-z_][A-Za-z0-9_.]*"


def _parse_side(text: str, lineno: int) -> list[tuple[str, int]]:
    text = text.strip()
    if text in ("0", "", "∅"):
        if text == "":
            raise NetworkSyntaxError("empty reaction side (use 0)", lineno)
        return []
    out = []
    for raw in text.split("+"):
        term = raw.strip()
        m = re.match(rf"^([-+]?\d[\d.]*)?\s*({_NAME})$", term)
        if not m:
            raise NetworkSyntaxError(f"cannot parse term {term!r}", lineno)
        coeff_txt, name = m.group(1), m.group(2)
        if coeff_txt is None:
            coeff = 1
        else:
            if not re.fullmatch(r"\d+", coeff_txt):
                raise NetworkSyntaxError(
                    f"coefficient {coeff_txt!r} is not a non-negative integer", lineno
                )
            coeff = int(coeff_txt)
        out.append((name, coeff))
    return out


def _split_names(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def parse_network(text: str, *, allow_noop: bool = False) -> ReactionNetwork:
    """Parse the reaction text format into a validated network."""
    header: list[str] | None = None
    order: list[str] = []
    raw_reactions = []
    init_spec: list[tuple[str, int, int]] = []

    for lineno, line in enumerate(text.replace("\r\n", "\n").split("\n"), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        low = line.lower()
        if low.startswith("species:"):
            if header is not None:
                raise NetworkSyntaxError("duplicate species header", lineno)
            if raw_reactions:
                raise NetworkSyntaxError("species header must precede reactions", lineno)
            header = _split_names(line.split(":", 1)[1])
            for name in header:
                if not re.fullmatch(_NAME, name):
                    raise NetworkSyntaxError(f"invalid species name {name!r}", lineno)
            dupes = {s for s in header if header.count(s) > 1}
            if dupes:
                raise NetworkSyntaxError(f"duplicate species in header: {sorted(dupes)}", lineno)
            order = list(header)
            continue
        if low.startswith("init:"):
            for item in _split_names(line.split(":", 1)[1]):
                if "=" not in item:
                    raise NetworkSyntaxError(f"bad initial assignment {item!r}", lineno)
                name, val = (s.strip() for s in item.split("=", 1))
                if not re.fullmatch(r"\d+", val):
                    raise NetworkSyntaxError(
                        f"initial count {val!r} is not a non-negative integer", lineno
                    )
                init_spec.append((name, int(val), lineno))
            continue
        if "->" not in line:
            raise NetworkSyntaxError("expected 'reactants -> products @ rate'", lineno)
        if "@" not in line:
            raise NetworkSyntaxError("missing rate constant", lineno)
        body, rate_txt = line.rsplit("@", 1)
        try:
            rate = float(rate_txt.strip())
        except ValueError:
            raise NetworkSyntaxError(f"bad rate constant {rate_txt.strip()!r}", lineno) from None
        if not rate > 0:
            raise NetworkSyntaxError("rate constant must be positive", lineno)
        lhs, _, rhs = body.partition("->")
        left = _parse_side(lhs, lineno)
        right = _parse_side(rhs, lineno)
        for name, _ in left + right:
            if name not in order:
                if header is not None:
                    raise NetworkSyntaxError(f"species {name!r} not declared in header", lineno)
                order.append(name)
        if sum(c for _, c in left) > 2:
            raise NetworkSyntaxError("trimolecular reaction not supported", lineno)
        raw_reactions.append((left, right, rate, lineno))

    n = len(order)
    init = [0] * n
    for name, val, lineno in init_spec:
        if name not in order:
            raise NetworkSyntaxError(f"unknown species {name!r} in init", lineno)
        init[order.index(name)] = val

    reactions = []
    for left, right, rate, lineno in raw_reactions:
        lvec, rvec = [0] * n, [0] * n
        for name, c in left:
            lvec[order.index(name)] += c
        for name, c in right:
            rvec[order.index(name)] += c
        if not allow_noop and lvec == rvec:
            raise NetworkSyntaxError("reaction does not change the state", lineno)
        reactions.append(Reaction(tuple(lvec), tuple(rvec), rate))
    return ReactionNetwork(tuple(order), tuple(reactions), tuple(init), allow_noop)


def _format_side(net: ReactionNetwork, coeffs) -> str:
    terms = []
    for name, c in zip(net.species, coeffs):
        if c == 1:
            terms.append(name)
        elif c > 1:
            terms.append(f"{c} {name}")
    return " + ".join(terms) if terms else "0"


def format_network(net: ReactionNetwork) -> str:
    """Canonical text form; ``parse_network(format_network(net)) == net``."""
    lines = ["species: " + ", ".join(net.species)]
    for r in net.reactions:
        lines.append(
            f"{_format_side(net, r.reactants)} -> {_format_side(net, r.products)} @ {r.rate!r}"
        )
    init = [f"{s}={v}" for s, v in zip(net.species, net.initial_state) if v]
    if init:
        lines.append("init: " + ", ".join(init))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# built-in benchmark models

DIMERIZATION_RATES = {"c1": 0.00166, "c2": 0.2}

EXCLUSIVE_SWITCH_RATES = {
    "c1": 2.0, "c2": 5.0, "c3": 0.005, "c4": 0.005, "c5": 0.005,
    "c6": 0.002, "c7": 0.02, "c8": 0.02, "c9": 2.0, "c10": 5.0,
}

MULTI_ATTRACTOR_RATES = {"cp": 5.0, "cd": 0.1, "cb": 1.0, "cu": 1.0}

_DIMERIZATION = """\
species: P, P2
2 P -> P2 @ {c1}
P2 -> 2 P @ {c2}
init: P=301
"""

_EXCLUSIVE_SWITCH = """\
species: DNA, P1, P2, DNA.P1, DNA.P2
DNA -> DNA + P1 @ {c1}
DNA -> DNA + P2 @ {c2}
P1 -> 0 @ {c3}
P2 -> 0 @ {c4}
DNA + P1 -> DNA.P1 @ {c5}
DNA + P2 -> DNA.P2 @ {c6}
DNA.P1 -> DNA + P1 @ {c7}
DNA.P2 -> DNA + P2 @ {c8}
DNA.P1 -> DNA.P1 + P1 @ {c9}
DNA.P2 -> DNA.P2 + P2 @ {c10}
init: DNA=1
"""

_MULTI_ATTRACTOR = """\
species: PaxProt, MAFAProt, DeltaProt, PaxDna, MAFADna, DeltaDna, PaxDnaDeltaProt, \
MAFADnaPaxProt, MAFADnaMAFAProt, MAFADnaDeltaProt, DeltaDnaPaxProt, DeltaDnaMAFAProt, \
DeltaDnaDeltaProt
PaxDna -> PaxDna + PaxProt @ {cp}
PaxProt -> 0 @ {cd}
PaxDna + DeltaProt -> PaxDnaDeltaProt @ {cb}
PaxDnaDeltaProt -> PaxDna + DeltaProt @ {cu}
MAFADna -> MAFADna + MAFAProt @ {cp}
MAFAProt -> 0 @ {cd}
MAFADna + PaxProt -> MAFADnaPaxProt @ {cb}
MAFADnaPaxProt -> MAFADna + PaxProt @ {cu}
MAFADnaPaxProt -> MAFADnaPaxProt + MAFAProt @ {cp}
MAFADna + MAFAProt -> MAFADnaMAFAProt @ {cb}
MAFADnaMAFAProt -> MAFADna + MAFAProt @ {cu}
MAFADnaMAFAProt -> MAFADnaMAFAProt + MAFAProt @ {cp}
MAFADna + DeltaProt -> MAFADnaDeltaProt @ {cb}
MAFADnaDeltaProt -> MAFADna + DeltaProt @ {cu}
DeltaDna -> DeltaDna + DeltaProt @ {cp}
DeltaProt -> 0 @ {cd}
DeltaDna + PaxProt -> DeltaDnaPaxProt @ {cb}
DeltaDnaPaxProt -> DeltaDna + PaxProt @ {cu}
DeltaDnaPaxProt -> DeltaDnaPaxProt + DeltaProt @ {cp}
DeltaDna + MAFAProt -> DeltaDnaMAFAProt @ {cb}
DeltaDnaMAFAProt -> DeltaDna + MAFAProt @ {cu}
DeltaDna + DeltaProt -> DeltaDnaDeltaProt @ {cb}
DeltaDnaDeltaProt -> DeltaDna + DeltaProt @ {cu}
DeltaDnaDeltaProt -> DeltaDnaDeltaProt + DeltaProt @ {cp}
init: PaxDna=1, MAFADna=1, DeltaDna=1
"""

BUILTIN_MODELS = {
    "dimerization": (_DIMERIZATION, DIMERIZATION_RATES),
    "exclusive_switch": (_EXCLUSIVE_SWITCH, EXCLUSIVE_SWITCH_RATES),
    "multi_attractor": (_MULTI_ATTRACTOR, MULTI_ATTRACTOR_RATES),
}

# Species whose counts are conserved (sum == 1) in each built-in model.
CONSERVED_GROUPS = {
    "dimerization": [],
    "exclusive_switch": [("DNA", "DNA.P1", "DNA.P2")],
    "multi_attractor": [
        ("PaxDna", "PaxDnaDeltaProt"),
        ("MAFADna", "MAFADnaPaxProt", "MAFADnaMAFAProt", "MAFADnaDeltaProt"),
        ("DeltaDna", "DeltaDnaPaxProt", "DeltaDnaMAFAProt", "DeltaDnaDeltaProt"),
    ],
}

# Species reconstructed in the benchmark tables.
REPORTED_SPECIES = {
    "dimerization": ["P", "P2"],
    "exclusive_switch": ["P1", "P2"],
    "multi_attractor": ["MAFAProt", "DeltaProt", "PaxProt"],
}


def builtin_model(name: str, **rates: float) -> ReactionNetwork:
    """Return one of the benchmark networks, optionally overriding named rates.

    >>> builtin_model("exclusive_switch").rates[:2]
    array([2., 5.])
    """
    try:
        template, defaults = BUILTIN_MODELS[name]
    except KeyError:
        raise NetworkError(
            f"unknown model {name!r}; choose from {sorted(BUILTIN_MODELS)}"
        ) from None
    unknown = set(rates) - set(defaults)
    if unknown:
        raise NetworkError(f"model {name!r} has no rate constants {sorted(unknown)}")
    values = {**defaults, **{k: float(v) for k, v in rates.items()}}
    return parse_network(template.format(**{k: repr(v) for k, v in values.items()}))
