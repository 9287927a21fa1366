"""Command-line interface: ``cmekit <subcommand> [--flags]``.

Exit codes: 0 on success, 1 on usage or input errors, 2 on numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

from . import __version__
from .closure import (
    MomentIntegrationError,
    close_system,
    init_moments_from_state,
    integrate_moments,
    read_moments_csv,
    write_moments_csv,
)
from .direct import (
    NegativeProbabilityError,
    TruncationConfig,
    integrate,
    marginal,
    point_mass,
    read_distribution_csv,
    write_distribution_csv,
)
from .harness import ConfigError, chebyshev_distance, load_config, load_network, run_experiment
from .maxent import (
    MaxEntError,
    MaxEntOptions,
    MomentConstraints,
    discretize,
    read_reconstruction_csv,
    solve_dual,
    write_reconstruction_csv,
)
from .network import BUILTIN_MODELS, NetworkError, builtin_model

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _rate(text: str):
    name, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected NAME=VALUE, got {text!r}")
    try:
        return name.strip(), float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad rate value {value!r}") from None


def _add_model(p):
    p.add_argument("--model", required=True, help="built-in model name or network file")
    p.add_argument("--rate", type=_rate, action="append", default=[], metavar="NAME=VALUE",
                   help="override a rate constant (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cmekit", description="Chemical master equation toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    sub.add_parser("models", help="list built-in models")

    p = sub.add_parser("solve-direct", help="integrate the master equation on a truncated state space")
    _add_model(p)
    p.add_argument("--t-end", type=float, required=True)
    p.add_argument("--delta", type=float, default=1e-15, help="pruning threshold")
    p.add_argument("--delta2", type=float, default=None, help="admission threshold (default: --delta)")
    p.add_argument("--h", type=float, default=None, help="fixed Euler step (default: adaptive)")
    p.add_argument("--truncation-interval", type=float, default=None,
                   help="prune only every this many time units")
    p.add_argument("--out", help="write the joint distribution CSV here")
    p.add_argument("--marginal", help="write this species' marginal instead")

    p = sub.add_parser("solve-moments", help="integrate the closed moment equations")
    _add_model(p)
    p.add_argument("--order", type=int, required=True)
    p.add_argument("--t-end", type=float, required=True)
    p.add_argument("--out", help="moment CSV path (default: stdout)")
    p.add_argument("--equations", action="store_true", help="print the closed equations and exit")

    p = sub.add_parser("reconstruct", help="maximum-entropy distribution from a moment CSV")
    p.add_argument("--moments", required=True, help="moment CSV (from solve-moments)")
    p.add_argument("--order", type=int, required=True, help="number of moments to match")
    p.add_argument("--species", help="species to reconstruct (default: the only one)")
    p.add_argument("--lattice", type=int, default=1, choices=(1, 2), help="lattice step")
    p.add_argument("--offset", type=int, default=0, help="lattice offset")
    p.add_argument("--nodes", type=int, default=MaxEntOptions.nodes)
    p.add_argument("--no-bounded-fallback", action="store_true",
                   help="fail instead of fitting on a bounded support")
    p.add_argument("--out", help="distribution CSV path (default: stdout)")

    p = sub.add_parser("compare", help="Chebyshev distance of two one-dimensional distributions")
    p.add_argument("--first", required=True)
    p.add_argument("--second", required=True)
    p.add_argument("--species", help="marginalize joint distribution CSVs onto this species")
    p.add_argument("--lattice", type=int, default=1)
    p.add_argument("--offset", type=int, default=0)

    p = sub.add_parser("bench", help="run a benchmark experiment from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--no-timings", action="store_true", help="leave wall-time cells empty")
    return parser


# ---------------------------------------------------------------------------
# subcommands


def _cmd_models(args) -> int:
    for name in sorted(BUILTIN_MODELS):
        net = builtin_model(name)
        print(f"{name}: {net.n_species} species, {net.n_reactions} reactions "
              f"({', '.join(net.species)})")
    return EXIT_OK


def _cmd_solve_direct(args) -> int:
    net = load_network(args.model, args.rate)
    cfg = TruncationConfig(t_end=args.t_end, delta1=args.delta, delta2=args.delta2,
                           step_size=args.h, truncation_interval=args.truncation_interval)
    dist = integrate(net, point_mass(net), cfg)
    print(f"t={args.t_end:g} states={len(dist)} mass_defect={dist.mass_defect:.6g}", file=sys.stderr)
    if args.marginal:
        m = marginal(dist, net.index(args.marginal))
        _emit(args.out, lambda fh: _write_1d(m, fh))
    else:
        _emit(args.out, lambda fh: write_distribution_csv(dist, fh))
    return EXIT_OK


def _cmd_solve_moments(args) -> int:
    net = load_network(args.model, args.rate)
    system = close_system(net, args.order)
    if args.equations:
        print(system.format())
        return EXIT_OK
    mv = integrate_moments(system, init_moments_from_state(net.initial_state, system), args.t_end)
    _emit(args.out, lambda fh: write_moments_csv(mv, fh))
    print(f"{system.n_equations} moment equations integrated to t={args.t_end:g}", file=sys.stderr)
    return EXIT_OK


def _cmd_reconstruct(args) -> int:
    mv = read_moments_csv(args.moments)
    if args.species is None:
        if len(mv.species) != 1:
            raise UsageError(f"--species is required; the file holds {', '.join(mv.species)}")
        species = mv.species[0]
    else:
        if args.species not in mv.species:
            raise UsageError(f"species {args.species!r} not in {', '.join(mv.species)}")
        species = args.species
    if args.order < 1:
        raise UsageError("--order must be at least 1")
    if not 0 <= args.offset < args.lattice:
        raise UsageError("--offset must lie in [0, --lattice)")
    mom = mv.univariate(species, args.order)
    opts = MaxEntOptions(nodes=args.nodes, bounded_fallback=not args.no_bounded_fallback)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        sol = solve_dual(MomentConstraints(tuple(mom)), opts)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    dist = discretize(sol, step=args.lattice, offset=args.offset)
    _emit(args.out, lambda fh: write_reconstruction_csv(sol, dist, fh))
    return EXIT_OK


def _read_1d(path: str, species: str | None) -> dict:
    text = Path(path).read_text()
    header = next((ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")), "")
    if [h.strip() for h in header.split(",")] == ["count", "probability"]:
        return read_reconstruction_csv(path)
    dist = read_distribution_csv(path)
    if species is None:
        if len(dist.species) != 1:
            raise UsageError(f"{path} is a joint distribution; pass --species")
        species = dist.species[0]
    if species not in dist.species:
        raise UsageError(f"species {species!r} not in {path}")
    return marginal(dist, dist.species.index(species))


def _cmd_compare(args) -> int:
    p = _read_1d(args.first, args.species)
    q = _read_1d(args.second, args.species)
    d = chebyshev_distance(p, q, (args.lattice, args.offset))
    mean_p = sum(k * v for k, v in p.items())
    mean_q = sum(k * v for k, v in q.items())
    print(f"chebyshev_distance={d!r}")
    print(f"mass_first={sum(p.values())!r} mass_second={sum(q.values())!r}")
    print(f"mean_first={mean_p!r} mean_second={mean_q!r}")
    return EXIT_OK


def _cmd_bench(args) -> int:
    from dataclasses import replace

    cfg = load_config(args.config)
    if args.out:
        cfg = replace(cfg, out=args.out)
    if args.no_timings:
        cfg = replace(cfg, timings=False)
    if not cfg.out:
        raise UsageError("no output directory: set 'out' in the config or pass --out")
    report = run_experiment(cfg)
    for row in report.moment_table() + report.reconstruction_table():
        print(",".join(row))
    return EXIT_OK


def _write_1d(m: dict, fh) -> None:
    fh.write("count,probability\n")
    for k in sorted(m):
        fh.write(f"{k},{m[k]!r}\n")


def _emit(path, writer) -> None:
    if path:
        with open(path, "w", newline="") as fh:
            writer(fh)
    else:
        writer(sys.stdout)


_COMMANDS = {
    "models": _cmd_models,
    "solve-direct": _cmd_solve_direct,
    "solve-moments": _cmd_solve_moments,
    "reconstruct": _cmd_reconstruct,
    "compare": _cmd_compare,
    "bench": _cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("cmekit: error: a subcommand is required", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return _COMMANDS[args.command](args)
    except (UsageError, ConfigError, NetworkError, FileNotFoundError, IsADirectoryError,
            PermissionError) as exc:
        print(f"cmekit {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MaxEntError, MomentIntegrationError, NegativeProbabilityError, ArithmeticError) as exc:
        print(f"cmekit {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"cmekit {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
