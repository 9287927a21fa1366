import csv
import math
from dataclasses import replace

import numpy as np
import pytest

from cmekit.cli import main
from cmekit.closure import MomentVector, close_system, init_moments_from_state, integrate_moments, read_moments_csv
from cmekit.direct import TruncationConfig, integrate, point_mass
from cmekit.harness import (
    ConfigError,
    chebyshev_distance,
    load_config,
    load_network,
    moment_error_detail,
    parse_config,
    relative_moment_error,
    run_experiment,
    species_lattice,
)
from cmekit.maxent import MaxEntOptions
from cmekit.network import builtin_model

SMALL = """
model = dimerization
t_end = 2
orders = 2, 3
delta = 1e-12
h = 0.01
name = dimer
timings = false
"""


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------------------
# metrics


def test_chebyshev_examples():
    p = {0: 0.2, 1: 0.5, 2: 0.3}
    assert chebyshev_distance(p, dict(p)) == 0.0
    assert chebyshev_distance({0: 1.0}, {1: 1.0}) == 1.0
    # absent points count as zero
    assert chebyshev_distance({0: 0.5, 3: 0.5}, {0: 0.5}) == 0.5


def test_chebyshev_lattice():
    p = {1: 0.25, 3: 0.75}
    q = {1: 0.5, 3: 0.5}
    assert chebyshev_distance(p, q, (2, 1)) == 0.25
    with pytest.raises(ValueError, match="lattice mismatch"):
        chebyshev_distance(p, {2: 1.0}, (2, 1))
    # negligible off-lattice mass is tolerated
    assert chebyshev_distance(p, {**q, 2: 1e-14}, (2, 1)) == 0.25
    with pytest.raises(ValueError):
        chebyshev_distance(p, q, (2, 2))


def test_relative_moment_error_examples():
    idx = [(1, 0), (0, 1), (2, 0), (0, 2)]
    ref = MomentVector(("A", "B"), idx, [3.0, 5.0, 10.0, 30.0])
    assert relative_moment_error(ref, ref, 1) == 0.0
    assert relative_moment_error((11.0,), (10.0,), 1) == pytest.approx(0.1)
    approx = MomentVector(("A", "B"), idx, [3.3, 5.0, 10.0, 27.0])
    err, worst, excluded = moment_error_detail(approx, ref, 1)
    assert err == pytest.approx(0.1) and worst == "A" and excluded == []
    err, worst, _ = moment_error_detail(approx, ref, 2)
    assert err == pytest.approx(0.1) and worst == "B"


def test_relative_moment_error_excludes_zero_reference():
    err, worst, excluded = moment_error_detail((1.0, 2.2), (0.0, 2.0), 1)
    assert err == pytest.approx(0.1) and worst == 1 and excluded == [0]
    with pytest.raises(ValueError):
        relative_moment_error((1.0,), (0.0,), 1)
    # species-keyed moment sequences
    assert relative_moment_error({"A": (1, 2, 5)}, {"A": (1, 2, 4)}, 2) == pytest.approx(0.25)


def test_species_lattice():
    dim = builtin_model("dimerization")
    assert species_lattice(dim, "P") == (2, 1)
    assert species_lattice(dim, "P2") == (1, 0)
    es = builtin_model("exclusive_switch")
    assert species_lattice(es, "P1") == (1, 0)


# ---------------------------------------------------------------------------
# configuration


def test_parse_config_fields(tmp_path):
    cfg = parse_config(SMALL + "rate.c1 = 0.01\nnodes = 256\nbounded_fallback = no\nout = res\n",
                       base_dir=tmp_path)
    assert cfg.model == "dimerization" and cfg.t_end == 2.0
    assert cfg.orders == (2, 3) and cfg.max_order == 5
    assert cfg.truncation.delta1 == 1e-12 and cfg.truncation.step_size == 0.01
    assert cfg.truncation.t_end == 2.0
    assert cfg.maxent.nodes == 256 and not cfg.maxent.bounded_fallback
    assert cfg.rates == (("c1", 0.01),)
    assert cfg.out == str(tmp_path / "res")
    assert cfg.label == "dimer" and not cfg.timings


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("t_end = 1\n", "needs 'model'"),
        ("model = dimerization\nt_end = 0\n", "positive"),
        ("model = dimerization\nt_end = 1\norders = 1\n", "outside"),
        ("model = dimerization\nt_end = 1\norders = 2, 2\n", "distinct"),
        ("model = dimerization\nt_end = 1\ncolour = red\n", "unknown key"),
        ("model = dimerization\nt_end = 1\nt_end = 2\n", "duplicate"),
        ("model = dimerization\nt_end = x\n", "could not convert"),
        ("model = dimerization\nt_end = 1\njunk\n", "key = value"),
        ("model = dimerization\nt_end = 1\ntimings = maybe\n", "boolean"),
    ],
)
def test_config_errors(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config(text)


def test_load_network_file_with_rate_override(tmp_path):
    f = tmp_path / "bd.net"
    f.write_text("species: A\n0 -> A @ 4\nA -> 0 @ 0.5\n")
    net = load_network(str(f), {"r2": 1.0}.items())
    assert net.rates.tolist() == [4.0, 1.0]
    with pytest.raises(ConfigError):
        load_network(str(f), {"r9": 1.0}.items())


# ---------------------------------------------------------------------------
# experiments


def test_direct_only_report(tmp_path):
    cfg = parse_config(SMALL.replace("orders = 2, 3", "orders =") + f"out = {tmp_path}\n")
    report = run_experiment(cfg)
    assert report.moment_rows == [] and report.reconstruction_rows == []
    table = report.direct_table()
    assert table[0] == ["t_end", "delta1", "delta2", "n_states", "mass_defect", "wall_seconds"]
    assert int(table[1][3]) > 0 and table[1][5] == ""
    assert [p.name for p in sorted(tmp_path.iterdir())] == ["dimer_direct.csv"]


def test_small_experiment_tables(tmp_path):
    cfg = replace(parse_config(SMALL), out=str(tmp_path))
    report = run_experiment(cfg)
    mt = report.moment_table()
    assert mt[0] == ["order", "n_equations", *[f"err_ord_{k}" for k in range(1, 6)], "wall_seconds"]
    assert [r[:2] for r in mt[1:]] == [["2", "5"], ["3", "9"]]
    for r in mt[1:]:
        filled = [float(v) for v in r[2:7] if v]
        assert len(filled) == int(r[0]) and all(v >= 0 for v in filled)
        assert r[-1] == ""
    rt = report.reconstruction_table()
    assert rt[0] == ["order", "eps_P", "eps_star_P", "eps_P2", "eps_star_P2"]
    for r in rt[1:]:
        assert all(0 <= float(v) < 0.05 for v in r[1:])
    names = sorted(p.name for p in tmp_path.iterdir())
    assert "dimer_moments.csv" in names and "dimer_reconstruction.csv" in names
    assert "dimer_fig_P_M3.csv" in names
    fig = read_rows(tmp_path / "dimer_fig_P_M3.csv")
    assert fig[0] == ["count", "direct", "closure_maxent", "direct_maxent"]
    # the dimer count lattice is odd
    assert all(int(r[0]) % 2 == 1 for r in fig[1:])


def test_serial_reports_are_byte_identical(tmp_path):
    cfg = parse_config(SMALL)
    a, b = tmp_path / "a", tmp_path / "b"
    run_experiment(replace(cfg, out=str(a)))
    run_experiment(replace(cfg, out=str(b)))
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes(), n


def test_parallel_cells_match_serial(tmp_path):
    cfg = parse_config(SMALL)
    run_experiment(replace(cfg, out=str(tmp_path / "s")))
    run_experiment(replace(cfg, out=str(tmp_path / "p"), jobs=3))
    for n in ("dimer_moments.csv", "dimer_reconstruction.csv"):
        assert (tmp_path / "s" / n).read_bytes() == (tmp_path / "p" / n).read_bytes()


def test_failed_cells_are_marked_and_others_continue():
    # one iteration towards a zero tolerance cannot succeed; order 2 is closed-form
    cfg = replace(parse_config(SMALL),
                  maxent=MaxEntOptions(tol=0.0, max_iter=1, bounded_fallback=False))
    report = run_experiment(cfg, write=False)
    ok = report.reconstruction_row(2)
    assert all(isinstance(v, float) for v in ok.eps.values())
    bad = report.reconstruction_row(3)
    assert all(isinstance(v, str) and v.startswith("failed: ") for v in bad.eps.values())
    rows = report.reconstruction_table()
    assert any(c.startswith("failed: ") for c in rows[-1][1:])


def test_no_direct_solve_omits_star_columns():
    cfg = replace(parse_config(SMALL), direct=False)
    report = run_experiment(cfg, write=False)
    assert report.reconstruction_table()[0] == ["order", "eps_P", "eps_P2"]
    assert report.moment_row(2).errors == [None] * 5


# ---------------------------------------------------------------------------
# command line


def test_cli_models(capsys):
    assert main(["models"]) == 0
    out = capsys.readouterr().out
    assert "exclusive_switch: 5 species, 10 reactions" in out


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["models", "--bogus"], ["solve-direct", "--model", "x"]])
def test_cli_usage_errors_exit_one(argv, capsys):
    assert main(argv) == 1
    err = capsys.readouterr().err
    assert "usage" in err or "error" in err


def test_cli_unknown_model_exits_one(capsys):
    assert main(["solve-direct", "--model", "nope", "--t-end", "1"]) == 1
    assert "nope" in capsys.readouterr().err


def test_cli_solve_moments_exclusive_switch_order5(tmp_path):
    out = tmp_path / "m.csv"
    assert main(["solve-moments", "--model", "exclusive_switch", "--order", "5", "--t-end", "100",
                 "--out", str(out)]) == 0
    rows = [r for r in read_rows(out) if r and not r[0].startswith("#")]
    assert len(rows) - 1 == 251


def test_cli_pipeline(tmp_path, capsys):
    moments = tmp_path / "m.csv"
    direct = tmp_path / "d.csv"
    recon = tmp_path / "r.csv"
    assert main(["solve-moments", "--model", "dimerization", "--order", "4", "--t-end", "2",
                 "--out", str(moments)]) == 0
    assert main(["solve-direct", "--model", "dimerization", "--t-end", "2", "--delta", "1e-12",
                 "--h", "0.01", "--out", str(direct)]) == 0
    assert main(["reconstruct", "--moments", str(moments), "--order", "4", "--species", "P",
                 "--lattice", "2", "--offset", "1", "--out", str(recon)]) == 0
    rows = read_rows(recon)
    assert rows[0][0].startswith("# lambdas=") and rows[1] == ["count", "probability"]
    assert math.fsum(float(r[1]) for r in rows[2:]) == pytest.approx(1.0)
    capsys.readouterr()
    assert main(["compare", "--first", str(direct), "--second", str(recon), "--species", "P",
                 "--lattice", "2", "--offset", "1"]) == 0
    out = capsys.readouterr().out
    d = float(out.split("chebyshev_distance=")[1].split()[0])
    assert 0 <= d < 0.01
    # a marginal written by solve-direct compares the same way
    marg = tmp_path / "p.csv"
    assert main(["solve-direct", "--model", "dimerization", "--t-end", "2", "--delta", "1e-12",
                 "--h", "0.01", "--marginal", "P", "--out", str(marg)]) == 0
    capsys.readouterr()
    assert main(["compare", "--first", str(marg), "--second", str(recon), "--lattice", "2",
                 "--offset", "1"]) == 0
    assert float(capsys.readouterr().out.split("chebyshev_distance=")[1].split()[0]) == d
    # parity mismatch is an input error
    assert main(["compare", "--first", str(marg), "--second", str(recon)]) == 0
    assert main(["compare", "--first", str(marg), "--second", str(recon), "--lattice", "2"]) == 1


def test_cli_reconstruct_numerical_failure_exits_two(tmp_path, capsys):
    net = builtin_model("exclusive_switch")
    system = close_system(net, 5)
    mv = integrate_moments(system, init_moments_from_state(net.initial_state, system), 100.0)
    path = tmp_path / "m.csv"
    from cmekit.closure import write_moments_csv

    write_moments_csv(mv, path)
    assert read_moments_csv(path).species == mv.species
    code = main(["reconstruct", "--moments", str(path), "--order", "5", "--species", "P2"])
    assert code == 2
    assert "numerical failure" in capsys.readouterr().err
    assert main(["reconstruct", "--moments", str(path), "--order", "4"]) == 1


def test_cli_bench_writes_reports(tmp_path, capsys):
    cfg = tmp_path / "dimer.cfg"
    cfg.write_text(SMALL + "out = results\n")
    assert load_config(cfg).out == str(tmp_path / "results")
    assert main(["bench", "--config", str(cfg)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("order,n_equations,err_ord_1")
    assert (tmp_path / "results" / "dimer_moments.csv").exists()
    assert main(["bench", "--config", str(tmp_path / "missing.cfg")]) == 1


def test_cli_direct_marginal_matches_library(tmp_path):
    out = tmp_path / "p.csv"
    assert main(["solve-direct", "--model", "dimerization", "--t-end", "1", "--delta", "1e-10",
                 "--h", "0.01", "--marginal", "P2", "--out", str(out)]) == 0
    net = builtin_model("dimerization")
    d = integrate(net, point_mass(net), TruncationConfig(t_end=1.0, delta1=1e-10, step_size=0.01))
    rows = read_rows(out)[1:]
    from cmekit.direct import marginal

    ref = marginal(d, 1)
    assert {int(k): float(v) for k, v in rows} == ref
    assert np.isclose(sum(ref.values()), 1 - d.mass_defect)
