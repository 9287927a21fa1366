import io
import math

import numpy as np
import pytest

from cmekit import _kernels
from cmekit.closure import (
    MomentVector,
    central_from_raw,
    close_system,
    closure_polynomial,
    derive_raw_moment_ode,
    enumerate_moment_indices,
    format_multi_index,
    init_moments_from_state,
    integrate_moments,
    moments_from_distribution,
    n_moment_equations,
    parse_multi_index,
    raw_from_central,
    read_moments_csv,
    write_moments_csv,
)
from cmekit.direct import SparseDistribution, TruncationConfig, integrate, point_mass
from cmekit.network import CONSERVED_GROUPS, builtin_model, parse_network

# ---------------------------------------------------------------------------
# enumeration
from oracles import Moments, central, generator_action, random_distribution, random_network


@pytest.mark.parametrize(
    "n, counts",
    [(2, [5, 9, 14, 20]), (5, [20, 55, 125, 251]), (13, [104, 559, 2379, 8567])],
)
def test_equation_counts(n, counts):
    assert [len(enumerate_moment_indices(n, M)) for M in (2, 3, 4, 5)] == counts
    assert [n_moment_equations(n, M) for M in (2, 3, 4, 5)] == counts


def test_enumeration_order_is_graded_with_first_species_dominant():
    assert enumerate_moment_indices(2, 2) == [(1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]
    assert enumerate_moment_indices(3, 1) == [(1, 0, 0), (0, 1, 0), (0, 0, 1)]
    assert enumerate_moment_indices(2, 2, min_order=2) == [(2, 0), (1, 1), (0, 2)]


def test_multi_index_text_roundtrip():
    assert format_multi_index((2, 0, 1)) == "2:0:1"
    assert parse_multi_index("2:0:1") == (2, 0, 1)
    with pytest.raises(ValueError):
        parse_multi_index("2:x")


# ---------------------------------------------------------------------------
# exact equations


def test_dimerization_mean_equation_by_hand():
    net = parse_network("species: P, P2\n2 P -> P2 @ 0.3\nP2 -> 2 P @ 0.7\n")
    poly = derive_raw_moment_ode(net, (1, 0))
    # -2 * 0.3 * E[P(P-1)/2] + 2 * 0.7 * E[P2]
    expected = {((1, 0),): 0.3, ((2, 0),): -0.3, ((0, 1),): 1.4}
    assert poly.terms.keys() == expected.keys()
    for k, v in expected.items():
        assert poly.terms[k] == pytest.approx(v, rel=1e-15)


def test_generator_consistency_on_random_networks():
    rng = np.random.default_rng(20240611)
    checked = 0
    for trial in range(50):
        n = int(rng.integers(1, 4))
        net = random_network(rng, n)
        states, probs = random_distribution(rng, n)
        mom = Moments(states, probs)
        for alpha in enumerate_moment_indices(n, 3):
            exact = generator_action(net, states, probs, alpha)
            value = derive_raw_moment_ode(net, alpha).evaluate(mom)
            assert abs(value - exact) <= 1e-9 * max(1.0, abs(exact)), (trial, alpha)
            checked += 1
        # closed system: exact minus the dropped top-order central moments
        for M in (2, 3):
            system = close_system(net, M)
            m = np.array([mom[a] for a in system.tracked])
            rhs = system.rhs(0.0, m)
            lifted = system.lifted.tocsr()
            for k, alpha in enumerate(system.tracked):
                exact = generator_action(net, states, probs, alpha)
                row = lifted.getrow(k).tocoo()
                dropped = math.fsum(c * central(states, probs, system.closed[q])
                                    for q, c in zip(row.col, row.data))
                assert abs(rhs[k] - (exact - dropped)) <= 1e-9 * max(1.0, abs(exact), abs(dropped))
    assert checked > 400


def test_closure_polynomial_drops_exactly_the_central_moment():
    rng = np.random.default_rng(7)
    for _ in range(20):
        n = int(rng.integers(1, 4))
        states, probs = random_distribution(rng, n)
        mom = Moments(states, probs)
        for beta in enumerate_moment_indices(n, 4, min_order=2):
            lhs = mom[beta] - closure_polynomial(beta).evaluate(mom)
            rhs = central(states, probs, beta)
            assert lhs == pytest.approx(rhs, abs=1e-9 * max(1.0, abs(mom[beta])))


def test_mixed_third_moment_closure_by_hand():
    # E[X^2 Y] with vanishing central moment:
    # 2 mx E[XY] + my E[X^2] - 2 mx^2 my
    poly = closure_polynomial((2, 1))
    mom = {(1, 0): 2.0, (0, 1): 3.0, (1, 1): 7.0, (2, 0): 5.0}
    assert poly.evaluate(mom) == pytest.approx(2 * 2 * 7 + 3 * 5 - 2 * 4 * 3)


def test_order_one_rejected_for_bimolecular_networks():
    with pytest.raises(ValueError):
        close_system(builtin_model("dimerization"), 1)
    close_system(parse_network("species: A\n0 -> A @ 1\nA -> 0 @ 1\n"), 1)


# ---------------------------------------------------------------------------
# monomolecular exactness


MONO = """species: A, B
0 -> A @ 3
A -> B @ 0.8
A -> 0 @ 0.3
B -> 0 @ 0.5
B -> A + B @ 0.4
init: A=2
"""


def test_monomolecular_system_has_no_closure_terms():
    system = close_system(parse_network(MONO), 3)
    assert system.closed == []


def test_monomolecular_moments_match_direct_solve():
    net = parse_network(MONO)
    system = close_system(net, 2)
    mv = integrate_moments(system, init_moments_from_state(net.initial_state, system), 2.0,
                           rtol=1e-11, atol=1e-12)
    res = []
    for h in (0.002, 0.001):
        d = integrate(net, point_mass(net), TruncationConfig(t_end=2.0, delta1=1e-18, step_size=h))
        res.append(moments_from_distribution(d, system.tracked).values)
    extrap = 2 * res[1] - res[0]
    rel = np.abs(extrap - mv.values) / np.abs(mv.values)
    assert rel.max() < 1e-6


def test_birth_death_mean_analytic():
    net = parse_network("species: A\n0 -> A @ 4\nA -> 0 @ 0.5\n")
    system = close_system(net, 2)
    mv = integrate_moments(system, init_moments_from_state(net.initial_state, system), 3.0,
                           rtol=1e-11, atol=1e-12)
    lam = 8.0 * (1 - math.exp(-1.5))
    assert mv[(1,)] == pytest.approx(lam, rel=1e-8)
    assert mv[(2,)] == pytest.approx(lam + lam ** 2, rel=1e-8)


# ---------------------------------------------------------------------------
# conservation


@pytest.mark.parametrize("model", ["exclusive_switch", "multi_attractor"])
def test_conserved_gene_sums_have_zero_derivative(model):
    net = builtin_model(model)
    n = net.n_species
    for group in CONSERVED_GROUPS[model]:
        total = None
        for s in group:
            e = tuple(1 if k == net.index(s) else 0 for k in range(n))
            poly = derive_raw_moment_ode(net, e)
            total = poly if total is None else total.__iadd__(poly)
        assert total.is_zero(tol=1e-12)


def test_dimerization_mass_balance_derivative_is_zero():
    net = builtin_model("dimerization")
    total = derive_raw_moment_ode(net, (1, 0))
    total += derive_raw_moment_ode(net, (0, 1)).scaled(2.0)
    assert total.is_zero(tol=1e-15)
    # also for the second moment of P + 2 P2
    sq = derive_raw_moment_ode(net, (2, 0))
    sq += derive_raw_moment_ode(net, (1, 1)).scaled(4.0)
    sq += derive_raw_moment_ode(net, (0, 2)).scaled(4.0)
    assert sq.is_zero(tol=1e-12)


def test_closed_exclusive_switch_keeps_gene_total():
    net = builtin_model("exclusive_switch")
    system = close_system(net, 3)
    mv = integrate_moments(system, init_moments_from_state(net.initial_state, system), 20.0)
    genes = sum(mv[tuple(1 if k == net.index(s) else 0 for k in range(5))] for s in ("DNA", "DNA.P1", "DNA.P2"))
    assert genes == pytest.approx(1.0, abs=1e-8)


# ---------------------------------------------------------------------------
# data plumbing


def test_central_raw_roundtrip():
    rng = np.random.default_rng(3)
    states, probs = random_distribution(rng, 2)
    idx = enumerate_moment_indices(2, 4)
    mom = Moments(states, probs)
    raw = {a: mom[a] for a in idx}
    cen = central_from_raw(raw, idx)
    for a in idx:
        if sum(a) >= 2:
            assert cen[a] == pytest.approx(central(states, probs, a), abs=1e-9)
    means = [raw[(1, 0)], raw[(0, 1)]]
    back = raw_from_central(cen, means, idx)
    for a in idx:
        assert back[a] == pytest.approx(raw[a], rel=1e-10)


def test_moment_csv_roundtrip():
    net = builtin_model("exclusive_switch")
    system = close_system(net, 2)
    mv = integrate_moments(system, init_moments_from_state(net.initial_state, system), 5.0)
    buf = io.StringIO()
    write_moments_csv(mv, buf)
    text = buf.getvalue()
    assert text.splitlines()[1] == "multi_index,value"
    back = read_moments_csv(io.StringIO(text))
    assert back.species == mv.species and back.time == mv.time
    assert back.to_dict() == mv.to_dict()


def test_moment_vector_univariate_and_realizability_flag():
    mv = MomentVector(("A", "B"), [(1, 0), (0, 1), (2, 0), (1, 1), (0, 2)], [2.0, 1.0, 3.0, 2.0, 2.0])
    assert mv.univariate("A").tolist() == [1.0, 2.0, 3.0]
    assert mv.warnings and "A" in mv.warnings[0]


@pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba not installed")
def test_closure_kernel_backends_agree():
    net = builtin_model("exclusive_switch")
    system = close_system(net, 4)
    rng = np.random.default_rng(0)
    m = rng.uniform(0.5, 2.0, system.n_equations)
    previous = _kernels.backend
    try:
        _kernels.set_backend("numpy")
        a = system.rhs(0.0, m)
        _kernels.set_backend("numba")
        b = system.rhs(0.0, m)
    finally:
        _kernels.set_backend(previous)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_moments_from_sparse_distribution():
    d = SparseDistribution(("A", "B"), [[1, 2], [3, 0]], [0.25, 0.75])
    mv = moments_from_distribution(d, [(1, 0), (1, 1), (0, 2)])
    assert mv.values.tolist() == pytest.approx([2.5, 0.5, 1.0])
