import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmekit.network import (
    BUILTIN_MODELS,
    CONSERVED_GROUPS,
    NetworkError,
    NetworkSyntaxError,
    ReactionNetwork,
    builtin_model,
    change_vector,
    format_network,
    parse_network,
    propensity,
    propensity_polynomial,
)

DIMER = """
# comment line
species: P, P2
2 P -> P2 @ 0.5
P2 -> 2 P @ 0.25
init: P=10
"""


def test_parse_dimerization_structure():
    net = parse_network(DIMER)
    assert net.species == ("P", "P2")
    assert net.initial_state == (10, 0)
    np.testing.assert_array_equal(net.stoichiometry, [[-2, 1], [2, -1]])
    np.testing.assert_array_equal(net.rates, [0.5, 0.25])
    np.testing.assert_array_equal(net.reactant_pairs, [[0, 0], [1, -1]])
    assert [r.order for r in net.reactions] == [2, 1]


def test_propensities_use_binomial_counting():
    net = parse_network(DIMER)
    # c * binom(10, 2) and c * binom(3, 1)
    assert propensity(net, 0, (10, 0)) == pytest.approx(0.5 * 45)
    assert propensity(net, 1, (0, 3)) == pytest.approx(0.75)
    assert propensity(net, 0, (1, 0)) == 0.0
    net2 = parse_network("species: A, B\nA + B -> 0 @ 2\n0 -> A @ 3\n")
    assert propensity(net2, 0, (4, 5)) == pytest.approx(40.0)
    assert propensity(net2, 1, (4, 5)) == pytest.approx(3.0)
    assert change_vector(net2, 0) == (-1, -1)


@pytest.mark.parametrize("x", [0, 1, 2, 7, 30])
def test_propensity_polynomial_matches_propensity(x):
    net = parse_network("species: A, B\n2 A -> B @ 0.3\nA + B -> A @ 1.5\nB -> 0 @ 0.7\n0 -> A @ 2\n")
    for j in range(net.n_reactions):
        poly = propensity_polynomial(net, j)
        for y in (0, 3, 11):
            value = sum(c * x ** e[0] * y ** e[1] for e, c in poly.items())
            assert value == pytest.approx(propensity(net, j, (x, y)), abs=1e-12)


def test_species_order_follows_first_appearance_without_header():
    net = parse_network("B -> A @ 1\nA + C -> B @ 2\n")
    assert net.species == ("B", "A", "C")


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("species: A\nA -> A @ 1\n", "does not change"),
        ("species: A\n3 A -> 0 @ 1\n", "trimolecular"),
        ("species: A\nA -> 0 @ -1\n", "positive"),
        ("species: A\nA -> 0 @ x\n", "bad rate"),
        ("species: A\nA -> B @ 1\n", "not declared"),
        ("species: A\nA -> 0\n", "missing rate"),
        ("species: A\nA 0 @ 1\n", "expected"),
        ("species: A\nA -> 0 @ 1\ninit: A=1.5\n", "non-negative integer"),
        ("species: A\nA -> 0 @ 1\ninit: Z=1\n", "unknown species"),
        ("species: A, A\nA -> 0 @ 1\n", "duplicate"),
        ("species: A\n1.5 A -> 0 @ 1\n", "coefficient"),
    ],
)
def test_parse_errors_name_the_problem(text, fragment):
    with pytest.raises(NetworkSyntaxError) as info:
        parse_network(text)
    assert fragment in str(info.value)
    assert info.value.line is not None


def test_noop_reaction_allowed_on_request():
    net = parse_network("species: A\nA -> A @ 1\n", allow_noop=True)
    assert net.stoichiometry.tolist() == [[0]]


def test_builtin_models_shapes():
    dim = builtin_model("dimerization")
    assert (dim.n_species, dim.n_reactions, dim.initial_state) == (2, 2, (301, 0))
    es = builtin_model("exclusive_switch")
    assert (es.n_species, es.n_reactions) == (5, 10)
    assert es.initial_state == (1, 0, 0, 0, 0)
    ma = builtin_model("multi_attractor")
    assert (ma.n_species, ma.n_reactions) == (13, 24)
    assert sorted(BUILTIN_MODELS) == ["dimerization", "exclusive_switch", "multi_attractor"]


def test_builtin_rate_override_and_unknown_name():
    net = builtin_model("dimerization", c1=0.01)
    assert net.rates[0] == 0.01
    with pytest.raises(NetworkError):
        builtin_model("dimerization", c9=1.0)
    with pytest.raises(NetworkError):
        builtin_model("nope")


@pytest.mark.parametrize("model", sorted(CONSERVED_GROUPS))
def test_conserved_groups_have_zero_net_change(model):
    net = builtin_model(model)
    for group in CONSERVED_GROUPS[model]:
        idx = [net.index(s) for s in group]
        assert np.all(net.stoichiometry[:, idx].sum(axis=1) == 0)
        assert sum(net.initial_state[i] for i in idx) == 1


def test_network_validation():
    with pytest.raises(NetworkError):
        ReactionNetwork(("A",), (), (1, 2))
    net = builtin_model("exclusive_switch")
    with pytest.raises(KeyError):
        net.index("nope")
    assert net.index("P2") == 2
    assert net.with_initial_state([0, 1, 2, 0, 0]).initial_state == (0, 1, 2, 0, 0)
    with pytest.raises(NetworkError):
        net.with_rates([1.0])


names = st.sampled_from(["A", "B", "C", "D.x", "E_2"])
terms = st.lists(st.tuples(names, st.integers(1, 2)), min_size=0, max_size=2)


@st.composite
def networks(draw):
    lines = []
    for _ in range(draw(st.integers(1, 5))):
        left = draw(terms)
        if sum(c for _, c in left) > 2:
            left = left[:1]
        right = draw(terms)
        side = lambda t: " + ".join(f"{c} {n}" if c > 1 else n for n, c in t) or "0"  # noqa: E731
        rate = draw(st.floats(1e-3, 1e3, allow_nan=False))
        lines.append(f"{side(left)} -> {side(right)} @ {rate!r}")
    return "\n".join(lines) + "\n"


@settings(max_examples=60, deadline=None)
@given(networks())
def test_format_parse_roundtrip(text):
    try:
        net = parse_network(text)
    except NetworkSyntaxError:
        return  # e.g. a drawn no-op reaction
    assert parse_network(format_network(net)) == net
