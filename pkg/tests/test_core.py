import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from retroplan.core import (BUILDING_BLOCK, DEAD_END, OPEN, CostModel, Expansion, RouteFormatError, RouteTree,
                            UnresolvedRouteError, dump_route, load_route, route_cost, route_is_synthesizable,
                            route_length)

BB = BUILDING_BLOCK


def linear(n, last=BB):
    node = RouteTree.leaf("X0", last)
    for i in range(1, n + 1):
        node = RouteTree.node(f"X{i}", i, [node])
    return node


def test_linear_route_cost_and_length():
    r = linear(3)
    assert route_cost(r, CostModel()) == pytest.approx(0.3)
    assert route_length(r) == 3
    assert route_is_synthesizable(r)


def test_dead_child_adds_penalty():
    inner = RouteTree.node("AAAA", 1, [RouteTree.leaf("AB", BB), RouteTree.leaf("ZZZZ", DEAD_END)])
    r = RouteTree.node("AAAAA", 0, [inner])
    assert route_cost(r, CostModel()) == pytest.approx(5.2)
    assert not route_is_synthesizable(r)


def test_bare_building_block():
    r = RouteTree.leaf("AB", BB)
    assert route_cost(r, CostModel()) == 0.0
    assert route_length(r) == 0
    assert route_is_synthesizable(r)


def test_branching_length():
    a = RouteTree.node("AAAA", 1, [RouteTree.leaf("A", BB)])
    b = RouteTree.node("BBBB", 2, [RouteTree.leaf("B", BB)])
    assert route_length(RouteTree.node("AAAABBBB", 0, [a, b])) == 3


def test_open_leaf_is_rejected():
    r = RouteTree.node("ABCD", 0, [RouteTree.leaf("ABC", OPEN)])
    for fn in (lambda: route_cost(r, CostModel()), lambda: route_length(r), lambda: route_is_synthesizable(r)):
        with pytest.raises(UnresolvedRouteError):
            fn()


def test_route_tree_shape_rules():
    with pytest.raises(ValueError):
        RouteTree("A", status="weird")
    with pytest.raises(ValueError):
        RouteTree("A", template=1)
    with pytest.raises(ValueError):
        RouteTree("", status=BB)


def test_expansion_is_canonical():
    e = Expansion(3, ("B", "A", "B"), 0.5)
    assert e.reactants == ("A", "B")
    with pytest.raises(ValueError):
        Expansion(0, ("A",), 1.5)
    with pytest.raises(ValueError):
        Expansion(0, ())


def test_cost_model_validation():
    with pytest.raises(ValueError):
        CostModel(1.0, 0.5)
    with pytest.raises(ValueError):
        CostModel(-0.1, 5.0)


def test_acyclicity():
    r = RouteTree.node("AAAA", 0, [RouteTree.node("AAA", 1, [RouteTree.leaf("AAAA", BB)])])
    assert not r.is_acyclic()
    assert linear(4).is_acyclic()


def test_serialization_round_trip():
    a = RouteTree.node("AAAA", 1, [RouteTree.leaf("A", BB), RouteTree.leaf("ZA", DEAD_END)])
    r = RouteTree.node("AAAABBBB", 0, [a, RouteTree.leaf("BBB", OPEN)])
    text = dump_route(r)
    assert text.splitlines()[0] == "0\tAAAABBBB\t0"
    assert load_route(text) == r


@pytest.mark.parametrize("text", ["", "1\tA\tBB\n", "0\tA\n", "0\tA\tBB\n0\tB\tBB\n", "x\tA\tBB\n"])
def test_malformed_route_text(text):
    with pytest.raises(RouteFormatError):
        load_route(text)


@st.composite
def resolved_routes(draw, depth=0):
    if depth >= 3 or draw(st.booleans()):
        return RouteTree.leaf(f"L{draw(st.integers(0, 10**6))}", draw(st.sampled_from([BB, DEAD_END])))
    kids = [draw(resolved_routes(depth + 1)) for _ in range(draw(st.integers(1, 3)))]
    return RouteTree.node(f"N{draw(st.integers(0, 10**6))}", draw(st.integers(0, 49)), kids)


@settings(max_examples=200, deadline=None)
@given(resolved_routes(), st.floats(0.0, 1.0), st.floats(1.5, 20.0))
def test_synthesizable_iff_cost_is_pure_reaction_cost(route, c_rxn, c_dead):
    cm = CostModel(c_rxn, c_dead)
    syn = route_is_synthesizable(route)
    pure = np.isclose(route_cost(route, cm), c_rxn * route_length(route), rtol=0, atol=1e-12)
    if route.is_leaf:
        assert pure  # no reactions, nothing charged even for a dead root
    else:
        assert syn == pure
    # cost rises with c_dead only through dead leaves
    bumped = route_cost(route, CostModel(c_rxn, c_dead + 1.0))
    if syn:
        assert bumped == pytest.approx(route_cost(route, cm))
    elif not route.is_leaf:
        assert bumped > route_cost(route, cm)


@settings(max_examples=100, deadline=None)
@given(resolved_routes())
def test_round_trip_property(route):
    assert load_route(dump_route(route)) == route
