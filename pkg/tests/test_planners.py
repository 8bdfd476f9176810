import math

import numpy as np
import pytest

from oracles import full_support_evaluator, small_world_cases
from retroplan.analysis import and_or_optimum
from retroplan.core import CostModel, Expansion, route_cost, route_is_synthesizable, route_length
from retroplan.planners import (PlannerBudget, dual_value_heuristic, evaluate, greedy_dfs, reaction_cost,
                                retro_star)
from retroplan.synthworld import RewriteRule, WorldSpec, apply_template

UNIT = CostModel(1.0, 10.0)


class FixedEvaluator:
    """Proposals in a fixed template order with given priors."""

    def __init__(self, world, order=None):
        self.world = world
        self.order = order or {}
        self.model_calls = 0

    def expansions(self, m):
        self.model_calls += 1
        ts = sorted(self.world.applicable_templates(m), key=lambda t: self.order.get(t, t))
        n = len(ts)
        return [Expansion(t, self.world.apply_template(m, t).reactants, 1.0 / n) for t in ts]

    def values(self, molecules):
        return [(0.5, 1.0) for _ in molecules]


def replays(route, world):
    for node in route.nodes():
        if not node.is_leaf:
            if apply_template(world, node.molecule, node.template).reactants != tuple(
                    c.molecule for c in node.children):
                return False
    return True


def test_one_step_target(tiny_world):
    for planner in (lambda b: retro_star("ABCA", FixedEvaluator(tiny_world), tiny_world, b),
                    lambda b: greedy_dfs("ABCA", FixedEvaluator(tiny_world), tiny_world, b)):
        res = planner(10)
        assert res.success and res.calls == 1 and route_length(res.route) == 1


def test_terminal_target_rejected(tiny_world):
    with pytest.raises(ValueError):
        retro_star("AB", FixedEvaluator(tiny_world), tiny_world, 10)
    with pytest.raises(ValueError):
        greedy_dfs("AB", FixedEvaluator(tiny_world), tiny_world, 10)


def test_retro_star_optimal_on_small_worlds():
    cases = small_world_cases(8)
    assert len(cases) >= 20
    checked = 0
    for world, target in cases:
        ev = full_support_evaluator(world, 0)
        res = retro_star(target, ev, world, 10_000, UNIT, prior_weight=0.0, stop="optimal")
        best = and_or_optimum(world, ev.expansions, target, lambda e: 1.0)
        if res.success:
            assert route_cost(res.route, UNIT) == best
            checked += 1
        else:
            assert best == math.inf
    assert checked >= 10


def test_prior_weighted_costs_match_dp():
    for world, target in small_world_cases(4, seed=30):
        ev = full_support_evaluator(world, 1)
        cm = CostModel()
        res = retro_star(target, ev, world, 10_000, cm, prior_weight=1.0, stop="optimal")
        best = and_or_optimum(world, ev.expansions, target, lambda e: reaction_cost(e.prior, cm, 1.0))
        if res.success:
            priors = {(m, t) for m, t in res.route.reactions()}
            got = 0.0
            for m, t in priors:
                e = next(x for x in ev.expansions(m) if x.template == t)
                got += reaction_cost(e.prior, cm, 1.0)
            assert got == pytest.approx(best, rel=1e-9)


def test_returned_routes_replay(world50):
    ev = full_support_evaluator(world50, 2)
    rng = np.random.default_rng(0)
    from retroplan.synthworld import sample_training_routes
    for _, target in sample_training_routes(world50, 15, 5, seed=2):
        for res in (retro_star(target, ev, world50, 100), greedy_dfs(target, ev, world50, 100)):
            assert res.calls <= 100
            if res.success:
                assert route_is_synthesizable(res.route) and replays(res.route, world50)
                assert res.route.molecule == target


def test_budget_accounting(world50):
    ev = full_support_evaluator(world50, 3)
    target = "ABCDEFGHABCDEFGH"
    for b in (1, 3, 7):
        for res in (retro_star(target, ev, world50, b), greedy_dfs(target, ev, world50, b)):
            assert res.calls <= b
            if res.trace and res.trace[-1][0] == "budget":
                assert res.trace[-1] == ("budget", b) and not res.success


def test_dfs_unique_route_perfect_policy():
    w = WorldSpec("ABCD", (RewriteRule("AB", ("C",)), RewriteRule("CD", ("A",)), RewriteRule("DD", ("B",))),
                  bb_max_len=2, poison_char="Z")
    res = greedy_dfs("ABDD", FixedEvaluator(w), w, 50)
    assert res.success
    assert res.calls == route_length(res.route)


def test_dfs_all_poison_trace():
    w = WorldSpec("AB", (RewriteRule("AAA", ("ZA",)), RewriteRule("BBB", ("ZB",))), bb_max_len=2,
                  poison_char="Z")
    res = greedy_dfs("AAABBB", FixedEvaluator(w), w, 50)
    assert not res.success
    kinds = [t[0] for t in res.trace]
    assert kinds.count("backtrack") == 2 and kinds.count("dead-end") == 2


def test_dual_heuristic():
    class Ev:
        def values(self, ms):
            return [(0.25, 2.0) for _ in ms]

    assert dual_value_heuristic(Ev(), CostModel(0.1, 5.0))(["X"]) == [0.25 * 2.0 + 0.75 * 5.0]


def test_evaluate_monotone_and_identical_rows(world50, small_reference):
    from retroplan.experiment import TrainedModel, make_planner
    ref, _, targets = small_reference
    model = TrainedModel.supervised(ref)
    cm = CostModel()
    budget = PlannerBudget(60, (5, 10, 20, 60))
    planners = {"a": make_planner("retro0", model, world50, cm), "b": make_planner("retro0", model, world50, cm),
                "dfs": make_planner("dfs", model, world50, cm)}
    report = evaluate(targets[:30], planners, budget, cm)
    rows = report.to_csv().splitlines()
    assert [r.split(",", 1)[1] for r in rows if r.startswith("a,")] == \
        [r.split(",", 1)[1] for r in rows if r.startswith("b,")]
    for p in report.planners:
        rates = [p.success_at[n] for n in budget.checkpoints]
        assert rates == sorted(rates)
    assert "solved by all" in report.summary()
    with pytest.raises(ValueError):
        evaluate([], planners, budget, cm)


def test_budget_validation():
    with pytest.raises(ValueError):
        PlannerBudget(0)
    with pytest.raises(ValueError):
        PlannerBudget(100, (100, 50))
