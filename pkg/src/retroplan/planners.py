"""Evaluation planners (best-first AND-OR search, greedy DFS) and metrics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import BUILDING_BLOCK, DEAD_END, CostModel, Molecule, RouteTree, route_length
from .mcts import Evaluator
from .synthworld import WorldSpec

CHECKPOINTS = (50, 100, 200, 300, 400, 500)
_EPS = 1e-9

ValueFn = Callable[[Sequence[Molecule]], Sequence[float]]


class BudgetExhausted(Exception):
    pass


@dataclass(frozen=True)
class PlannerBudget:
    max_calls: int = 500
    checkpoints: tuple[int, ...] = CHECKPOINTS

    def __post_init__(self) -> None:
        if self.max_calls <= 0 or any(c <= 0 for c in self.checkpoints):
            raise ValueError("budgets must be positive")
        if list(self.checkpoints) != sorted(set(self.checkpoints)):
            raise ValueError("checkpoints must be strictly ascending")


@dataclass
class PlanResult:
    target: Molecule
    success: bool
    route: Optional[RouteTree]
    calls: int  # model calls spent when the search stopped
    reaction_nodes: int
    molecule_nodes: int
    trace: list = field(default_factory=list)


def zero_value(molecules: Sequence[Molecule]) -> list[float]:
    return [0.0] * len(molecules)


def dual_value_heuristic(evaluator: Evaluator, cm: CostModel) -> ValueFn:
    """Leaf estimate ``V^syn * V^cost + (1 - V^syn) * c_dead``."""

    def fn(molecules: Sequence[Molecule]) -> list[float]:
        return [s * c + (1.0 - s) * cm.c_dead for s, c in evaluator.values(molecules)]

    return fn


# ---- Retro*-style best-first AND-OR search ----------------------------------------


class _Mol:
    __slots__ = ("uid", "molecule", "parent", "depth", "status", "children", "expanded", "h", "value",
                 "solved_cost")

    def __init__(self, uid, molecule, parent, depth, status, h):
        self.uid = uid
        self.molecule = molecule
        self.parent = parent
        self.depth = depth
        self.status = status
        self.children: list[_Rxn] = []
        self.expanded = False
        self.h = h
        if status == BUILDING_BLOCK:
            self.value = self.solved_cost = 0.0
        elif status == DEAD_END:
            self.value = self.solved_cost = math.inf
        else:
            self.value, self.solved_cost = h, math.inf

    @property
    def is_frontier(self) -> bool:
        return self.status is None and not self.expanded

    def recompute(self) -> None:
        if self.expanded:
            self.value = min((r.value for r in self.children), default=math.inf)
            self.solved_cost = min((r.solved_cost for r in self.children), default=math.inf)


class _Rxn:
    __slots__ = ("template", "prior", "cost", "parent", "children", "value", "solved_cost")

    def __init__(self, template, prior, cost, parent):
        self.template = template
        self.prior = prior
        self.cost = cost
        self.parent = parent
        self.children: list[_Mol] = []
        self.value = math.inf
        self.solved_cost = math.inf

    def recompute(self) -> None:
        self.value = self.cost + sum(c.value for c in self.children)
        self.solved_cost = self.cost + sum(c.solved_cost for c in self.children)


def reaction_cost(prior: float, cm: CostModel, prior_weight: float) -> float:
    """Edge cost ``c_rxn - prior_weight * log(prior)``."""
    if prior_weight == 0:
        return cm.c_rxn
    return cm.c_rxn - prior_weight * math.log(max(prior, 1e-300))


def _best_solved_route(node: _Mol) -> RouteTree:
    if node.status == BUILDING_BLOCK:
        return RouteTree.leaf(node.molecule, BUILDING_BLOCK)
    rxn = min((r for r in node.children), key=lambda r: (r.solved_cost, r.template))
    return RouteTree.node(node.molecule, rxn.template, [_best_solved_route(c) for c in rxn.children])


def retro_star(target: Molecule, evaluator: Evaluator, world: WorldSpec, budget: int,
               cm: CostModel = CostModel(), value_fn: ValueFn = zero_value, *,
               prior_weight: float = 1.0, max_depth: int = 15, stop: str = "first") -> PlanResult:
    """Best-first search on an AND-OR tree.

    Each iteration expands the frontier molecule on the cheapest partial
    route (reaction costs plus ``value_fn`` at open leaves); ties go to the
    earliest-created leaf.  Reactions cost ``c_rxn``; a positive
    ``prior_weight`` adds ``-prior_weight * log(prior)`` per reaction.  ``stop="first"`` ends at the first complete
    route; ``stop="optimal"`` ends once the cheapest partial route is
    itself complete, which makes the result optimal for admissible
    ``value_fn``.
    """
    if world.status(target) is not None:
        raise ValueError(f"target {target!r} is terminal")
    if stop not in ("first", "optimal"):
        raise ValueError("stop must be 'first' or 'optimal'")
    nodes: list[_Mol] = []
    n_rxn = 0

    def new_mols(molecules, parent, depth):
        statuses = [world.status(m) for m in molecules]
        open_mols = [m for m, s in zip(molecules, statuses) if s is None and depth < max_depth]
        hs = dict(zip(open_mols, value_fn(open_mols))) if open_mols else {}
        out = []
        for m, s in zip(molecules, statuses):
            if s is None and depth >= max_depth:
                s = DEAD_END  # cannot be expanded here
            node = _Mol(len(nodes), m, parent, depth, s, hs.get(m, 0.0))
            nodes.append(node)
            out.append(node)
        return out

    root = new_mols([target], None, 0)[0]
    calls = 0

    def done() -> bool:
        if root.solved_cost == math.inf:
            return False
        return stop == "first" or root.solved_cost <= root.value + _EPS

    while not done():
        if root.value == math.inf or calls >= budget:
            return PlanResult(target, False, None, calls, n_rxn, len(nodes))
        leaf = _select_frontier(root)
        if leaf is None:  # only possible under float noise; treat the cheapest route as stuck
            return PlanResult(target, False, None, calls, n_rxn, len(nodes))
        calls += 1
        leaf.expanded = True
        for e in evaluator.expansions(leaf.molecule):
            rxn = _Rxn(e.template, e.prior, reaction_cost(e.prior, cm, prior_weight), leaf)
            rxn.children = new_mols(e.reactants, rxn, leaf.depth + 1)
            rxn.recompute()
            leaf.children.append(rxn)
            n_rxn += 1
        node = leaf
        while node is not None:
            node.recompute()
            rxn = node.parent
            if rxn is None:
                break
            rxn.recompute()
            node = rxn.parent
    return PlanResult(target, True, _best_solved_route(root), calls, n_rxn, len(nodes))


def _select_frontier(root: _Mol) -> Optional[_Mol]:
    """Earliest-created frontier leaf whose best-route cost equals the root value."""
    bound = root.value + _EPS * max(1.0, abs(root.value))
    best: Optional[_Mol] = None
    stack = [(root, root.value)]
    while stack:
        m, vt = stack.pop()
        if m.is_frontier:
            if best is None or m.uid < best.uid:
                best = m
            continue
        for r in m.children:
            vt_r = vt - m.value + r.value
            if vt_r <= bound:
                for c in r.children:
                    if c.status is None:
                        stack.append((c, vt_r))
    return best


# ---- greedy depth-first search ---------------------------------------------------


def greedy_dfs(target: Molecule, evaluator: Evaluator, world: WorldSpec, budget: int,
               max_depth: int = 15) -> PlanResult:
    """Always try the highest-prior proposal first; backtrack on failure."""
    if world.status(target) is not None:
        raise ValueError(f"target {target!r} is terminal")
    calls = 0
    n_rxn = 0
    n_mol = 0
    trace: list = []

    def solve(m: Molecule, depth: int) -> Optional[RouteTree]:
        nonlocal calls, n_rxn, n_mol
        n_mol += 1
        status = world.status(m)
        if status == BUILDING_BLOCK:
            return RouteTree.leaf(m, BUILDING_BLOCK)
        if status == DEAD_END:
            trace.append(("dead-end", m))
            return None
        if depth >= max_depth:
            trace.append(("depth-limit", m))
            return None
        if calls >= budget:
            raise BudgetExhausted
        calls += 1
        for e in evaluator.expansions(m):
            n_rxn += 1
            children = []
            for r in e.reactants:
                sub = solve(r, depth + 1)
                if sub is None:
                    break
                children.append(sub)
            else:
                return RouteTree.node(m, e.template, children)
            trace.append(("backtrack", m, e.template))
        return None

    try:
        route = solve(target, 0)
    except BudgetExhausted:
        trace.append(("budget", calls))
        route = None
    return PlanResult(target, route is not None, route, calls, n_rxn, n_mol, trace)


# ---- evaluation harness ---------------------------------------------------------

Planner = Callable[[Molecule, int], PlanResult]


@dataclass
class PlannerReport:
    name: str
    success_at: dict[int, float]
    avg_calls_solved: float
    avg_calls_all: float
    avg_reaction_nodes: float
    avg_molecule_nodes: float
    avg_length_common: float
    avg_length_solved: float
    n_solved: int
    results: list[PlanResult] = field(default_factory=list, repr=False)


@dataclass
class EvalReport:
    planners: list[PlannerReport]
    n_targets: int
    n_common: int
    checkpoints: tuple[int, ...]

    def by_name(self, name: str) -> PlannerReport:
        for p in self.planners:
            if p.name == name:
                return p
        raise KeyError(name)

    def to_csv(self, header: str = "") -> str:
        buf = io.StringIO()
        if header:
            buf.write(header)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["planner", "budget", "success_rate", "avg_calls_solved", "avg_calls_all",
                    "avg_reaction_nodes", "avg_molecule_nodes", "avg_length_common", "n_common", "n_targets"])
        for p in self.planners:
            for n in self.checkpoints:
                w.writerow([p.name, n, _fmt(p.success_at[n]), _fmt(p.avg_calls_solved), _fmt(p.avg_calls_all),
                            _fmt(p.avg_reaction_nodes), _fmt(p.avg_molecule_nodes), _fmt(p.avg_length_common),
                            self.n_common, self.n_targets])
        return buf.getvalue()

    def summary(self) -> str:
        cols = [str(n) for n in self.checkpoints]
        head = f"{'planner':<22}" + "".join(f"{c:>8}" for c in cols) + f"{'#calls':>9}{'#T':>9}{'#M':>9}{'len':>7}"
        lines = [f"targets: {self.n_targets}   solved by all: {self.n_common}", head, "-" * len(head)]
        for p in self.planners:
            row = f"{p.name:<22}" + "".join(f"{100 * p.success_at[n]:>8.2f}" for n in self.checkpoints)
            row += f"{p.avg_calls_all:>9.1f}{p.avg_reaction_nodes:>9.1f}{p.avg_molecule_nodes:>9.1f}"
            row += f"{p.avg_length_common:>7.2f}"
            lines.append(row)
        return "\n".join(lines) + "\n"


def _fmt(x: float) -> str:
    return "nan" if x != x else f"{x:.6f}"


def _mean(xs) -> float:
    xs = list(xs)
    return float(np.mean(xs)) if xs else float("nan")


def evaluate(test_set: Sequence[Molecule], planners: dict[str, Planner], budget: PlannerBudget,
             cm: CostModel = CostModel()) -> EvalReport:
    """Run every planner on every target once at the largest budget.

    Searches are deterministic and never look at the budget before it runs
    out, so success at a smaller checkpoint ``n`` is success with at most
    ``n`` calls.
    """
    if not test_set:
        raise ValueError("empty test set")
    top = max(budget.max_calls, max(budget.checkpoints))
    runs = {name: [fn(t, top) for t in test_set] for name, fn in planners.items()}
    common = [i for i in range(len(test_set)) if all(runs[n][i].success for n in runs)]
    reports = []
    for name, results in runs.items():
        solved = [r for r in results if r.success]
        reports.append(PlannerReport(
            name=name,
            success_at={n: sum(r.success and r.calls <= n for r in results) / len(results)
                        for n in budget.checkpoints},
            avg_calls_solved=_mean(r.calls for r in solved),
            avg_calls_all=_mean(r.calls if r.success else top for r in results),
            avg_reaction_nodes=_mean(r.reaction_nodes for r in results),
            avg_molecule_nodes=_mean(r.molecule_nodes for r in results),
            avg_length_common=_mean(route_length(results[i].route) for i in common),
            avg_length_solved=_mean(route_length(r.route) for r in solved),
            n_solved=len(solved),
            results=results,
        ))
    return EvalReport(reports, len(test_set), len(common), tuple(budget.checkpoints))
