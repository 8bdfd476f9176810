"""Exact enumeration over small worlds: route distributions and AND-OR optima.

Reactions strictly shorten molecules, so every recursion here terminates
without a depth guard.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterator, Sequence

import numpy as np

from .core import BUILDING_BLOCK, DEAD_END, CostModel, Expansion, Molecule
from .synthworld import WorldSpec

# molecule -> [(expansion, probability)], probabilities summing to 1
StochasticPolicy = Callable[[Molecule], Sequence[tuple[Expansion, float]]]


def uniform_policy(world: WorldSpec) -> StochasticPolicy:
    def pi(m: Molecule):
        ts = world.applicable_templates(m)
        return [(world.apply_template(m, t), 1.0 / len(ts)) for t in ts]

    return pi


def random_policy(world: WorldSpec, seed: int, concentration: float = 1.0) -> StochasticPolicy:
    """Dirichlet-distributed action probabilities, fixed per molecule."""
    cache: dict = {}

    def pi(m: Molecule):
        if m not in cache:
            ts = world.applicable_templates(m)
            rng = np.random.default_rng([seed, *m.encode()])
            p = rng.dirichlet(np.full(len(ts), concentration)) if ts else np.zeros(0)
            cache[m] = [(world.apply_template(m, t), float(q)) for t, q in zip(ts, p)]
        return cache[m]

    return pi


def reachable_molecules(world: WorldSpec, target: Molecule, limit: int = 10_000) -> set[Molecule]:
    """Every molecule reachable by repeated reactions; raises past ``limit``."""
    seen = {target}
    stack = [target]
    while stack:
        m = stack.pop()
        if world.status(m) is not None:
            continue
        for t in world.applicable_templates(m):
            for r in world.apply_template(m, t).reactants:
                if r not in seen:
                    seen.add(r)
                    if len(seen) > limit:
                        raise ValueError(f"more than {limit} reachable molecules")
                    stack.append(r)
    return seen


# ---- route distribution under a stochastic policy ---------------------------------


@dataclass(frozen=True)
class SampledRoute:
    prob: float
    cost: float  # reaction costs plus dead-end penalties
    reaction_cost: float  # reaction costs only
    synthesizable: bool


def route_count(world: WorldSpec, policy: StochasticPolicy, target: Molecule) -> int:
    @lru_cache(maxsize=None)
    def count(m: Molecule) -> int:
        if world.status(m) is not None:
            return 1
        return sum(math.prod(count(r) for r in e.reactants) for e, p in policy(m) if p > 0)

    return count(target)


def enumerate_routes(world: WorldSpec, policy: StochasticPolicy, target: Molecule,
                     cm: CostModel) -> Iterator[SampledRoute]:
    """Every route the policy can produce from ``target``, with its probability."""

    @lru_cache(maxsize=None)
    def routes(m: Molecule) -> tuple[SampledRoute, ...]:
        status = world.status(m)
        if status == BUILDING_BLOCK:
            return (SampledRoute(1.0, 0.0, 0.0, True),)
        if status == DEAD_END:
            return (SampledRoute(1.0, 0.0, 0.0, False),)
        out = []
        for e, p in policy(m):
            if p <= 0:
                continue
            n_dead = sum(world.status(r) == DEAD_END for r in e.reactants)
            step = cm.reaction_cost(n_dead)
            for combo in itertools.product(*(routes(r) for r in e.reactants)):
                out.append(SampledRoute(
                    p * math.prod(c.prob for c in combo),
                    step + sum(c.cost for c in combo),
                    cm.c_rxn + sum(c.reaction_cost for c in combo),
                    n_dead == 0 and all(c.synthesizable for c in combo)))
        return tuple(out)

    if world.status(target) is not None:
        raise ValueError(f"target {target!r} is terminal")
    yield from routes(target)


@dataclass(frozen=True)
class Decomposition:
    n_routes: int
    total_prob: float
    p_syn: float
    expected_cost: float  # E[X]
    cost_given_syn: float  # E[X | Y=1], nan if P(Y=1)=0
    cost_given_fail: float  # E[X | Y=0], nan if P(Y=0)=0
    recomposed: float  # P(Y=1) E[X|Y=1] + P(Y=0) E[X|Y=0]
    approximation: float  # P(Y=1) E[sum c_rxn | Y=1] + P(Y=0) c_dead

    @property
    def identity_error(self) -> float:
        return abs(self.expected_cost - self.recomposed)

    @property
    def approximation_gap(self) -> float:
        return self.expected_cost - self.approximation


def decompose(world: WorldSpec, policy: StochasticPolicy, target: Molecule, cm: CostModel) -> Decomposition:
    """Split the expected route cost by synthesizability, from explicit enumeration."""
    routes = list(enumerate_routes(world, policy, target, cm))
    probs = np.array([r.prob for r in routes])
    cost = np.array([r.cost for r in routes])
    rxn = np.array([r.reaction_cost for r in routes])
    syn = np.array([r.synthesizable for r in routes])
    p1 = math.fsum(probs[syn])
    p0 = math.fsum(probs[~syn])
    e_x = math.fsum(probs * cost)
    e1 = math.fsum(probs[syn] * cost[syn]) / p1 if p1 > 0 else math.nan
    e0 = math.fsum(probs[~syn] * cost[~syn]) / p0 if p0 > 0 else math.nan
    rec = (p1 * e1 if p1 > 0 else 0.0) + (p0 * e0 if p0 > 0 else 0.0)
    r1 = math.fsum(probs[syn] * rxn[syn]) / p1 if p1 > 0 else 0.0
    return Decomposition(len(routes), math.fsum(probs), p1, e_x, e1, e0, rec, p1 * r1 + p0 * cm.c_dead)


@dataclass(frozen=True)
class Moments:
    p_syn: float  # P(Y=1)
    e_cost: float  # E[X]
    e_cost_syn: float  # E[X 1{Y=1}]


def route_moments(world: WorldSpec, policy: StochasticPolicy, target: Molecule, cm: CostModel) -> Moments:
    """The same quantities by recursion over independent subtrees, without enumerating routes."""

    @lru_cache(maxsize=None)
    def mom(m: Molecule) -> Moments:
        status = world.status(m)
        if status == BUILDING_BLOCK:
            return Moments(1.0, 0.0, 0.0)
        if status == DEAD_END:
            return Moments(0.0, 0.0, 0.0)
        p_syn = e_cost = e_cost_syn = 0.0
        for e, p in policy(m):
            kids = [mom(r) for r in e.reactants]
            step = cm.reaction_cost(sum(world.status(r) == DEAD_END for r in e.reactants))
            ps = [k.p_syn for k in kids]
            all_syn = math.prod(ps)
            joint = step * all_syn
            for i, k in enumerate(kids):
                joint += k.e_cost_syn * math.prod(ps[:i] + ps[i + 1:])
            p_syn += p * all_syn
            e_cost += p * (step + sum(k.e_cost for k in kids))
            e_cost_syn += p * joint
        return Moments(p_syn, e_cost, e_cost_syn)

    return mom(target)


# ---- AND-OR optimum ------------------------------------------------------------------


def and_or_optimum(world: WorldSpec, expansions: Callable[[Molecule], Sequence[Expansion]], target: Molecule,
                   edge_cost: Callable[[Expansion], float], max_depth: int = 15) -> float:
    """Least total edge cost over complete routes, molecules at ``max_depth`` unexpandable."""

    @lru_cache(maxsize=None)
    def best(m: Molecule, depth: int) -> float:
        status = world.status(m)
        if status == BUILDING_BLOCK:
            return 0.0
        if status == DEAD_END or depth >= max_depth:
            return math.inf
        return min((edge_cost(e) + sum(best(r, depth + 1) for r in e.reactants) for e in expansions(m)),
                   default=math.inf)

    return best(target, 0)
