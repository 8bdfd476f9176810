"""Dual-value MCTS over molecule (OR) / reaction (AND) nodes.

One simulation walks from the current simulation root by PUCT over
reactions and a fixed preference order over reactants, expands the leaf
with network-initialized children, and backs the path values up.  An
episode repeats this from a queue of simulation roots, committing one
reaction per root, until every open molecule is resolved or a failure is
hit.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import BUILDING_BLOCK, DEAD_END, OPEN, CostModel, Expansion, Molecule, RouteTree
from .nnet import Mlp
from .policy import TwoBranchPolicy
from .synthworld import WorldSpec, fingerprint_batch

VALUE_MODES = ("dual", "no-cost", "single")


class SearchError(RuntimeError):
    pass


@dataclass(frozen=True)
class MctsConfig:
    c_puct: float = 1.0
    simulations: int = 100
    max_depth: int = 15
    top_k: int = 50
    cost: CostModel = field(default_factory=CostModel)
    value_mode: str = "dual"
    root_order: str = "fifo"
    eliminate_ancestor_templates: bool = True
    reuse_tree: bool = True
    temperature: float = 1.0

    def __post_init__(self) -> None:
        if self.c_puct <= 0 or self.simulations <= 0 or self.max_depth <= 0 or self.top_k <= 0:
            raise ValueError("MCTS sizes and the exploration coefficient must be positive")
        if self.value_mode not in VALUE_MODES:
            raise ValueError(f"value_mode must be one of {VALUE_MODES}")
        if self.root_order not in ("fifo", "lifo"):
            raise ValueError("root_order must be fifo or lifo")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


class MoleculeNode:
    __slots__ = ("uid", "molecule", "parent", "depth", "status", "v_syn", "v_cost", "n",
                 "children", "expanded", "dead", "solved", "proposals", "net_syn", "net_cost")

    def __init__(self, uid: int, molecule: Molecule, parent: Optional["ReactionNode"], depth: int,
                 status: Optional[str]):
        self.uid = uid
        self.molecule = molecule
        self.parent = parent
        self.depth = depth
        self.status = status  # BUILDING_BLOCK, DEAD_END or None (open)
        self.v_syn = 0.0
        self.v_cost = 0.0
        self.n = 0
        self.children: list[ReactionNode] = []
        self.expanded = False
        self.dead = status == DEAD_END  # world dead end, or unexpandable in this tree
        self.solved = status == BUILDING_BLOCK
        self.proposals: tuple[int, ...] = ()
        self.net_syn = 0.0  # value assigned at creation, kept for target extraction
        self.net_cost = 0.0

    @property
    def is_open(self) -> bool:
        return self.status is None and not self.dead

    def ancestor_templates(self) -> set[int]:
        out = set()
        rn = self.parent
        while rn is not None:
            out.add(rn.template)
            rn = rn.parent.parent
        return out

    def __repr__(self) -> str:
        return f"MoleculeNode({self.molecule!r}, n={self.n}, syn={self.v_syn:.3f}, cost={self.v_cost:.3f})"


class ReactionNode:
    __slots__ = ("template", "prior", "r", "q", "n", "children", "parent")

    def __init__(self, template: int, prior: float, parent: MoleculeNode):
        self.template = template
        self.prior = prior
        self.r = 0.0
        self.q = 0.0
        self.n = 0
        self.children: list[MoleculeNode] = []
        self.parent = parent

    def refresh(self, c_rxn: float) -> None:
        """R = product of child V^syn, Q = c_rxn + sum of child V^cost."""
        r = 1.0
        q = c_rxn
        for c in self.children:
            r *= c.v_syn
            q += c.v_cost
        self.r = r
        self.q = q

    def __repr__(self) -> str:
        return f"ReactionNode(t={self.template}, n={self.n}, R={self.r:.3f}, Q={self.q:.3f})"


class Evaluator:
    """Frozen snapshot of the networks for one planning phase, with caches.

    ``values`` returns (V^syn, V^cost) for open molecules; absent networks
    contribute constants (1.0 synthesizability, 0.0 cost).
    """

    def __init__(self, policy: TwoBranchPolicy, world: WorldSpec, vsyn: Optional[Mlp] = None,
                 vcost: Optional[Mlp] = None):
        self.policy = policy
        self.world = world
        self.vsyn = vsyn
        self.vcost = vcost
        self._exp: dict[Molecule, list[Expansion]] = {}
        self._val: dict[Molecule, tuple[float, float]] = {}
        self.model_calls = 0

    def expansions(self, m: Molecule) -> list[Expansion]:
        self.model_calls += 1
        hit = self._exp.get(m)
        if hit is None:
            hit = self.policy.propose_many(self.world, [m])[0]
            self._exp[m] = hit
        return hit

    def values(self, molecules: Sequence[Molecule]) -> list[tuple[float, float]]:
        todo = [m for m in dict.fromkeys(molecules) if m not in self._val]
        if todo:
            x = fingerprint_batch(todo)
            syn = self.vsyn(x)[:, 0] if self.vsyn is not None else np.ones(len(todo))
            cost = self.vcost(x)[:, 0] if self.vcost is not None else np.zeros(len(todo))
            for m, s, c in zip(todo, syn, cost):
                self._val[m] = (float(s), float(c))
        return [self._val[m] for m in molecules]


class SearchTree:
    """The accumulated search tree of one episode."""

    def __init__(self, target: Molecule, world: WorldSpec, evaluator: Evaluator, cfg: MctsConfig,
                 rng: np.random.Generator, trace: bool = False):
        self.world = world
        self.evaluator = evaluator
        self.cfg = cfg
        self.rng = rng
        self.nodes: list[MoleculeNode] = []
        self.reactions: list[ReactionNode] = []
        self.trace: Optional[list] = [] if trace else None
        self.n_simulations = 0
        self.root = self._new_nodes([target], None, 0)[0]

    # ---- node creation ------------------------------------------------------

    def _terminal_values(self, status: str) -> tuple[float, float]:
        if status == BUILDING_BLOCK:
            return 1.0, 0.0
        return 0.0, (self.cfg.cost.c_dead if self.cfg.value_mode == "single" else 0.0)

    def _new_nodes(self, molecules: Sequence[Molecule], parent: Optional[ReactionNode],
                   depth: int) -> list[MoleculeNode]:
        statuses = [self.world.status(m) for m in molecules]
        open_mols = [m for m, s in zip(molecules, statuses) if s is None]
        vals = dict(zip(open_mols, self.evaluator.values(open_mols))) if open_mols else {}
        out = []
        for m, s in zip(molecules, statuses):
            node = MoleculeNode(len(self.nodes), m, parent, depth, s)
            if s is None:
                node.v_syn, node.v_cost = vals[m]
                if self.cfg.value_mode == "no-cost":
                    node.v_cost = 0.0
            else:
                node.v_syn, node.v_cost = self._terminal_values(s)
            node.net_syn, node.net_cost = node.v_syn, node.v_cost
            self.nodes.append(node)
            out.append(node)
        return out

    def _mark_dead(self, node: MoleculeNode) -> None:
        node.dead = True
        node.v_syn, node.v_cost = self._terminal_values(DEAD_END)

    # ---- the three simulation steps -----------------------------------------

    def utility(self, rn: ReactionNode) -> float:
        c_dead = self.cfg.cost.c_dead
        mode = self.cfg.value_mode
        if mode == "dual":
            return rn.r * rn.q + (1.0 - rn.r) * c_dead
        if mode == "no-cost":
            return (1.0 - rn.r) * c_dead
        return rn.q

    def puct_select(self, node: MoleculeNode) -> ReactionNode:
        if not node.children:
            raise SearchError(f"cannot select a reaction under unexpanded node {node.molecule!r}")
        sq = math.sqrt(sum(rn.n for rn in node.children))
        c = self.cfg.c_puct
        best, best_score = None, -math.inf
        for rn in node.children:  # ascending template index, so ties keep the lowest
            score = -self.utility(rn) + c * rn.prior * sq / (1 + rn.n)
            if score > best_score:
                best, best_score = rn, score
        return best

    def select_child_molecule(self, rn: ReactionNode) -> MoleculeNode:
        for c in rn.children:
            if c.is_open and not c.expanded:
                return c
        for c in rn.children:
            if not c.solved:
                return c
        return rn.children[int(self.rng.integers(len(rn.children)))]

    def expand(self, leaf: MoleculeNode) -> None:
        if not leaf.is_open or leaf.expanded:
            raise SearchError(f"cannot expand {leaf.molecule!r}: terminal or already expanded")
        if leaf.depth >= self.cfg.max_depth:
            raise SearchError(f"{leaf.molecule!r} is at the depth limit")
        exps = self.evaluator.expansions(leaf.molecule)[: self.cfg.top_k]
        leaf.proposals = tuple(e.template for e in exps)
        if self.cfg.eliminate_ancestor_templates:
            banned = leaf.ancestor_templates()
            exps = [e for e in exps if e.template not in banned]
        leaf.expanded = True
        if not exps:
            self._mark_dead(leaf)
            return
        c_rxn = self.cfg.cost.c_rxn
        for e in sorted(exps, key=lambda e: e.template):
            rn = ReactionNode(e.template, e.prior, leaf)
            rn.children = self._new_nodes(e.reactants, rn, leaf.depth + 1)
            rn.refresh(c_rxn)
            leaf.children.append(rn)
            self.reactions.append(rn)
        leaf.solved = any(all(c.solved for c in rn.children) for rn in leaf.children)

    def backup(self, path: Sequence) -> None:
        """Back up ``path = [s_0, a_0, s_1, ..., s_L]`` (molecule, reaction, ...)."""
        if len(path) % 2 != 1:
            raise SearchError("path must alternate molecule/reaction and end on a molecule")
        for k in range(0, len(path) - 1, 2):
            if not path[k].expanded:
                raise SearchError("path has an unexpanded interior node")
        c_rxn = self.cfg.cost.c_rxn
        leaf = path[-1]
        vt_syn, vt_cost = leaf.v_syn, leaf.v_cost
        path_values = []
        for k in range(len(path) - 3, -1, -2):
            s, a, child = path[k], path[k + 1], path[k + 2]
            for c in a.children:
                if c is not child:
                    vt_syn *= c.v_syn
                    vt_cost += c.v_cost
            vt_cost += c_rxn
            path_values.append((s, a, vt_syn, vt_cost))
        if self.trace is not None:
            self.trace.append([(s.uid, vs, vc) for s, _, vs, vc in path_values])
        for s, a, vs, vc in path_values:  # bottom-up
            s.v_syn = (s.v_syn * s.n + vs) / (s.n + 1)
            s.v_cost = (s.v_cost * s.n + vc) / (s.n + 1)
            s.n += 1
            a.n += 1
            a.refresh(c_rxn)
            s.solved = s.status == BUILDING_BLOCK or any(all(c.solved for c in rn.children) for rn in s.children)

    def simulate(self, root: MoleculeNode) -> None:
        node = root
        path: list = [node]
        while node.expanded and not node.dead:
            rn = self.puct_select(node)
            node = self.select_child_molecule(rn)
            path.append(rn)
            path.append(node)
        if node.is_open and not node.expanded:
            if node.depth >= self.cfg.max_depth:
                self._mark_dead(node)
                node.expanded = True
            else:
                self.expand(node)
        self.backup(path)
        self.n_simulations += 1

    # ---- views ------------------------------------------------------------------

    def sweep_consistency(self, tol: float = 0.0) -> list[str]:
        """Violations of the reaction-node and value-range invariants."""
        bad = []
        c_rxn = self.cfg.cost.c_rxn
        for rn in self.reactions:
            r = 1.0
            q = c_rxn
            for c in rn.children:
                r *= c.v_syn
                q += c.v_cost
            if abs(rn.r - r) > tol or abs(rn.q - q) > tol:
                bad.append(f"reaction {rn.template} under {rn.parent.molecule}: R/Q stale")
            if not 0.0 <= rn.r <= 1.0 or rn.q < 0:
                bad.append(f"reaction {rn.template}: R/Q out of range")
        for s in self.nodes:
            if not 0.0 <= s.v_syn <= 1.0 or s.v_cost < 0:
                bad.append(f"{s.molecule}: value out of range")
            if s.depth > self.cfg.max_depth:
                bad.append(f"{s.molecule}: deeper than max depth")
            if s.children and s.n != sum(rn.n for rn in s.children):
                bad.append(f"{s.molecule}: visit count {s.n} != sum of reaction visits")
        return bad


def search_probabilities(node: MoleculeNode) -> np.ndarray:
    counts = np.array([rn.n for rn in node.children], dtype=np.float64)
    total = counts.sum()
    if total == 0:
        return np.full(len(counts), 1.0 / len(counts))
    return counts / total


def choose_reaction(node: MoleculeNode, temperature: float, rng: np.random.Generator) -> ReactionNode:
    probs = search_probabilities(node)
    if temperature == 0:
        return node.children[int(np.argmax(probs))]
    if temperature != 1.0:
        probs = probs ** (1.0 / temperature)
        probs /= probs.sum()
    return node.children[int(rng.choice(len(probs), p=probs))]


@dataclass
class Episode:
    target: Molecule
    tree: SearchTree
    outcome: str  # success | dead-end | depth-limit | no-action
    route: RouteTree
    committed: dict = field(default_factory=dict)  # MoleculeNode.uid -> ReactionNode

    @property
    def success(self) -> bool:
        return self.outcome == "success"


def _committed_route(node: MoleculeNode, committed: dict) -> RouteTree:
    rn = committed.get(node.uid)
    if rn is None:
        if node.status == BUILDING_BLOCK:
            return RouteTree.leaf(node.molecule, BUILDING_BLOCK)
        if node.status == DEAD_END:
            return RouteTree.leaf(node.molecule, DEAD_END)
        return RouteTree.leaf(node.molecule, OPEN)
    return RouteTree.node(node.molecule, rn.template, [_committed_route(c, committed) for c in rn.children])


def _reset_subtree(tree: SearchTree, node: MoleculeNode) -> None:
    node.children = []
    node.expanded = False
    node.n = 0
    node.v_syn, node.v_cost = node.net_syn, node.net_cost
    node.solved = False


def run_episode(target: Molecule, evaluator: Evaluator, world: WorldSpec, cfg: MctsConfig,
                rng: np.random.Generator, trace: bool = False) -> Episode:
    if world.status(target) is not None:
        raise ValueError(f"target {target!r} is terminal")
    tree = SearchTree(target, world, evaluator, cfg, rng, trace)
    pending = deque([tree.root])
    committed: dict[int, ReactionNode] = {}
    outcome = "success"
    while pending:
        root = pending.popleft() if cfg.root_order == "fifo" else pending.pop()
        if root.depth >= cfg.max_depth:
            outcome = "depth-limit"
            break
        if not cfg.reuse_tree and root is not tree.root and root.expanded:
            _reset_subtree(tree, root)
        for _ in range(cfg.simulations):
            tree.simulate(root)
            if root.dead:
                break
        if root.dead:
            outcome = "no-action"
            break
        rn = choose_reaction(root, cfg.temperature, rng)
        committed[root.uid] = rn
        if any(c.status == DEAD_END for c in rn.children):
            outcome = "dead-end"
            break
        pending.extend(c for c in rn.children if c.status is None)
    return Episode(target, tree, outcome, _committed_route(tree.root, committed), committed)
