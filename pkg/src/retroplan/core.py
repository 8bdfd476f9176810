"""Shared domain types, the per-reaction cost model and route-level evaluation.

Molecules are plain strings: the canonical id *is* the molecule, so two
molecules are equal iff their ids are byte-equal.  Template ids are plain
ints in ``[0, vocab_size)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

Molecule = str
TemplateId = int

BUILDING_BLOCK = "BB"
DEAD_END = "DEAD"
OPEN = "OPEN"
LEAF_STATUSES = (BUILDING_BLOCK, DEAD_END, OPEN)


class UnresolvedRouteError(ValueError):
    """Raised when a route with open leaves is scored."""


class RouteFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Expansion:
    """One applicable reaction for a product: template, reactant set, prior."""

    template: TemplateId
    reactants: tuple[Molecule, ...]
    prior: float = 1.0

    def __post_init__(self) -> None:
        if not self.reactants:
            raise ValueError("expansion needs at least one reactant")
        canon = tuple(sorted(set(self.reactants)))
        if canon != tuple(self.reactants):
            object.__setattr__(self, "reactants", canon)
        if not 0.0 <= self.prior <= 1.0:
            raise ValueError(f"prior {self.prior} outside [0, 1]")


@dataclass(frozen=True)
class CostModel:
    """Cost of one reaction plus a penalty per dead-end reactant.

    ``c_rxn`` is a constant here; a per-template cost function would slot in
    where :meth:`reaction_cost` is called.
    """

    c_rxn: float = 0.1
    c_dead: float = 5.0

    def __post_init__(self) -> None:
        if self.c_rxn < 0 or self.c_dead < 0:
            raise ValueError("costs must be non-negative")
        if not self.c_dead > self.c_rxn:
            raise ValueError("c_dead must exceed c_rxn")

    def reaction_cost(self, n_dead_children: int = 0) -> float:
        return self.c_rxn + self.c_dead * n_dead_children


@dataclass(frozen=True)
class RouteTree:
    """A (possibly partial) synthesis route rooted at ``molecule``.

    Internal nodes carry a ``template`` and one child per reactant; leaves
    carry a ``status`` from :data:`LEAF_STATUSES`.
    """

    molecule: Molecule
    template: Optional[TemplateId] = None
    children: tuple["RouteTree", ...] = ()
    status: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.molecule:
            raise ValueError("molecule id must be non-empty")
        if self.template is None:
            if self.children:
                raise ValueError("a leaf cannot have children")
            if self.status not in LEAF_STATUSES:
                raise ValueError(f"leaf status must be one of {LEAF_STATUSES}, got {self.status!r}")
        else:
            if not self.children:
                raise ValueError("an internal node needs reactant children")
            if self.status is not None:
                raise ValueError("internal nodes carry no leaf status")

    @classmethod
    def leaf(cls, molecule: Molecule, status: str) -> "RouteTree":
        return cls(molecule, status=status)

    @classmethod
    def node(cls, molecule: Molecule, template: TemplateId, children: Sequence["RouteTree"]) -> "RouteTree":
        return cls(molecule, template=template, children=tuple(children))

    @property
    def is_leaf(self) -> bool:
        return self.template is None

    def nodes(self) -> Iterator["RouteTree"]:
        """Preorder traversal."""
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    def leaves(self) -> Iterator["RouteTree"]:
        return (n for n in self.nodes() if n.is_leaf)

    def depth(self) -> int:
        if self.is_leaf:
            return 0
        return 1 + max(c.depth() for c in self.children)

    def is_resolved(self) -> bool:
        return all(leaf.status != OPEN for leaf in self.leaves())

    def is_acyclic(self) -> bool:
        def walk(node: RouteTree, seen: frozenset) -> bool:
            if node.molecule in seen:
                return False
            seen = seen | {node.molecule}
            return all(walk(c, seen) for c in node.children)

        return walk(self, frozenset())

    def reactions(self) -> Iterator[tuple[Molecule, TemplateId]]:
        for n in self.nodes():
            if not n.is_leaf:
                yield n.molecule, n.template


def _require_resolved(route: RouteTree) -> None:
    if not route.is_resolved():
        raise UnresolvedRouteError(f"unresolved route rooted at {route.molecule!r}")


def route_cost(route: RouteTree, cm: CostModel) -> float:
    """Sum over reactions of ``c_rxn + c_dead * (#dead-end reactants)``."""
    _require_resolved(route)
    total = 0.0
    for node in route.nodes():
        if node.is_leaf:
            continue
        n_dead = sum(1 for c in node.children if c.is_leaf and c.status == DEAD_END)
        total += cm.reaction_cost(n_dead)
    return total


def route_length(route: RouteTree) -> int:
    _require_resolved(route)
    return sum(1 for n in route.nodes() if not n.is_leaf)


def route_is_synthesizable(route: RouteTree) -> bool:
    _require_resolved(route)
    return all(leaf.status == BUILDING_BLOCK for leaf in route.leaves())


# -- text serialization -------------------------------------------------------


def dump_route(route: RouteTree) -> str:
    """One node per line: ``depth<TAB>molecule<TAB>template|BB|DEAD|OPEN``, preorder."""
    lines = []

    def walk(node: RouteTree, depth: int) -> None:
        tag = str(node.template) if not node.is_leaf else node.status
        lines.append(f"{depth}\t{node.molecule}\t{tag}")
        for c in node.children:
            walk(c, depth + 1)

    walk(route, 0)
    return "\n".join(lines) + "\n"


def load_route(text: str) -> RouteTree:
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise RouteFormatError(f"line {lineno}: expected 3 tab-separated fields")
        try:
            depth = int(parts[0])
        except ValueError as exc:
            raise RouteFormatError(f"line {lineno}: bad depth {parts[0]!r}") from exc
        rows.append((depth, parts[1], parts[2]))
    if not rows or rows[0][0] != 0:
        raise RouteFormatError("route must start with a depth-0 root")

    pos = 0

    def build(depth: int) -> RouteTree:
        nonlocal pos
        d, mol, tag = rows[pos]
        if d != depth:
            raise RouteFormatError(f"unexpected depth {d} (wanted {depth})")
        pos += 1
        if tag in LEAF_STATUSES:
            return RouteTree.leaf(mol, tag)
        children = []
        while pos < len(rows) and rows[pos][0] == depth + 1:
            children.append(build(depth + 1))
        return RouteTree.node(mol, int(tag), children)

    route = build(0)
    if pos != len(rows):
        raise RouteFormatError("trailing lines after the root's subtree")
    return route


@dataclass
class RouteStats:
    """Convenience bundle used by reports."""

    length: int
    cost: float
    synthesizable: bool


def route_stats(route: RouteTree, cm: CostModel) -> RouteStats:
    return RouteStats(route_length(route), route_cost(route, cm), route_is_synthesizable(route))
