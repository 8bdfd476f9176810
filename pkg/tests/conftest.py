import numpy as np
import pytest

from retroplan.core import BUILDING_BLOCK, DEAD_END, CostModel
from retroplan.mcts import MctsConfig, MoleculeNode, ReactionNode, SearchTree
from retroplan.synthworld import RewriteRule, WorldSpec, generate_world


@pytest.fixture(scope="session")
def world50():
    return generate_world(50, 0)


@pytest.fixture(scope="session")
def tiny_world():
    # AB -> C + D, CC -> A, DDD -> Z-poisoned fragment
    rules = (RewriteRule("AB", ("C", "D")), RewriteRule("CC", ("A",)), RewriteRule("DDD", ("DZ",)))
    return WorldSpec("ABCD", rules, bb_max_len=3, poison_char="Z", seed=0)


class _FakeTree:
    """Just enough of SearchTree for the extraction functions: a ``nodes`` list."""

    def __init__(self):
        self.nodes = []
        self.reactions = []

    def mol(self, parent, status=None, name=None):
        depth = 0 if parent is None else parent.parent.depth + 1
        node = MoleculeNode(len(self.nodes), name or f"M{len(self.nodes)}", parent, depth, status)
        if status == BUILDING_BLOCK:
            node.v_syn, node.v_cost = 1.0, 0.0
        self.nodes.append(node)
        return node

    def rxn(self, parent, template, prior=0.5):
        rn = ReactionNode(template, prior, parent)
        parent.children.append(rn)
        parent.expanded = True
        self.reactions.append(rn)
        return rn


def random_and_or_tree(rng: np.random.Generator, max_nodes: int = 200):
    """Random expanded AND-OR tree with building-block, dead-end and open leaves."""
    t = _FakeTree()
    root = t.mol(None)
    frontier = [root]
    while frontier and len(t.nodes) < max_nodes:
        node = frontier.pop(int(rng.integers(len(frontier))))
        n_rxn = int(rng.integers(1, 4))
        templates = rng.choice(20, size=n_rxn, replace=False)
        node.proposals = tuple(int(x) for x in sorted(templates))
        for tmpl in sorted(templates):
            rn = t.rxn(node, int(tmpl), float(rng.random()))
            for _ in range(int(rng.integers(1, 4))):
                if len(t.nodes) >= max_nodes:
                    break
                u = rng.random()
                if u < 0.35:
                    child = t.mol(rn, BUILDING_BLOCK)
                elif u < 0.5:
                    child = t.mol(rn, DEAD_END)
                else:
                    child = t.mol(rn)
                    child.v_syn = float(rng.random())
                    if child.depth < 6:
                        frontier.append(child)
                rn.children.append(child)
            if not rn.children:
                rn.children.append(t.mol(rn, BUILDING_BLOCK))
    return t


@pytest.fixture
def cost_model():
    return CostModel()


def make_tree(target, world, evaluator, seed=0, **cfg):
    return SearchTree(target, world, evaluator, MctsConfig(**cfg), np.random.default_rng(seed))


@pytest.fixture(scope="session")
def small_reference(world50):
    """A quickly pretrained reference network and its corpus on world50."""
    from retroplan.policy import pretrain_reference
    from retroplan.synthworld import sample_training_routes, sl_corpus
    routes = sample_training_routes(world50, 300, 5, seed=1)
    corpus = sl_corpus(routes)
    net, report = pretrain_reference(world50, corpus, epochs=6, seed=0, hidden=64)
    return net, corpus, [m for _, m in routes]
