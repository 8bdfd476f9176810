"""Pipeline pieces shared by the command line and the end-to-end tests."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

from .core import CostModel, Molecule
from .mcts import Evaluator, MctsConfig
from .nnet import Mlp
from .planners import (PlannerBudget, ValueFn, EvalReport, dual_value_heuristic, evaluate, greedy_dfs,
                       retro_star, zero_value)
from .policy import PretrainReport, TwoBranchPolicy, pretrain_reference
from .synthworld import Solver, WorldSpec, sample_training_routes, sl_corpus
from .train import TrainConfig, TrainResult, pdvn_train


@dataclass
class Targets:
    train: list[Molecule]
    test: list[Molecule]
    corpus: list  # (molecule, template) pairs along the training routes


def make_targets(world: WorldSpec, n_train: int, n_test: int, route_depth: int, seed: int,
                 test_min_depth: int = 1) -> Targets:
    """Disjoint training and held-out targets, each with a route of depth <= ``route_depth``.

    Held-out targets can be restricted to molecules with no route shorter
    than ``test_min_depth`` reactions deep.
    """
    solver = Solver(world)
    routes = sample_training_routes(world, n_train, route_depth, seed, solver=solver)
    train = [m for _, m in routes]
    held = sample_training_routes(world, n_test, route_depth, seed + 7919, solver=solver, exclude=train,
                                  min_depth=test_min_depth)
    return Targets(train, [m for _, m in held], sl_corpus(routes))


def value_heuristic(mode: str, evaluator: Evaluator, cm: CostModel) -> ValueFn:
    """Leaf estimate matching each mode's search utility; zero when no value network exists."""
    if mode == "pdvn":
        return dual_value_heuristic(evaluator, cm)
    if mode == "no-cost":
        return lambda ms: [(1.0 - s) * cm.c_dead for s, _ in evaluator.values(ms)]
    if mode == "single-value":
        return lambda ms: [c for _, c in evaluator.values(ms)]
    return zero_value


@dataclass
class TrainedModel:
    mode: str
    policy: TwoBranchPolicy
    vsyn: Optional[Mlp] = None
    vcost: Optional[Mlp] = None

    @classmethod
    def from_result(cls, res: TrainResult) -> "TrainedModel":
        return cls(res.mode, res.policy, res.vsyn, res.vcost)

    @classmethod
    def from_bundle(cls, nets: dict[str, Mlp], mode: str, top_k: int = 50) -> "TrainedModel":
        learnable = nets.get("learnable") or nets["reference"].copy()
        policy = TwoBranchPolicy(nets["reference"], learnable, top_k)
        return cls(mode, policy, nets.get("vsyn"), nets.get("vsingle", nets.get("vcost")))

    @classmethod
    def supervised(cls, reference: Mlp, top_k: int = 50) -> "TrainedModel":
        return cls("sl", TwoBranchPolicy.from_reference(reference, top_k))

    def evaluator(self, world: WorldSpec) -> Evaluator:
        return Evaluator(self.policy, world, self.vsyn, self.vcost)


PLANNER_KINDS = ("retro0", "retro-value", "dfs")


def make_planner(kind: str, model: TrainedModel, world: WorldSpec, cm: CostModel, *, max_depth: int = 15,
                 prior_weight: float = 1.0, stop: str = "first"):
    """``retro0``: zero heuristic; ``retro-value``: the model's value heuristic; ``dfs``: greedy DFS."""
    ev = model.evaluator(world)
    if kind == "dfs":
        return lambda t, b: greedy_dfs(t, ev, world, b, max_depth)
    if kind == "retro0":
        vf = zero_value
    elif kind == "retro-value":
        vf = value_heuristic(model.mode, ev, cm)
    else:
        raise ValueError(f"unknown planner {kind!r}; choose from {PLANNER_KINDS}")
    return lambda t, b: retro_star(t, ev, world, b, cm, vf, prior_weight=prior_weight, max_depth=max_depth,
                                   stop=stop)


def pretrain(world: WorldSpec, targets: Targets, epochs: int, seed: int, top_k: int = 50) -> tuple[Mlp, PretrainReport]:
    return pretrain_reference(world, targets.corpus, epochs=epochs, seed=seed, top_k=top_k)


def train(world: WorldSpec, targets: Targets, reference: Mlp, cfg: TrainConfig, mcts: MctsConfig, seed: int,
          **kw) -> TrainResult:
    return pdvn_train(world, targets.train, reference, cfg, mcts, seed, **kw)


def compare(world: WorldSpec, test: Sequence[Molecule], models: dict[str, tuple[str, TrainedModel]],
            budget: PlannerBudget, cm: CostModel, **kw) -> EvalReport:
    """``models`` maps a report row name to (planner kind, model)."""
    planners = {name: make_planner(kind, model, world, cm, **kw) for name, (kind, model) in models.items()}
    return evaluate(test, planners, budget, cm)
