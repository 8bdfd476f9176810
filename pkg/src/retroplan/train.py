"""Training targets from search trees and the alternating plan/update loop."""

from __future__ import annotations

import csv
import logging
import math
import multiprocessing as mp
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .core import BUILDING_BLOCK, DEAD_END, CostModel, Molecule
from .mcts import Episode, Evaluator, MctsConfig, MoleculeNode, run_episode
from .nnet import AdamState, Mlp, adam_step, save_bundle
from .planners import retro_star
from .policy import HIDDEN, TwoBranchPolicy
from .synthworld import FP_BITS, WorldSpec, fingerprint_batch

log = logging.getLogger(__name__)

MODES = ("pdvn", "single-value", "no-cost", "self-imitation")
LOG_COLUMNS = ("epoch", "batch", "solve_rate", "policy_loss", "syn_loss", "cost_loss", "wall_ms")
_TIE = 1e-9


@dataclass(frozen=True)
class TrainConfig:
    target_batch: int = 1024
    minibatch: int = 128
    lr: float = 1e-3
    epochs: int = 3
    alpha: float = 0.8  # shrinkage of the bootstrapped V^syn target on unsolved nodes
    mode: str = "pdvn"
    passes: int = 1  # gradient passes over the pooled examples of one planning batch
    dedup: str = "keep-all"  # or "keep-latest"
    imitation_budget: int = 100  # planner calls per target in self-imitation mode
    hidden: int = HIDDEN
    dropout: float = 0.1

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if min(self.target_batch, self.minibatch, self.epochs, self.passes, self.imitation_budget) <= 0:
            raise ValueError("sizes must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.dedup not in ("keep-all", "keep-latest"):
            raise ValueError("dedup must be keep-all or keep-latest")

    @property
    def value_mode(self) -> str:
        return {"pdvn": "dual", "single-value": "single", "no-cost": "no-cost"}.get(self.mode, "dual")


@dataclass(frozen=True)
class TrainingExample:
    """``kind`` is policy (target = template, support = allowed templates), syn or cost."""

    kind: str
    molecule: Molecule
    target: float
    support: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.kind == "policy":
            if int(self.target) not in self.support:
                raise ValueError("policy target outside its support")
        elif self.kind == "syn":
            if not 0.0 <= self.target <= 1.0:
                raise ValueError("syn target must lie in [0, 1]")
        elif self.kind == "cost":
            if not self.target >= 0.0:
                raise ValueError("cost target must be non-negative")
        else:
            raise ValueError(f"unknown example kind {self.kind!r}")


# ---- target extraction -----------------------------------------------------------
#
# Trees come from SearchTree.nodes: children always have larger uids than
# their parents, so one reverse sweep is a bottom-up pass.


def _bottom_up(nodes: Sequence[MoleculeNode]) -> list[MoleculeNode]:
    return sorted(nodes, key=lambda s: s.uid, reverse=True)


def label_solved(nodes: Sequence[MoleculeNode]) -> dict[int, bool]:
    """uid -> solved, where solved means building block or some reaction with all reactants solved."""
    solved: dict[int, bool] = {}
    for s in _bottom_up(nodes):
        solved[s.uid] = s.status == BUILDING_BLOCK or any(
            all(solved[c.uid] for c in rn.children) for rn in s.children)
    return solved


def min_cost(nodes: Sequence[MoleculeNode], solved: dict[int, bool], c_rxn: float) -> dict[int, float]:
    """uid -> cheapest successful route cost, for solved nodes only."""
    cost: dict[int, float] = {}
    for s in _bottom_up(nodes):
        if not solved[s.uid]:
            continue
        if s.status == BUILDING_BLOCK:
            cost[s.uid] = 0.0
            continue
        cost[s.uid] = min(c_rxn + sum(cost[c.uid] for c in rn.children)
                          for rn in s.children if all(solved[c.uid] for c in rn.children))
    return cost


def node_min_cost(costs: dict[int, float], node: MoleculeNode) -> float:
    try:
        return costs[node.uid]
    except KeyError:
        raise ValueError(f"{node.molecule!r} is not solved; it has no route cost") from None


def best_reaction(node: MoleculeNode, solved: dict[int, bool], costs: dict[int, float], c_rxn: float):
    """The solved reaction of least route cost; ties go to the lowest template index."""
    best, best_cost = None, math.inf
    for rn in sorted(node.children, key=lambda r: r.template):
        if not all(solved[c.uid] for c in rn.children):
            continue
        cost = c_rxn + sum(costs[c.uid] for c in rn.children)
        if cost < best_cost - _TIE:
            best, best_cost = rn, cost
    return best


def extract_policy_targets(nodes: Sequence[MoleculeNode], solved: dict[int, bool], costs: dict[int, float],
                           c_rxn: float) -> list[TrainingExample]:
    out = []
    for s in nodes:
        if s.status is not None or not s.children or not solved[s.uid]:
            continue
        rn = best_reaction(s, solved, costs, c_rxn)
        out.append(TrainingExample("policy", s.molecule, rn.template, tuple(s.proposals)))
    return out


def extract_syn_targets(nodes: Sequence[MoleculeNode], solved: dict[int, bool], alpha: float) -> list[TrainingExample]:
    out = []
    for s in nodes:
        if solved[s.uid]:
            t = 1.0
        elif s.status == DEAD_END:
            t = 0.0
        else:
            t = alpha * s.v_syn  # search-averaged, or the network value if never visited
        out.append(TrainingExample("syn", s.molecule, t))
    return out


def extract_cost_targets(nodes: Sequence[MoleculeNode], solved: dict[int, bool],
                         costs: dict[int, float]) -> list[TrainingExample]:
    return [TrainingExample("cost", s.molecule, costs[s.uid]) for s in nodes if solved[s.uid]]


def extract_single_targets(nodes: Sequence[MoleculeNode], solved: dict[int, bool], costs: dict[int, float],
                           alpha: float, c_dead: float) -> list[TrainingExample]:
    """Targets for one value network predicting the total route cost, dead-end penalties included.

    Solved nodes get their cheapest route cost and dead ends ``c_dead``;
    other nodes mix their search-averaged estimate toward ``c_dead`` with
    the same weight ``alpha`` used for the synthesizability target.
    """
    out = []
    for s in nodes:
        if solved[s.uid]:
            t = costs[s.uid]
        elif s.status == DEAD_END:
            t = c_dead
        else:
            t = alpha * s.v_cost + (1.0 - alpha) * c_dead
        out.append(TrainingExample("cost", s.molecule, t))
    return out


def extract_examples(episode: Episode, cfg: TrainConfig, cm: CostModel) -> list[TrainingExample]:
    nodes = episode.tree.nodes
    solved = label_solved(nodes)
    costs = min_cost(nodes, solved, cm.c_rxn)
    out = extract_policy_targets(nodes, solved, costs, cm.c_rxn)
    if cfg.mode == "single-value":
        out += extract_single_targets(nodes, solved, costs, cfg.alpha, cm.c_dead)
        return out
    out += extract_syn_targets(nodes, solved, cfg.alpha)
    if cfg.mode == "pdvn":
        out += extract_cost_targets(nodes, solved, costs)
    return out


def route_examples(route, policy: TwoBranchPolicy, world: WorldSpec) -> list[TrainingExample]:
    """Policy examples from every reaction of a successful route."""
    out = []
    for m, t in route.reactions():
        sup = tuple(int(x) for x in policy.support(world, m))
        if t in sup:
            out.append(TrainingExample("policy", m, t, sup))
    return out


def deduplicate(examples: Sequence[TrainingExample]) -> list[TrainingExample]:
    """Keep only the last example of each (kind, molecule)."""
    last = {}
    for i, e in enumerate(examples):
        last[(e.kind, e.molecule)] = i
    return [examples[i] for i in sorted(last.values())]


# ---- updating phase ---------------------------------------------------------------


@dataclass
class LossReport:
    policy: float = float("nan")
    syn: float = float("nan")
    cost: float = float("nan")
    counts: dict = field(default_factory=dict)


@dataclass
class Learner:
    """Trainable networks and their optimizer state.  ``vcost`` holds V^single in single-value mode."""

    policy: TwoBranchPolicy
    vsyn: Optional[Mlp]
    vcost: Optional[Mlp]
    states: dict = field(default_factory=dict)
    lr: float = 1e-3

    def state(self, name: str, net: Mlp) -> AdamState:
        if name not in self.states:
            self.states[name] = AdamState.for_net(net, self.lr)
        return self.states[name]


def _fit(net: Mlp, state: AdamState, molecules: list, targets: np.ndarray, loss: str, minibatch: int,
         rng: np.random.Generator, masks: Optional[np.ndarray] = None) -> float:
    perm = rng.permutation(len(molecules))
    total = 0.0
    for start in range(0, len(perm), minibatch):
        idx = perm[start:start + minibatch]
        x = fingerprint_batch([molecules[i] for i in idx])
        value, grads = net.backward(x, targets[idx], loss, None if masks is None else masks[idx])
        adam_step(net, state, grads)
        total += value * len(idx)
    return total / len(perm)


def update_networks(examples: Sequence[TrainingExample], learner: Learner, cfg: TrainConfig,
                    rng: np.random.Generator) -> LossReport:
    """Shuffled mini-batch Adam passes: masked CE on the learnable policy, BCE on V^syn, MSE on V^cost."""
    if not examples:
        raise ValueError("no training examples")
    if cfg.dedup == "keep-latest":
        examples = deduplicate(examples)
    by_kind: dict[str, list[TrainingExample]] = {"policy": [], "syn": [], "cost": []}
    for e in examples:
        by_kind[e.kind].append(e)
    report = LossReport(counts={k: len(v) for k, v in by_kind.items()})
    for _ in range(cfg.passes):
        pol = by_kind["policy"]
        if pol:
            net = learner.policy.learnable
            masks = np.zeros((len(pol), net.out_dim), dtype=bool)
            for i, e in enumerate(pol):
                masks[i, list(e.support)] = True
            report.policy = _fit(net, learner.state("learnable", net), [e.molecule for e in pol],
                                 np.array([int(e.target) for e in pol], dtype=np.int64), "masked-ce",
                                 cfg.minibatch, rng, masks)
        for kind, net, loss in (("syn", learner.vsyn, "bce"), ("cost", learner.vcost, "mse")):
            ex = by_kind[kind]
            if not ex:
                continue
            if net is None:
                raise ValueError(f"{kind} examples given but no {kind} network")
            value = _fit(net, learner.state(kind, net), [e.molecule for e in ex],
                         np.array([e.target for e in ex]), loss, cfg.minibatch, rng)
            setattr(report, kind, value)
    return report


# ---- outer loop ----------------------------------------------------------------------


@dataclass
class BatchLog:
    epoch: int
    batch: int
    solve_rate: float
    policy_loss: float
    syn_loss: float
    cost_loss: float
    wall_ms: float


@dataclass
class TrainResult:
    policy: TwoBranchPolicy
    vsyn: Optional[Mlp]
    vcost: Optional[Mlp]
    mode: str
    log: list[BatchLog]

    def bundle(self) -> dict[str, Mlp]:
        nets = {"reference": self.policy.reference, "learnable": self.policy.learnable}
        if self.mode == "single-value":
            nets["vsingle"] = self.vcost
        else:
            if self.vsyn is not None:
                nets["vsyn"] = self.vsyn
            if self.vcost is not None and self.mode == "pdvn":
                nets["vcost"] = self.vcost
        return nets


def new_value_net(kind: str, seed: int, hidden: int = HIDDEN, dropout: float = 0.1) -> Mlp:
    head = "sigmoid" if kind == "syn" else "softplus"
    return Mlp(FP_BITS, hidden, 1, head, dropout=dropout, seed=seed)


def episode_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-target stream, independent of batching and worker assignment."""
    return np.random.default_rng([seed, epoch, index])


# worker globals, set before forking
_WORK: dict = {}


def _plan_one(job: tuple[int, int, Molecule]) -> tuple[bool, list[TrainingExample]]:
    epoch, index, target = job
    w = _WORK
    ep = run_episode(target, w["evaluator"], w["world"], w["mcts"], episode_rng(w["seed"], epoch, index))
    return ep.success, extract_examples(ep, w["cfg"], w["mcts"].cost)


def _imitate_one(job: tuple[int, int, Molecule]) -> tuple[bool, list[TrainingExample]]:
    _, _, target = job
    w = _WORK
    res = retro_star(target, w["evaluator"], w["world"], w["cfg"].imitation_budget, w["mcts"].cost,
                     max_depth=w["mcts"].max_depth)
    if not res.success:
        return False, []
    return True, route_examples(res.route, w["evaluator"].policy, w["world"])


def _run_jobs(fn: Callable, jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) < 2:
        return [fn(j) for j in jobs]
    ctx = mp.get_context("fork")
    with ctx.Pool(workers) as pool:
        return pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers)))


def pdvn_train(world: WorldSpec, targets: Sequence[Molecule], reference: Optional[Mlp], cfg: TrainConfig,
               mcts_cfg: MctsConfig, seed: int, *, workers: int = 1, log_path=None, checkpoint_dir=None,
               record_time: bool = True, header: str = "",
               on_batch: Optional[Callable[[BatchLog], None]] = None) -> TrainResult:
    """Alternate planning over target batches with network updates.

    The reference branch is never modified.  ``record_time=False`` writes
    0 into ``wall_ms`` so that logs are comparable byte for byte.
    """
    if reference is None:
        raise ValueError("a pretrained reference network is required")
    if not targets:
        raise ValueError("no training targets")
    if mcts_cfg.value_mode != cfg.value_mode and cfg.mode != "self-imitation":
        mcts_cfg = replace(mcts_cfg, value_mode=cfg.value_mode)
    policy = TwoBranchPolicy.from_reference(reference, mcts_cfg.top_k)
    vsyn = vcost = None
    if cfg.mode in ("pdvn", "no-cost"):
        vsyn = new_value_net("syn", seed + 1, cfg.hidden, cfg.dropout)
    if cfg.mode in ("pdvn", "single-value"):
        vcost = new_value_net("cost", seed + 2, cfg.hidden, cfg.dropout)
    learner = Learner(policy, vsyn, vcost, lr=cfg.lr)
    rng = np.random.default_rng([seed, 0xBA7C4])
    rows: list[BatchLog] = []
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        fh.write(header)
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
    worker_fn = _imitate_one if cfg.mode == "self-imitation" else _plan_one
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(targets))
            for b, start in enumerate(range(0, len(order), cfg.target_batch)):
                t0 = time.perf_counter()
                idx = order[start:start + cfg.target_batch]
                evaluator = Evaluator(policy, world, vsyn, vcost)
                _WORK.update(evaluator=evaluator, world=world, mcts=mcts_cfg, cfg=cfg, seed=seed)
                jobs = [(epoch, int(i), targets[int(i)]) for i in idx]
                results = _run_jobs(worker_fn, jobs, workers)
                _WORK.clear()
                solve_rate = sum(ok for ok, _ in results) / len(results)
                examples = [e for _, ex in results for e in ex]
                report = update_networks(examples, learner, cfg, rng) if examples else LossReport()
                wall = (time.perf_counter() - t0) * 1000.0 if record_time else 0.0
                row = BatchLog(epoch + 1, b + 1, solve_rate, report.policy, report.syn, report.cost, wall)
                rows.append(row)
                log.info("epoch %d batch %d solve %.3f losses %.4f/%.4f/%.4f (%d examples)", row.epoch,
                         row.batch, solve_rate, report.policy, report.syn, report.cost, len(examples))
                if writer is not None:
                    writer.writerow(format_row(row))
                    fh.flush()
                if on_batch is not None:
                    on_batch(row)
            if checkpoint_dir is not None:
                result = TrainResult(policy, vsyn, vcost, cfg.mode, rows)
                save_bundle(result.bundle(), Path(checkpoint_dir) / f"epoch-{epoch + 1}",
                            {"mode": cfg.mode, "seed": seed, "epoch": epoch + 1})
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(policy, vsyn, vcost, cfg.mode, rows)


def format_row(row: BatchLog) -> list[str]:
    def f(x: float) -> str:
        return "nan" if x != x else f"{x:.6f}"

    return [str(row.epoch), str(row.batch), f(row.solve_rate), f(row.policy_loss), f(row.syn_loss),
            f(row.cost_loss), f"{row.wall_ms:.0f}"]

