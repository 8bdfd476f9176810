"""Two-branch single-step policy and supervised pretraining of its reference.

The frozen reference network picks the realistic candidate set (top-k,
then the applicability check); the learnable copy only redistributes
probability inside that set.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import Expansion, Molecule, TemplateId
from .nnet import AdamState, Mlp, adam_step
from .synthworld import FP_BITS, WorldSpec, fingerprint_batch

log = logging.getLogger(__name__)

HIDDEN = 512


class NoRealisticActions(Exception):
    """None of the reference model's top-k templates applies to the molecule."""


def top_k_templates(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest logits; ties go to the lower template index."""
    order = np.argsort(-logits, kind="stable")
    return order[:k]


@dataclass
class TwoBranchPolicy:
    reference: Mlp
    learnable: Mlp
    k: int = 50
    # molecule -> valid reference support; the reference never changes, so this never goes stale
    _support: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def from_reference(cls, reference: Mlp, k: int = 50) -> "TwoBranchPolicy":
        return cls(reference, reference.copy(), k)

    def support(self, world: WorldSpec, m: Molecule) -> np.ndarray:
        """Reference top-k templates that apply to ``m``, in top-k order."""
        hit = self._support.get(m)
        if hit is None:
            self.support_many(world, [m])
            hit = self._support[m]
        return hit

    def support_many(self, world: WorldSpec, molecules: Sequence[Molecule]) -> list[np.ndarray]:
        todo = [m for m in dict.fromkeys(molecules) if m not in self._support]
        if todo:
            logits = self.reference(fingerprint_batch(todo))
            for m, row in zip(todo, logits):
                applicable = set(world.applicable_templates(m))
                top = top_k_templates(row, self.k)
                self._support[m] = np.array([t for t in top if t in applicable], dtype=np.int64)
        return [self._support[m] for m in molecules]

    def priors_many(self, world: WorldSpec, molecules: Sequence[Molecule]) -> list[tuple[np.ndarray, np.ndarray]]:
        """(templates, priors) per molecule, priors descending, ties by template index."""
        supports = self.support_many(world, molecules)
        out: list[tuple[np.ndarray, np.ndarray]] = [(s, np.zeros(0)) for s in supports]
        rows = [i for i, s in enumerate(supports) if len(s)]
        if not rows:
            return out
        logits = self.learnable(fingerprint_batch([molecules[i] for i in rows]))
        for i, row in zip(rows, logits):
            sup = np.sort(supports[i])
            z = row[sup]
            z = z - z.max()
            p = np.exp(z)
            p /= p.sum()
            order = np.lexsort((sup, -p))
            out[i] = (sup[order], p[order])
        return out

    def propose_many(self, world: WorldSpec, molecules: Sequence[Molecule]) -> list[list[Expansion]]:
        out = []
        for m, (templates, priors) in zip(molecules, self.priors_many(world, molecules)):
            out.append([Expansion(int(t), world.apply_template(m, int(t)).reactants, float(min(p, 1.0)))
                        for t, p in zip(templates, priors)])
        return out

    def propose(self, world: WorldSpec, m: Molecule) -> list[Expansion]:
        if world.status(m) is not None:
            raise ValueError(f"{m!r} is terminal")
        exps = self.propose_many(world, [m])[0]
        if not exps:
            raise NoRealisticActions(m)
        return exps

    def support_mask(self, world: WorldSpec, molecules: Sequence[Molecule]) -> np.ndarray:
        mask = np.zeros((len(molecules), self.reference.out_dim), dtype=bool)
        for i, sup in enumerate(self.support_many(world, molecules)):
            mask[i, sup] = True
        return mask


def new_reference(vocab_size: int, seed: int, hidden: int = HIDDEN, dropout: float = 0.1) -> Mlp:
    return Mlp(FP_BITS, hidden, vocab_size, "logits", dropout=dropout, seed=seed)


@dataclass
class PretrainReport:
    epoch_losses: list[float]
    top1: float
    top50: float
    n_train: int
    n_heldout: int


def _topk_accuracy(net: Mlp, molecules, templates, k: int) -> float:
    if not molecules:
        return float("nan")
    hits = 0
    for start in range(0, len(molecules), 1024):
        logits = net(fingerprint_batch(molecules[start:start + 1024]))
        for row, t in zip(logits, templates[start:start + 1024]):
            hits += int(t in top_k_templates(row, k))
    return hits / len(molecules)


def pretrain_reference(world: WorldSpec, corpus: Sequence[tuple[Molecule, TemplateId]], epochs: int = 8,
                       seed: int = 0, heldout_fraction: float = 0.1, batch_size: int = 128,
                       lr: float = 1e-3, hidden: int = HIDDEN, top_k: int = 50,
                       net: Mlp | None = None) -> tuple[Mlp, PretrainReport]:
    """Cross-entropy training of the template classifier on (molecule, template) pairs."""
    if not corpus:
        raise ValueError("empty SL corpus")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(corpus))
    n_held = int(len(corpus) * heldout_fraction)
    held = [corpus[i] for i in order[:n_held]]
    train = [corpus[i] for i in order[n_held:]]
    net = net or new_reference(world.vocab_size, seed, hidden)
    state = AdamState.for_net(net, lr)
    mols = [m for m, _ in train]
    tmpl = np.array([t for _, t in train], dtype=np.int64)
    losses = []
    for epoch in range(epochs):
        perm = rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(perm), batch_size):
            idx = perm[start:start + batch_size]
            x = fingerprint_batch([mols[i] for i in idx])
            value, grads = net.backward(x, tmpl[idx], "ce")
            adam_step(net, state, grads)
            total += value * len(idx)
        losses.append(total / len(perm))
        log.info("SL epoch %d loss %.4f", epoch + 1, losses[-1])
    eval_set = held or train
    top1 = _topk_accuracy(net, [m for m, _ in eval_set], [t for _, t in eval_set], 1)
    topk = _topk_accuracy(net, [m for m, _ in eval_set], [t for _, t in eval_set], top_k)
    return net, PretrainReport(losses, top1, topk, len(train), len(held))

