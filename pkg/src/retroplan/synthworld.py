"""Seeded string-rewrite world standing in for single-step chemistry.

A molecule is a string over ``alphabet`` (plus the poison character).  A
rule rewrites the leftmost occurrence of its ``pattern`` into each of its
fragments, one reactant per fragment.  Every fragment is strictly shorter
than the pattern, so string length is the "reducible mass": it drops by at
least one per reaction and every route is finite.

* building block: ``len(id) <= bb_max_len``
* dead end: not a building block and no rule applies.  Molecules carrying
  the poison character never admit a reaction.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import sparse

from .core import BUILDING_BLOCK, DEAD_END, Expansion, Molecule, RouteTree, TemplateId

FP_BITS = 2048
NGRAM_SIZES = (1, 2, 3, 4)
DEFAULT_ALPHABET = "ABCDEFGH"
DEFAULT_POISON = "Z"
WORLD_FORMAT = "worldspec-v1"
PATTERN_LENGTH_P = (0.5, 0.3, 0.2)
FRAGMENT_COUNT_P = (0.5, 0.35, 0.15)


class MalformedMoleculeError(ValueError):
    pass


class TemplateMismatchError(ValueError):
    """Template does not match the product (analog of a failed isomorphism)."""


class WorldGenerationError(RuntimeError):
    pass


class WorldFormatError(ValueError):
    pass


@dataclass(frozen=True)
class RewriteRule:
    pattern: str
    replacements: tuple[str, ...]

    def __post_init__(self) -> None:
        if not 2 <= len(self.pattern) <= 4:
            raise ValueError(f"pattern length must be 2-4: {self.pattern!r}")
        if not 1 <= len(self.replacements) <= 3:
            raise ValueError("a rule has 1-3 replacement fragments")
        for frag in self.replacements:
            if len(frag) >= len(self.pattern):
                raise ValueError(f"fragment {frag!r} not shorter than pattern {self.pattern!r}")


@dataclass(frozen=True)
class WorldSpec:
    alphabet: str
    rules: tuple[RewriteRule, ...]
    bb_max_len: int = 3
    poison_char: str = DEFAULT_POISON
    seed: int = 0

    def __post_init__(self) -> None:
        if self.poison_char in self.alphabet or len(self.poison_char) != 1:
            raise ValueError("poison_char must be a single character outside the alphabet")
        if len(set(self.alphabet)) != len(self.alphabet):
            raise ValueError("alphabet has repeated symbols")
        for r in self.rules:
            if self.poison_char in r.pattern:
                raise ValueError("no pattern may contain the poison character")
        object.__setattr__(self, "_charset", frozenset(self.alphabet + self.poison_char))

    @property
    def vocab_size(self) -> int:
        return len(self.rules)

    # ---- environment queries ------------------------------------------------

    def check(self, m: Molecule) -> None:
        if not m or not set(m) <= self._charset:
            raise MalformedMoleculeError(f"malformed molecule {m!r}")

    def is_building_block(self, m: Molecule) -> bool:
        self.check(m)
        return len(m) <= self.bb_max_len

    def applicable_templates(self, m: Molecule) -> list[TemplateId]:
        self.check(m)
        if len(m) <= self.bb_max_len or self.poison_char in m:
            return []
        return [i for i, r in enumerate(self.rules) if r.pattern in m]

    def is_dead_end(self, m: Molecule) -> bool:
        return not self.is_building_block(m) and not self.applicable_templates(m)

    def apply_template(self, m: Molecule, t: TemplateId) -> Expansion:
        self.check(m)
        if not 0 <= t < len(self.rules):
            raise TemplateMismatchError(f"template {t} out of range")
        rule = self.rules[t]
        pos = m.find(rule.pattern)
        if pos < 0 or len(m) <= self.bb_max_len or self.poison_char in m:
            raise TemplateMismatchError(f"template {t} ({rule.pattern}) does not apply to {m!r}")
        head, tail = m[:pos], m[pos + len(rule.pattern):]
        return Expansion(t, tuple(sorted({head + f + tail for f in rule.replacements})))

    def status(self, m: Molecule) -> Optional[str]:
        """BUILDING_BLOCK, DEAD_END or None for an expandable molecule."""
        if self.is_building_block(m):
            return BUILDING_BLOCK
        if not self.applicable_templates(m):
            return DEAD_END
        return None


def applicable_templates(world: WorldSpec, m: Molecule) -> list[TemplateId]:
    return world.applicable_templates(m)


def apply_template(world: WorldSpec, m: Molecule, t: TemplateId) -> Expansion:
    return world.apply_template(m, t)


def is_building_block(world: WorldSpec, m: Molecule) -> bool:
    return world.is_building_block(m)


def is_dead_end(world: WorldSpec, m: Molecule) -> bool:
    return world.is_dead_end(m)


def reducible_mass(m: Molecule) -> int:
    return len(m)


# ---- fingerprints -----------------------------------------------------------


def ngram_hash(gram: str) -> int:
    """64-bit hash of an n-gram: little-endian blake2b with an 8-byte digest."""
    return int.from_bytes(hashlib.blake2b(gram.encode(), digest_size=8).digest(), "little")


def ngrams(m: Molecule) -> set[str]:
    return {m[i:i + n] for n in NGRAM_SIZES for i in range(len(m) - n + 1)}


@lru_cache(maxsize=1 << 18)
def on_bits(m: Molecule) -> np.ndarray:
    """Sorted indices of the set fingerprint bits of ``m``."""
    if not m:
        raise MalformedMoleculeError("empty molecule")
    bits = {ngram_hash(g) % FP_BITS for g in ngrams(m)}
    out = np.fromiter(sorted(bits), dtype=np.int32, count=len(bits))
    out.setflags(write=False)
    return out


def featurize(m: Molecule) -> np.ndarray:
    """Dense 2048-wide 0/1 fingerprint (hashed character 1- to 4-grams)."""
    fp = np.zeros(FP_BITS, dtype=np.float64)
    fp[on_bits(m)] = 1.0
    return fp


def fingerprint_batch(molecules: Sequence[Molecule]) -> sparse.csr_matrix:
    """Stack fingerprints of ``molecules`` as an ``(n, 2048)`` CSR matrix."""
    rows = [on_bits(m) for m in molecules]
    indptr = np.zeros(len(rows) + 1, dtype=np.int64)
    np.cumsum([len(r) for r in rows], out=indptr[1:])
    indices = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int32)
    data = np.ones(len(indices), dtype=np.float64)
    return sparse.csr_matrix((data, indices, indptr), shape=(len(rows), FP_BITS))


# ---- brute-force AND-OR reachability -----------------------------------------


class Solver:
    """Memoized AND-OR solvability over the full world.

    ``min_depth(m)`` is the smallest depth (reactions on the longest
    root-to-leaf path) of any route from ``m`` whose leaves are all building
    blocks, or ``inf``.  Reactions strictly shorten molecules, so the
    recursion is well-founded.
    """

    def __init__(self, world: WorldSpec, templates=None):
        self.world = world
        # templates(m) -> iterable of template ids; defaults to every applicable rule
        self._templates = templates or world.applicable_templates
        self._depth: dict[str, float] = {}
        self._bounds: dict[str, tuple[float, float]] = {}  # (lo, hi) on min_depth
        self._exp: dict[str, list[Expansion]] = {}

    def expansions(self, m: Molecule) -> list[Expansion]:
        exps = self._exp.get(m)
        if exps is None:
            exps = [self.world.apply_template(m, t) for t in self._templates(m)]
            self._exp[m] = exps
        return exps

    def min_depth(self, m: Molecule) -> float:
        if len(m) <= self.world.bb_max_len:
            return 0
        hit = self._depth.get(m)
        if hit is None:
            hit = math.inf
            for e in self.expansions(m):
                hit = min(hit, 1 + max(self.min_depth(r) for r in e.reactants))
            self._depth[m] = hit
        return hit

    def solvable(self, m: Molecule, depth: int) -> bool:
        """Short-circuiting depth-bounded check; shares bounds across queries."""
        if len(m) <= self.world.bb_max_len:
            return True
        if m in self._depth:
            return self._depth[m] <= depth
        lo, hi = self._bounds.get(m, (1, math.inf))
        if hi <= depth:
            return True
        if lo > depth:
            return False
        ok = any(all(self.solvable(r, depth - 1) for r in e.reactants) for e in self.expansions(m))
        self._bounds[m] = (lo, depth) if ok else (depth + 1, hi)
        return ok


def random_molecule(rng: np.random.Generator, alphabet: str, length: int) -> Molecule:
    return "".join(alphabet[i] for i in rng.integers(0, len(alphabet), size=length))


def solvability_probe(world: WorldSpec, rng: np.random.Generator, n_targets: int = 100,
                      depth: int = 10) -> float:
    """Fraction of random non-building-block strings solvable within ``depth``."""
    solver = Solver(world)
    lo, hi = world.bb_max_len + 1, 2 * world.bb_max_len + 2
    hits = 0
    for _ in range(n_targets):
        m = random_molecule(rng, world.alphabet, int(rng.integers(lo, hi + 1)))
        hits += solver.solvable(m, depth)
    return hits / n_targets


# ---- world generation -------------------------------------------------------


def _fragment_length(rng: np.random.Generator, pattern_len: int) -> int:
    # geometric-ish bias toward short fragments: most reactions shed mass quickly
    n = 1
    while n < pattern_len - 1 and rng.random() < 0.3:
        n += 1
    return n


def _draw_rules(rng: np.random.Generator, n_rules: int, alphabet: str, poison: str,
                poison_fraction: float) -> tuple[RewriteRule, ...]:
    patterns: list[str] = []
    seen: set[str] = set()
    while len(patterns) < n_rules:
        plen = int(rng.choice([2, 3, 4], p=PATTERN_LENGTH_P))
        pat = random_molecule(rng, alphabet, plen)
        if pat not in seen:
            seen.add(pat)
            patterns.append(pat)
    n_poison = math.ceil(poison_fraction * n_rules)
    poisoned = set(rng.choice(n_rules, size=n_poison, replace=False).tolist())
    rules = []
    for i, pat in enumerate(patterns):
        n_frag = int(rng.choice([1, 2, 3], p=FRAGMENT_COUNT_P))
        frags = [random_molecule(rng, alphabet, _fragment_length(rng, len(pat))) for _ in range(n_frag)]
        if i in poisoned:
            j = int(rng.integers(n_frag))
            k = int(rng.integers(len(frags[j])))
            frags[j] = frags[j][:k] + poison + frags[j][k + 1:]
        rules.append(RewriteRule(pat, tuple(frags)))
    return tuple(rules)


def generate_world(n_rules: int, seed: int, *, alphabet: str = DEFAULT_ALPHABET,
                   bb_max_len: int = 3, poison_char: str = DEFAULT_POISON,
                   poison_fraction: float = 0.2, max_attempts: int = 1000) -> WorldSpec:
    """Draw a world whose random targets are at least half solvable within depth 10."""
    if n_rules < 10:
        raise ValueError(f"n_rules must be >= 10, got {n_rules}")
    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        rules = _draw_rules(rng, n_rules, alphabet, poison_char, poison_fraction)
        world = WorldSpec(alphabet, rules, bb_max_len, poison_char, seed)
        if solvability_probe(world, rng) >= 0.5:
            return world
    raise WorldGenerationError(f"no acceptable rule set after {max_attempts} candidates")


# ---- world file -------------------------------------------------------------


def dump_world(world: WorldSpec) -> str:
    lines = [
        WORLD_FORMAT,
        f"alphabet\t{world.alphabet}",
        f"bb_max_len\t{world.bb_max_len}",
        f"poison_char\t{world.poison_char}",
        f"seed\t{world.seed}",
        f"rules\t{len(world.rules)}",
    ]
    for i, r in enumerate(world.rules):
        lines.append(f"{i}\t{r.pattern}\t{','.join(r.replacements)}")
    return "\n".join(lines) + "\n"


def load_world(text: str) -> WorldSpec:
    lines = text.splitlines()
    if not lines or lines[0].strip() != WORLD_FORMAT:
        raise WorldFormatError(f"missing {WORLD_FORMAT} header")
    meta: dict[str, str] = {}
    rules: list[RewriteRule] = []
    for lineno, line in enumerate(lines[1:], 2):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) == 2:
            meta[parts[0]] = parts[1]
        elif len(parts) == 3:
            if int(parts[0]) != len(rules):
                raise WorldFormatError(f"line {lineno}: rule index out of order")
            rules.append(RewriteRule(parts[1], tuple(parts[2].split(","))))
        else:
            raise WorldFormatError(f"line {lineno}: cannot parse {line!r}")
    try:
        if int(meta["rules"]) != len(rules):
            raise WorldFormatError("rule count mismatch")
        return WorldSpec(meta["alphabet"], tuple(rules), int(meta["bb_max_len"]),
                         meta["poison_char"], int(meta["seed"]))
    except KeyError as exc:
        raise WorldFormatError(f"missing metadata field {exc}") from exc


def save_world(world: WorldSpec, path) -> None:
    Path(path).write_text(dump_world(world))


def read_world(path) -> WorldSpec:
    return load_world(Path(path).read_text())


# ---- ground-truth route sampling --------------------------------------------


def _grow_product(world: WorldSpec, rng: np.random.Generator, steps: int) -> Optional[Molecule]:
    """Invert ``steps`` random rules starting from a random building block."""
    m = random_molecule(rng, world.alphabet, world.bb_max_len)
    grown = 0
    for _ in range(steps * 8):
        if grown == steps:
            break
        rule = world.rules[int(rng.integers(len(world.rules)))]
        frags = [f for f in rule.replacements if world.poison_char not in f]
        if not frags:
            continue
        frag = frags[int(rng.integers(len(frags)))]
        spots = [i for i in range(len(m) - len(frag) + 1) if m.startswith(frag, i)]
        if not spots:
            continue
        pos = spots[int(rng.integers(len(spots)))]
        product = m[:pos] + rule.pattern + m[pos + len(frag):]
        if product.find(rule.pattern) != pos:
            continue
        m = product
        grown += 1
    return m if grown else None


def _random_route(world: WorldSpec, solver: Solver, m: Molecule, depth: int,
                  rng: np.random.Generator) -> RouteTree:
    if len(m) <= world.bb_max_len:
        return RouteTree.leaf(m, BUILDING_BLOCK)
    good = [e for e in solver.expansions(m)
            if all(solver.solvable(r, depth - 1) for r in e.reactants)]
    e = good[int(rng.integers(len(good)))]
    return RouteTree.node(m, e.template, [_random_route(world, solver, r, depth - 1, rng) for r in e.reactants])


def sample_training_routes(world: WorldSpec, n: int, max_depth: int, seed: int, *,
                           exclude: Iterable[Molecule] = (), min_depth: int = 1,
                           solver: Optional[Solver] = None) -> list[tuple[RouteTree, Molecule]]:
    """Sample ``n`` synthesizable routes with distinct roots.

    Products are grown by inverting random rules from a building block; a
    route is then drawn by choosing uniformly among the reactions that keep
    every reactant solvable within the remaining depth.  Products with any
    route shallower than ``min_depth`` are skipped.
    """
    if not 1 <= min_depth <= max_depth:
        raise ValueError("need 1 <= min_depth <= max_depth")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    solver = solver or Solver(world)
    taken = set(exclude)
    out: list[tuple[RouteTree, Molecule]] = []
    budget = 200 * n + 1000
    while len(out) < n:
        budget -= 1
        if budget < 0:
            raise WorldGenerationError(f"world too degenerate: only {len(out)} of {n} routes sampled")
        product = _grow_product(world, rng, int(rng.integers(1, max_depth + 1)))
        if product is None or product in taken or world.status(product) is not None:
            continue
        if not solver.solvable(product, max_depth):
            continue
        if min_depth > 1 and solver.solvable(product, min_depth - 1):
            continue
        taken.add(product)
        out.append((_random_route(world, solver, product, max_depth, rng), product))
    return out


def sl_corpus(routes: Iterable[tuple[RouteTree, Molecule]]) -> list[tuple[Molecule, TemplateId]]:
    """(molecule, template) pairs along sampled routes, in route order."""
    return [pair for route, _ in routes for pair in route.reactions()]
