import itertools
from functools import lru_cache

import numpy as np
import pytest

from retroplan.core import BUILDING_BLOCK, DEAD_END, route_is_synthesizable
from retroplan.synthworld import (FP_BITS, MalformedMoleculeError, RewriteRule, Solver, TemplateMismatchError,
                                  WorldFormatError, WorldSpec, apply_template, applicable_templates, dump_world,
                                  featurize, fingerprint_batch, generate_world, is_building_block, is_dead_end,
                                  load_world, ngram_hash, ngrams, random_molecule, reducible_mass,
                                  sample_training_routes, sl_corpus, solvability_probe)


def test_rule_semantics_example():
    w = WorldSpec("ABCDXY", (RewriteRule("AB", ("C", "D")),))
    assert apply_template(w, "XABY", 0).reactants == ("XCY", "XDY")


def test_leftmost_match():
    w = WorldSpec("ABC", (RewriteRule("AB", ("C",)),))
    assert apply_template(w, "ABAB", 0).reactants == ("CAB",)


def test_applicable_templates_basics(tiny_world):
    assert applicable_templates(tiny_world, "A") == []  # building block
    assert applicable_templates(tiny_world, "CCAB") == [0, 1]
    assert applicable_templates(tiny_world, "ABZD") == []  # poisoned
    with pytest.raises(MalformedMoleculeError):
        applicable_templates(tiny_world, "ABQQ")
    with pytest.raises(MalformedMoleculeError):
        applicable_templates(tiny_world, "")


def test_pattern_equal_to_molecule():
    w = WorldSpec("ABCD", (RewriteRule("ABCD", ("A",)),), bb_max_len=3)
    assert 0 in applicable_templates(w, "ABCD")


def test_template_mismatch(tiny_world):
    with pytest.raises(TemplateMismatchError):
        apply_template(tiny_world, "AAAA", 0)
    with pytest.raises(TemplateMismatchError):
        apply_template(tiny_world, "ABAB", 7)


def test_terminal_predicates(tiny_world):
    assert is_building_block(tiny_world, "ABC")
    assert not is_building_block(tiny_world, "ABCD")
    assert is_dead_end(tiny_world, "ZDDDDD")
    assert is_dead_end(tiny_world, "DDAD")  # long, but no pattern matches
    assert not is_dead_end(tiny_world, "AB")


def test_applicable_templates_matches_naive_scan(world50):
    rng = np.random.default_rng(0)
    for _ in range(300):
        m = random_molecule(rng, world50.alphabet, int(rng.integers(1, 14)))
        naive = [i for i, r in enumerate(world50.rules)
                 if len(m) > world50.bb_max_len and any(m[j:j + len(r.pattern)] == r.pattern
                                                        for j in range(len(m)))]
        assert applicable_templates(world50, m) == naive


def test_mass_strictly_decreases(world50):
    rng = np.random.default_rng(1)
    checked = 0
    while checked < 10_000:
        m = random_molecule(rng, world50.alphabet, int(rng.integers(4, 16)))
        for t in applicable_templates(world50, m):
            e = apply_template(world50, m, t)
            assert all(reducible_mass(r) < reducible_mass(m) for r in e.reactants)
            assert list(e.reactants) == sorted(set(e.reactants))
            checked += 1


def test_predicates_partition_small_strings():
    w = generate_world(12, 3, alphabet="ABC")
    for n in range(1, 7):
        for chars in itertools.product("ABC" + w.poison_char, repeat=n):
            m = "".join(chars)
            bb, dead, opened = is_building_block(w, m), is_dead_end(w, m), bool(applicable_templates(w, m))
            assert bb + dead + opened == 1
            assert w.status(m) == (BUILDING_BLOCK if bb else DEAD_END if dead else None)


def test_fingerprint_properties():
    assert np.array_equal(featurize("ABCA"), featurize("ABCA"))
    single = featurize("A")
    assert single.sum() == 1 and single[ngram_hash("A") % FP_BITS] == 1
    a, b = "ABCDABCD", "ABCDEBCD"
    fa, fb = featurize(a), featurize(b)
    for g in ngrams(a) & ngrams(b):
        bit = ngram_hash(g) % FP_BITS
        assert fa[bit] == fb[bit] == 1
    dense = fingerprint_batch(["AB", "ABC"]).toarray()
    assert np.array_equal(dense[1], featurize("ABC"))


def test_ngram_hash_is_fixed():
    # pinned so the fingerprint layout never drifts between versions
    assert ngram_hash("A") == int.from_bytes(__import__("hashlib").blake2b(b"A", digest_size=8).digest(), "little")


def test_generate_world_contract():
    w1, w2 = generate_world(50, 7), generate_world(50, 7)
    assert dump_world(w1) == dump_world(w2)
    poisoned = sum(any(w1.poison_char in f for f in r.replacements) for r in w1.rules)
    assert poisoned >= 0.2 * len(w1.rules)
    assert all(w1.poison_char not in r.pattern for r in w1.rules)
    with pytest.raises(ValueError):
        generate_world(5, 1)


def test_solvability_probe_against_brute_force():
    w = generate_world(50, 7)
    rng = np.random.default_rng(11)
    probe = solvability_probe(w, np.random.default_rng(11))
    assert probe >= 0.5

    # independent memoized AND-OR reachability with explicit depth
    @lru_cache(maxsize=None)
    def ok(m, depth):
        if len(m) <= w.bb_max_len:
            return True
        if depth == 0:
            return False
        return any(all(ok(r, depth - 1) for r in apply_template(w, m, t).reactants)
                   for t in applicable_templates(w, m))

    lo, hi = w.bb_max_len + 1, 2 * w.bb_max_len + 2
    hits = sum(ok(random_molecule(rng, w.alphabet, int(rng.integers(lo, hi + 1))), 10) for _ in range(100))
    assert hits / 100 == probe


def test_solver_min_depth_agrees_with_bounded_check(world50):
    s = Solver(world50)
    rng = np.random.default_rng(2)
    for _ in range(200):
        m = random_molecule(rng, world50.alphabet, int(rng.integers(4, 10)))
        d = s.min_depth(m)
        fresh = Solver(world50)
        for depth in range(0, 9):
            assert fresh.solvable(m, depth) == (d <= depth)


def test_world_file_round_trip(world50):
    text = dump_world(world50)
    assert text.startswith("worldspec-v1\n")
    assert dump_world(load_world(text)) == text
    with pytest.raises(WorldFormatError):
        load_world("nope\n")
    with pytest.raises(WorldFormatError):
        load_world(text.replace("rules\t50", "rules\t49"))


def test_sampled_routes(world50):
    routes = sample_training_routes(world50, 60, 5, seed=3)
    assert len({m for _, m in routes}) == 60
    for route, target in routes:
        assert route.molecule == target
        assert route_is_synthesizable(route)
        assert route.depth() <= 5
    for m, t in sl_corpus(routes):
        assert t in applicable_templates(world50, m)
    for route, _ in routes:
        for node in route.nodes():
            if not node.is_leaf:
                e = apply_template(world50, node.molecule, node.template)
                assert e.reactants == tuple(c.molecule for c in node.children)


def test_min_depth_filter(world50):
    s = Solver(world50)
    routes = sample_training_routes(world50, 20, 7, seed=4, min_depth=4, solver=s)
    assert all(s.min_depth(m) >= 4 for _, m in routes)
    with pytest.raises(ValueError):
        sample_training_routes(world50, 5, 3, seed=4, min_depth=4)
