import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mixdeconv.core import AlleleCatalog, CaseData, Locus, LocusReadTable
from mixdeconv.rfl import (EditCosts, EditTable, continuity_counts, distance_key, load_distance_cache,
                           ntable, precompute_distances, rfl_distance, rfl_matrix)

from oracles import script_children

UNIT = EditCosts.unit()
COSTS = EditCosts(cost_insert=1.3, cost_delete=1.2, cost_snp=1.1, cost_forward_stutter=1.5,
                  cost_back_stutter=1.0)
PARENT = "AC" + "AACG" * 6 + "TCCG"


def test_identity():
    d, t = rfl_distance(PARENT, PARENT, "AACG", COSTS)
    assert d == 0.0 and t.n_edits == 0


def test_back_stutter_costs_one():
    d, t = rfl_distance(PARENT, "AC" + "AACG" * 5 + "TCCG", "AACG", COSTS)
    assert d == 1.0
    assert t.counts == (0, 0, 0, 0, 1)


def test_trailing_insertion():
    d, t = rfl_distance(PARENT, PARENT + "G", "AACG", COSTS)
    assert d == pytest.approx(COSTS.cost_insert)
    assert t.counts == (1, 0, 0, 0, 0)


def test_forward_stutter_and_snp():
    d, t = rfl_distance(PARENT, "AC" + "AACG" * 7 + "TCCG", "AACG", COSTS)
    assert (d, t.n_fwd) == (1.5, 1)
    d, t = rfl_distance(PARENT, "AC" + "AACG" * 6 + "TCCA", "AACG", COSTS)
    assert (d, t.n_snp) == (pytest.approx(1.1), 1)


def test_two_back_stutters():
    d, t = rfl_distance(PARENT, "AC" + "AACG" * 4 + "TCCG", "AACG", COSTS)
    assert d == 2.0 and t.n_back == 2


def test_stutter_needs_motif_context():
    # deleting four non-motif bases is four single deletions
    d, t = rfl_distance("TTTTAACG", "AACG", "AACG", COSTS)
    assert t.n_back == 0 and d == pytest.approx(4 * COSTS.cost_delete)


def test_rejects_empty():
    with pytest.raises(ValueError):
        rfl_distance("", "A", "A", COSTS)
    with pytest.raises(ValueError):
        rfl_distance("A", "A", "", COSTS)


def test_edit_costs_validation():
    with pytest.raises(ValueError):
        EditCosts(0.0, 1, 1, 1, 1)
    with pytest.raises(ValueError):
        EditCosts(math.inf, 1, 1, 1, 1)
    c = EditCosts(2, 2, 2, 2, 4).normalized()
    assert c.cost_back_stutter == 1.0 and c.cost_snp == 0.5


# ---- brute force -----------------------------------------------------------

def _random_case(rnd):
    motif = "".join(rnd.choice("ACG") for _ in range(rnd.choice([2, 3])))
    parent = "".join(rnd.choice([motif, "A", "C", "G", "T"]) for _ in range(rnd.randint(2, 5)))[:8]
    vals = {e: rnd.uniform(1.0, 4 / 3) for e in "IDSF"}
    vals["B"] = 1.0
    costs = EditCosts(vals["I"], vals["D"], vals["S"], vals["F"], vals["B"])
    return parent, motif, vals, costs


@pytest.mark.parametrize("seed", range(4))
def test_dp_matches_exhaustive_scripts(seed):
    rnd = random.Random(seed)
    parent, motif, vals, costs = _random_case(rnd)
    kids = script_children(parent, motif, vals, 3)
    checked = 0
    for child, (cost, _) in kids.items():
        if len(child) > 8:
            continue
        d, t = rfl_distance(parent, child, motif, costs)
        assert d == pytest.approx(cost, abs=1e-9), (parent, child, motif)
        checked += 1
    assert checked > 100


def test_tie_break_prefers_fewer_edits():
    # one back stutter (cost 1) vs nothing cheaper; the table records exactly one edit
    d, t = rfl_distance("GAACGAACGT", "GAACGT", "AACG", UNIT)
    assert d == 1.0 and t.n_edits == 1


# ---- properties -----------------------------------------------------------

dna = st.text("ACGT", min_size=1, max_size=12)
no_t = st.text("ACG", min_size=1, max_size=12)


@settings(max_examples=200, deadline=None)
@given(dna, dna)
def test_positivity(x, y):
    d, _ = rfl_distance(x, y, "ACGT", COSTS)
    assert (d == 0) == (x == y)
    assert d >= 0


@settings(max_examples=200, deadline=None)
@given(no_t, no_t, no_t)
def test_triangle_inequality_without_motif_copies(x, y, z):
    # with no motif anywhere the distance is a weighted Levenshtein distance
    # with S < I + D, which is a metric up to the I/D asymmetry
    m = "ACGT"
    lhs = rfl_distance(x, z, m, COSTS)[0]
    rhs = rfl_distance(x, y, m, COSTS)[0] + rfl_distance(y, z, m, COSTS)[0]
    assert lhs <= rhs + 1e-9


def test_triangle_inequality_fails_with_motif_copies():
    # A substitution can create a motif copy that a cheap back stutter then
    # removes; a direct script cannot edit the same bases twice.
    x, y, z = "ACGAA", "ACGTA", "A"
    costs = EditCosts.unit()
    assert rfl_distance(x, y, "ACGT", costs)[0] == 1.0
    assert rfl_distance(y, z, "ACGT", costs)[0] == 1.0
    assert rfl_distance(x, z, "ACGT", costs)[0] == 4.0


@settings(max_examples=100, deadline=None)
@given(dna, dna, st.sampled_from(["cost_insert", "cost_delete", "cost_snp", "cost_forward_stutter",
                                  "cost_back_stutter"]), st.floats(0.0, 2.0))
def test_cost_monotonicity(x, y, field, bump):
    base = rfl_distance(x, y, "ACG", COSTS)[0]
    bigger = EditCosts(**{**COSTS.as_dict(), field: getattr(COSTS, field) + bump})
    assert rfl_distance(x, y, "ACG", bigger)[0] >= base - 1e-12


def _levenshtein(a, b):
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


@settings(max_examples=200, deadline=None)
@given(dna, dna)
def test_bounded_by_levenshtein(x, y):
    d = rfl_distance(x, y, "ACG", COSTS)[0]
    assert d <= _levenshtein(x, y) * max(COSTS.cost_insert, COSTS.cost_delete, COSTS.cost_snp) + 1e-9


@settings(max_examples=100, deadline=None)
@given(st.lists(dna, min_size=1, max_size=3), st.lists(dna, min_size=1, max_size=3))
def test_matrix_matches_pairwise(parents, children):
    dist, counts = rfl_matrix(parents, children, "AC", COSTS)
    for j, p in enumerate(parents):
        for m, c in enumerate(children):
            d, t = rfl_distance(p, c, "AC", COSTS)
            assert dist[j, m] == d
            assert tuple(counts[j, m]) == t.counts


# ---- ntable and continuity counts -----------------------------------------------

def test_ntable_examples():
    assert ntable(EditTable(0, 0, 0, 0, 0, parent_len=10)) == 1
    assert ntable(EditTable(0, 0, 1, 0, 0, parent_len=10)) == 30
    assert ntable(EditTable(0, 0, 0, 0, 1, parent_len=10)) == 1
    assert ntable(EditTable(1, 1, 1, 0, 0, parent_len=10)) == math.comb(10, 3) * 3 * 4


def test_ntable_exact_big():
    t = EditTable(n_ins=200, n_del=0, n_snp=300, n_fwd=5, n_back=5, parent_len=1000, kappa=3)
    v = ntable(t)
    assert isinstance(v, int) and v == math.comb(1000, 500) * 3 ** 300 * 4 ** 200 * math.comb(7, 5) ** 2


def test_continuity_counts():
    t1 = EditTable(0, 0, 1, 0, 0, parent_len=10)
    t2 = EditTable(1, 0, 0, 0, 0, parent_len=10)
    assert continuity_counts([("x", 1.1, t1)]) == {distance_key(1.1): 30}
    assert continuity_counts([("x", 1.1, t1), ("y", 1.1, t1)]) == {distance_key(1.1): 30}
    assert continuity_counts([("x", 1.1, t1), ("y", 1.1, t2)]) == {distance_key(1.1): 30 + 40}


# ---- precompute + persistence ------------------------------------------------

def _case():
    loc = Locus("L1", "AACG")
    reads = LocusReadTable(loc, ((PARENT, 50), ("AC" + "AACG" * 5 + "TCCG", 7), (PARENT + "G", 2)))
    cat = AlleleCatalog(loc, (PARENT, "AC" + "AACG" * 5 + "TCCG"))
    return CaseData(((reads, cat),), 2)


def test_precompute_matches_direct_and_round_trips(tmp_path):
    case = _case()
    path = tmp_path / "cache.tsv"
    mats = precompute_distances(case, COSTS, path)
    reads, cat = case.loci[0]
    assert mats[0].dist.shape == (2, 3)
    for j, a in enumerate(cat.alleles):
        for m, s in enumerate(reads.sequences):
            assert mats[0].dist[j, m] == rfl_distance(a, s, "AACG", COSTS)[0]
    assert mats[0].dist[0, 0] == 0.0
    again = load_distance_cache(path, case)
    assert again[0] == mats[0]
    assert np.array_equal(again[0].dist, mats[0].dist)
    assert np.all(mats[0].counts >= 1)
