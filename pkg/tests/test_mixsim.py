import math

import numpy as np
import pytest

from mixdeconv import mixsim
from mixdeconv.calibration import CalibrationBundle, ParetoParams
from mixdeconv.core import Locus, LocusReadTable
from mixdeconv.rfl import distance_key, rfl_distance

CAL = mixsim.default_calibration()
LOC = Locus("S1", "AGAT")
PARENT = "TTCG" + "AGAT" * 7 + "CCTG"
OTHER = "TTCG" + "AGAT" * 9 + "CCTG"


def test_near_certain_zero_mass_gives_only_parents():
    cal = CalibrationBundle(CAL.probs, CAL.costs, ParetoParams(2.668, 0.513, 1 - 1e-13))
    reads = mixsim.sample_artifacts(PARENT, "AGAT", cal, 10_000, np.random.default_rng(0))
    assert reads == {PARENT: 10_000}


def test_heterozygous_split():
    prof = mixsim.gen_profile([LOC], CAL, 1, genotype={"S1": (PARENT, OTHER)}, n_reads=10_000)
    t = prof.reads["S1"]
    a, b = t.doc_of(PARENT), t.doc_of(OTHER)
    # parents keep fraction ~ rho/(rho + artifact mass) of their half
    assert abs(a - b) <= 4 * math.sqrt(10_000 * 0.25) + 0.02 * 10_000
    assert t.total == 10_000


def test_top_doc_alleles_are_the_genotype():
    prof = mixsim.gen_profile([LOC], CAL, 2, genotype={"S1": (PARENT, OTHER)})
    top = {s for s, _ in prof.reads["S1"].rows[:2]}
    assert top == {PARENT, OTHER}


def test_distance_ecdf_within_dkw_band():
    n = 10_000
    reads = mixsim.sample_artifacts(PARENT, "AGAT", CAL, n, np.random.default_rng(4))
    nb = mixsim.neighbourhood(PARENT, "AGAT", CAL.costs)
    probs = mixsim.level_probabilities(nb, CAL.pareto)
    keys = np.concatenate([[distance_key(0.0)], nb.levels])
    level_of = {k: i for i, k in enumerate(keys)}
    hist = np.zeros(len(keys))
    for s, c in reads.items():
        d, _ = rfl_distance(PARENT, s, "AGAT", CAL.costs)
        hist[level_of[distance_key(d)]] += c
    emp = np.cumsum(hist) / n
    eps = math.sqrt(math.log(2 / 0.01) / (2 * n))
    assert np.max(np.abs(emp - np.cumsum(probs))) <= eps


def test_neighbourhood_members_have_at_most_two_edits():
    nb = mixsim.neighbourhood(PARENT, "AGAT", CAL.costs)
    rng = np.random.default_rng(5)
    for level, pool in zip(nb.levels, nb.members):
        s = pool[rng.integers(len(pool))]
        d, t = rfl_distance(PARENT, s, "AGAT", CAL.costs)
        assert distance_key(d) == level and t.n_edits <= 2


def _tiny_profile(seqs_docs):
    return mixsim.SourceProfile({"S1": (seqs_docs[0][0],) * 2},
                                {"S1": LocusReadTable(LOC, tuple(seqs_docs))})


def test_depth_conservation_and_merging():
    a = _tiny_profile([("AGAT", 90), ("AGATAGAT", 10)])
    b = _tiny_profile([("AGATAGAT", 70), ("TT", 30)])
    for seed in range(20):
        draw = mixsim.synth_mixture([a, b], mixsim.MixSpec(2, (0.5, 0.5), seed=seed))
        t = draw.tables[0]
        assert t.total == draw.depth["S1"]
        assert len(set(t.sequences)) == len(t.sequences)
        assert draw.per_contributor["S1"].sum() == draw.depth["S1"]


def test_degenerate_proportions_use_one_profile():
    a = _tiny_profile([("AGAT", 1)])
    b = _tiny_profile([("TT", 1)])
    draw = mixsim.synth_mixture([a, b], mixsim.MixSpec(2, (1.0, 0.0), seed=3))
    assert draw.tables[0].sequences == ["AGAT"]


def test_read_fraction_law_of_large_numbers():
    a = _tiny_profile([("AGAT", 1)])
    b = _tiny_profile([("TT", 1)])
    fr, totals = [], []
    for seed in range(1000):
        draw = mixsim.synth_mixture([a, b], mixsim.MixSpec(2, (0.9, 0.1), seed=seed))
        v = draw.per_contributor["S1"]
        fr.append(v[0] / v.sum())
        totals.append(v.sum())
    sd = math.sqrt(0.9 * 0.1 / np.mean(totals)) / math.sqrt(1000)
    assert abs(np.mean(fr) - 0.9) <= 3 * sd


def test_mismatched_loci_rejected():
    a = _tiny_profile([("AGAT", 1)])
    b = mixsim.SourceProfile({}, {"S2": LocusReadTable(Locus("S2", "AGAT"), (("A", 1),))})
    with pytest.raises(ValueError):
        mixsim.synth_mixture([a, b], mixsim.MixSpec(2, (0.5, 0.5)))
    with pytest.raises(ValueError):
        mixsim.MixSpec(2, (0.5, 0.6))


def test_deterministic_per_seed(tmp_path):
    x = mixsim.make_synthetic_case(2, (0.6, 0.4), seed=9, n_reads=500)
    y = mixsim.make_synthetic_case(2, (0.6, 0.4), seed=9, n_reads=500)
    assert x.tables == y.tables and x.genotypes == y.genotypes and x.poi == y.poi
    z = mixsim.make_synthetic_case(2, (0.6, 0.4), seed=10, n_reads=500)
    assert z.tables != x.tables


def test_absent_poi_carries_no_mixture_allele():
    sc = mixsim.make_synthetic_case(3, (0.5, 0.5), seed=1, poi_present=False, n_reads=500)
    for loc in sc.loci:
        carried = {a for g in sc.genotypes for a in g[loc.name]}
        assert not set(sc.poi[loc.name]) & carried


def test_written_case_loads(tmp_path):
    from mixdeconv.core import load_case_json
    sc = mixsim.make_synthetic_case(2, (0.7, 0.3), seed=2, victim=True, n_reads=500)
    path = sc.write(tmp_path)
    case = load_case_json(path)
    assert case.n_loci == 2 and "victim" in case.known_profiles and case.poi_profile is not None
    assert (tmp_path / "truth.json").exists()
