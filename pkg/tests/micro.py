"""Micro-instances small enough for brute-force Bayes factors."""

from __future__ import annotations

import numpy as np

from mixdeconv.core import AlleleCatalog, CaseData, Locus, LocusReadTable
from mixdeconv.likelihood import LocusData
from mixdeconv.mixsim import default_calibration
from mixdeconv.rfl import precompute_distances

UNIVERSE = ["GACACT", "GACACACT", "GACACACACT"]
ARTIFACTS = ["GACT", "GACACAT", "TACACACT"]


def micro_case(seed: int, n_loci: int, J: int, k: int, victim: bool, poi_present: bool,
               max_reads: int = 6) -> CaseData:
    rng = np.random.default_rng(seed)
    loci = []
    poi, known = [], []
    for li in range(n_loci):
        loc = Locus(f"M{li}", "AC")
        alleles = UNIVERSE[:J]
        g = [tuple(sorted(rng.integers(0, J, 2).tolist())) for _ in range(k)]
        reads: dict[str, int] = {}
        n = int(rng.integers(3, max_reads + 1))
        for _ in range(n):
            r = int(rng.integers(k))
            a = alleles[g[r][int(rng.integers(2))]]
            s = a if rng.random() < 0.75 else ARTIFACTS[int(rng.integers(len(ARTIFACTS)))]
            reads[s] = reads.get(s, 0) + 1
        loci.append((LocusReadTable(loc, tuple(sorted(reads.items()))), AlleleCatalog(loc, tuple(alleles))))
        if poi_present:
            poi.append(g[0])
        else:
            carried = {a for row in g for a in row}
            free = [a for a in range(J) if a not in carried] or [J - 1]
            poi.append((free[0], free[-1]))
        known.append(g[-1])
    profiles = {"victim": tuple(known)} if victim else {}
    return CaseData(tuple(loci), k, profiles, tuple(poi))


def oracle_inputs(case: CaseData, calibration=None):
    """(lw, n) per locus exactly as the likelihood module sees them."""
    cal = calibration or default_calibration()
    dists = precompute_distances(case, cal.costs)
    out = []
    for (reads, _), ld in zip(case.loci, dists):
        data = LocusData.from_distances(ld, reads, cal.pareto, compress=False)
        out.append((data.lw, reads.docs.astype(int)))
    return out


INSTANCES = [
    # seed, L, J, k, victim, poi_present
    (0, 1, 2, 1, False, True),
    (1, 1, 3, 1, False, True),
    (2, 2, 2, 2, False, True),
    (3, 1, 3, 2, False, True),
    (4, 2, 3, 2, False, False),
    (5, 1, 3, 2, True, True),
    (6, 2, 3, 2, True, True),
    (7, 2, 2, 2, True, False),
    (8, 2, 3, 2, False, True),
    (9, 1, 2, 2, False, False),
]
