"""Synthetic single-source profiles and mixtures with known ground truth.

Alleles are synthetic STRs, ``flank + motif * n + flank``, with a few
isoalleles that carry a substitution inside the repeat.  A single-source
read table is simulated from the artifact model itself: each read picks a
parent allele and a distance from the zero-inflated Pareto restricted to
the parent (distance 0) and the RFL distances attained by sequences within
two edits of it, then takes one of the sequences at that distance
uniformly.

Mixtures follow the resampling recipe: depth ``N ~ Normal(mean, sd)``
rounded, split over contributors by a multinomial on the mixing proportions,
then each contributor's share is drawn from its read table by a multinomial
on the normalized docs, and duplicate sequences are merged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .calibration import CalibrationBundle, EditProbabilities, ParetoParams, pareto_pdf
from .core import Locus, LocusReadTable, assemble_case, write_motif_table, write_reads_tsv
from .rfl import EditCosts, distance_key, rfl_matrix

BASES = "ACGT"
MOTIFS = ("AGAT", "TCTA", "GATA", "AATG", "TTTC", "ATCT", "TAGA", "GGAA")

# Illustrative single-edit probabilities for the simulator; SNPs most common,
# then back stutter, as in sequencing data.
DEFAULT_PROBS = EditProbabilities(p_f=0.003, p_b=0.01, p_i=0.001, p_d=0.001, p_s=0.02)
DEFAULT_PARETO = ParetoParams(2.668, 0.513, 0.683)


def default_calibration() -> CalibrationBundle:
    return CalibrationBundle.from_probs(DEFAULT_PROBS, DEFAULT_PARETO, source="simulator defaults")


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


# --------------------------------------------------------------------------
# synthetic loci and alleles

def make_loci(n_loci: int, seed: int = 0) -> list[Locus]:
    rng = make_rng([seed, 1])
    motifs = rng.permutation(len(MOTIFS))
    return [Locus(f"L{i + 1}", MOTIFS[motifs[i % len(MOTIFS)]], 1) for i in range(n_loci)]


def _random_flank(rng, motif, length) -> str:
    while True:
        s = "".join(rng.choice(list(BASES), length))
        if motif[:2] not in s:
            return s


def allele_universe(locus: Locus, n_alleles: int = 8, seed: int = 0,
                    repeat_range=(5, 12), n_iso: int = 2) -> list[str]:
    """Distinct candidate alleles for one locus."""
    rng = make_rng([seed, 2, sum(map(ord, locus.name))])
    m = locus.primary_motif
    left = _random_flank(rng, m, 3)
    right = _random_flank(rng, m, 3)
    n_len = n_alleles - n_iso
    lo, hi = repeat_range
    if hi - lo < n_len:
        raise ValueError("repeat range too narrow for the requested universe")
    counts = np.sort(rng.choice(np.arange(lo, hi), n_len, replace=False))
    alleles = [left + m * int(n) + right for n in counts]
    iso_bases = rng.choice(n_len, n_iso, replace=False)
    for b in iso_bases:
        n = int(counts[b])
        unit = int(rng.integers(1, n - 1))
        pos = len(left) + unit * len(m) + int(rng.integers(0, len(m)))
        base = alleles[b]
        sub = rng.choice([x for x in BASES if x != base[pos]])
        alleles.append(base[:pos] + sub + base[pos + 1:])
    if len(set(alleles)) != len(alleles):
        raise AssertionError("duplicate alleles in universe")
    return alleles


# --------------------------------------------------------------------------
# two-edit neighbourhoods

def single_edits(seq: str, motif: str) -> set[str]:
    out = set()
    n, m = len(seq), len(motif)
    for i in range(n):
        out.add(seq[:i] + seq[i + 1:])
        for b in BASES:
            if b != seq[i]:
                out.add(seq[:i] + b + seq[i + 1:])
    for i in range(n + 1):
        for b in BASES:
            out.add(seq[:i] + b + seq[i:])
        if seq[max(0, i - m):i] == motif or seq[i:i + m] == motif:
            out.add(seq[:i] + motif + seq[i:])
    for i in range(n - m + 1):
        if seq[i:i + m] == motif:
            out.add(seq[:i] + seq[i + m:])
    out.discard(seq)
    out.discard("")
    return out


@dataclass
class Neighbourhood:
    """Sequences within two edits of a parent, grouped by RFL distance.

    Only sequences whose RFL edit table has at most two edits are kept.
    """

    levels: np.ndarray  # sorted distinct distances > 0
    members: list[np.ndarray]  # object arrays of sequences per level


_NEIGHBOURHOODS: dict = {}


def neighbourhood(parent: str, motif: str, costs: EditCosts) -> Neighbourhood:
    key = (parent, motif, costs)
    hit = _NEIGHBOURHOODS.get(key)
    if hit is not None:
        return hit
    one = single_edits(parent, motif)
    seqs = set(one)
    for s in one:
        seqs |= single_edits(s, motif)
    seqs.discard(parent)
    seqs = sorted(seqs)
    dist, counts = rfl_matrix([parent], seqs, motif, costs)
    # overlapping edits (a base inserted into a stuttered copy, say) can give
    # sequences the restricted alignment only reaches with more edits; keep
    # the ones whose own edit table has at most two edits
    keep = counts[0].sum(axis=1) <= 2
    seqs = [x for x, k in zip(seqs, keep) if k]
    dist = dist[:, keep]
    keys = np.array([distance_key(d) for d in dist[0]])
    order = np.argsort(keys, kind="stable")
    keys = keys[order]
    arr = np.array(seqs, dtype=object)[order]
    levels, start = np.unique(keys, return_index=True)
    bounds = list(start) + [len(arr)]
    members = [arr[bounds[i]:bounds[i + 1]] for i in range(len(levels))]
    nb = Neighbourhood(levels, members)
    _NEIGHBOURHOODS[key] = nb
    return nb


def level_probabilities(nb: Neighbourhood, pareto: ParetoParams) -> np.ndarray:
    """Distance distribution of one read: entry 0 is the parent itself,
    entry i > 0 is ``nb.levels[i-1]``.

    The zero-inflated Pareto density is restricted to the attainable
    distances and renormalized, so the parent keeps weight rho and a level
    at distance d gets weight f(d).  A specific sequence at d is then drawn
    with probability proportional to f(d) / #(sequences at d), the form the
    likelihood scores.
    """
    f = np.array([pareto.zero_mass_rho] + [pareto_pdf(float(x), pareto) for x in nb.levels])
    return f / f.sum()


def sample_artifacts(parent: str, motif: str, calibration: CalibrationBundle, n: int,
                     rng: np.random.Generator) -> dict[str, int]:
    """Simulate ``n`` reads from one parent allele."""
    nb = neighbourhood(parent, motif, calibration.costs)
    per_level = rng.multinomial(n, level_probabilities(nb, calibration.pareto))
    out: dict[str, int] = {}
    if per_level[0]:
        out[parent] = int(per_level[0])
    for pool, cnt in zip(nb.members, per_level[1:]):
        if cnt == 0:
            continue
        picks = np.bincount(rng.integers(len(pool), size=cnt), minlength=len(pool))
        for i in np.flatnonzero(picks):
            s = pool[i]
            out[s] = out.get(s, 0) + int(picks[i])
    return out


# --------------------------------------------------------------------------
# profiles and mixtures

@dataclass(frozen=True)
class SourceProfile:
    genotypes: dict[str, tuple[str, str]]
    reads: dict[str, LocusReadTable]


def gen_profile(loci: Sequence[Locus], calibration: CalibrationBundle, seed,
                universes: Mapping[str, Sequence[str]] | None = None,
                genotype: Mapping[str, tuple[str, str]] | None = None,
                n_reads: int = 2500) -> SourceProfile:
    """One simulated single-source sample.

    Genotypes are two uniform draws with replacement from each locus'
    universe unless given.  Heterozygous parents get each read with
    probability 1/2.
    """
    rng = make_rng(seed)
    universes = universes or {loc.name: allele_universe(loc) for loc in loci}
    gts, reads = {}, {}
    for loc in loci:
        uni = list(universes[loc.name])
        if genotype is not None and loc.name in genotype:
            g = tuple(genotype[loc.name])
        else:
            g = (uni[int(rng.integers(len(uni)))], uni[int(rng.integers(len(uni)))])
        gts[loc.name] = g
        if g[0] == g[1]:
            acc = sample_artifacts(g[0], loc.primary_motif, calibration, n_reads, rng)
        else:
            n0 = int(rng.binomial(n_reads, 0.5))
            acc = sample_artifacts(g[0], loc.primary_motif, calibration, n0, rng)
            for s, c in sample_artifacts(g[1], loc.primary_motif, calibration, n_reads - n0, rng).items():
                acc[s] = acc.get(s, 0) + c
        rows = tuple(sorted(acc.items(), key=lambda kv: (-kv[1], kv[0])))
        reads[loc.name] = LocusReadTable(loc, rows)
    return SourceProfile(gts, reads)


@dataclass(frozen=True)
class MixSpec:
    k: int
    p_mix: tuple[float, ...]
    depth_mean: float = 2500.0
    depth_sd: float = 200.0
    seed: int = 0

    def __post_init__(self):
        p = np.asarray(self.p_mix, dtype=float)
        if len(p) != self.k:
            raise ValueError("p_mix must have k entries")
        if np.any(p < 0) or not np.isclose(p.sum(), 1.0):
            raise ValueError("p_mix must be a probability vector")


@dataclass(frozen=True)
class MixtureDraw:
    tables: list[LocusReadTable]
    depth: dict[str, int]
    per_contributor: dict[str, np.ndarray]  # locus -> reads drawn from each contributor


def synth_mixture(profiles: Sequence[SourceProfile], spec: MixSpec) -> MixtureDraw:
    if len(profiles) != spec.k:
        raise ValueError(f"need {spec.k} profiles, got {len(profiles)}")
    names = list(profiles[0].reads)
    for pr in profiles[1:]:
        if list(pr.reads) != names:
            raise ValueError("profiles cover different loci")
    rng = make_rng([spec.seed, 3])
    p = np.asarray(spec.p_mix, dtype=float)
    tables, depth, split = [], {}, {}
    for name in names:
        N = max(1, int(np.rint(rng.normal(spec.depth_mean, spec.depth_sd))))
        v = rng.multinomial(N, p)
        acc: dict[str, int] = {}
        for pr, vi in zip(profiles, v):
            t = pr.reads[name]
            w = rng.multinomial(int(vi), t.docs / t.total)
            for (s, _), c in zip(t.rows, w):
                if c:
                    acc[s] = acc.get(s, 0) + int(c)
        rows = tuple(sorted(acc.items(), key=lambda kv: (-kv[1], kv[0])))
        tables.append(LocusReadTable(profiles[0].reads[name].locus, rows))
        depth[name] = N
        split[name] = v
    return MixtureDraw(tables, depth, split)


# --------------------------------------------------------------------------
# complete synthetic cases

@dataclass
class SyntheticCase:
    loci: list[Locus]
    tables: list[LocusReadTable]
    k: int
    p_mix: tuple[float, ...]
    genotypes: list[dict[str, tuple[str, str]]]  # per contributor
    known: dict[str, dict[str, list[str]]]
    poi: dict[str, list[str]] | None
    poi_present: bool | None
    config: dict = field(default_factory=dict)

    def case(self, catalog_threshold: float = 0.0025, max_alleles: int | None = None):
        return assemble_case(self.tables, self.k, self.known, self.poi, catalog_threshold,
                             max_alleles=max_alleles)

    def truth(self) -> dict:
        return {"k": self.k, "p_mix": list(self.p_mix),
                "genotypes": [{l: list(g) for l, g in gt.items()} for gt in self.genotypes],
                "known": self.known, "poi": self.poi, "poi_present": self.poi_present,
                "config": self.config}

    def write(self, out_dir) -> Path:
        """Write reads, motifs, a case JSON and the ground truth."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_reads_tsv(out / "reads.tsv", self.tables)
        write_motif_table(out / "motifs.tsv", self.loci)
        case = {"reads": "reads.tsv", "motifs": "motifs.tsv", "k": self.k,
                "catalog_threshold": self.config.get("catalog_threshold", 0.0025),
                "known": self.known, "poi": self.poi}
        if self.config.get("max_alleles") is not None:
            case["max_alleles"] = self.config["max_alleles"]
        (out / "case.json").write_text(json.dumps(case, indent=2), encoding="utf-8")
        (out / "truth.json").write_text(json.dumps(self.truth(), indent=2), encoding="utf-8")
        return out / "case.json"


def absent_genotype(universe: Sequence[str], carried: set[str], rng) -> tuple[str, str]:
    """Genotype drawn from alleles no true contributor carries."""
    pool = [a for a in universe if a not in carried]
    if not pool:
        raise ValueError("every universe allele is carried by a contributor")
    a = pool[int(rng.integers(len(pool)))]
    b = pool[int(rng.integers(len(pool)))]
    return (a, b)


def make_synthetic_case(n_loci: int, p_mix: Sequence[float], seed: int, poi_present: bool | None = True,
                        victim: bool = False, calibration: CalibrationBundle | None = None,
                        depth_mean: float = 2500.0, depth_sd: float = 200.0,
                        locus_seed: int = 0, n_reads: int = 2500) -> SyntheticCase:
    """Simulated mixture with POI and optional victim.

    Contributor 0 is the POI when ``poi_present``; otherwise it is a random
    person and the POI genotype is drawn from alleles nobody in the mixture
    carries.  With ``victim=True`` the last contributor is a known victim.
    ``poi_present=None`` skips the POI altogether.
    """
    calibration = calibration or default_calibration()
    k = len(p_mix)
    loci = make_loci(n_loci, locus_seed)
    universes = {loc.name: allele_universe(loc, seed=locus_seed) for loc in loci}
    ss = np.random.SeedSequence([seed, 7])
    child = ss.spawn(k + 2)
    profiles = [gen_profile(loci, calibration, child[i], universes, n_reads=n_reads) for i in range(k)]
    mix = synth_mixture(profiles, MixSpec(k, tuple(p_mix), depth_mean, depth_sd,
                                          int(child[k].generate_state(1)[0])))
    known = {}
    if victim:
        known["victim"] = {l: list(g) for l, g in profiles[-1].genotypes.items()}
    poi = None
    if poi_present is True:
        poi = {l: list(g) for l, g in profiles[0].genotypes.items()}
    elif poi_present is False:
        rng = make_rng(child[k + 1])
        poi = {}
        for loc in loci:
            carried = {a for pr in profiles for a in pr.genotypes[loc.name]}
            poi[loc.name] = list(absent_genotype(universes[loc.name], carried, rng))
    return SyntheticCase(loci, mix.tables, k, tuple(float(x) for x in p_mix),
                         [pr.genotypes for pr in profiles], known, poi, poi_present,
                         config={"n_loci": n_loci, "p_mix": list(p_mix), "seed": seed,
                                 "poi_present": poi_present, "victim": victim,
                                 "depth_mean": depth_mean, "depth_sd": depth_sd,
                                 "locus_seed": locus_seed})
