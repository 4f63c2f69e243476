"""Loci, read tables, allele catalogs and case loading.

A *case* bundles, for every locus, the observed sequences with their depth of
coverage (doc) and the catalog of candidate parent alleles, together with the
genotypes of any known contributors and of the person of interest (POI).

File formats
------------
reads TSV
    ``locus<TAB>sequence<TAB>doc``, one row per unique sequence.  An optional
    header line starting with ``locus`` is skipped; ``#`` lines are comments.
motif TSV
    ``locus<TAB>motif<TAB>kappa``.
case JSON
    ``{"reads": path, "motifs": path, "k": int, "catalog_threshold": float,
    "known": {label: {locus: [allele, allele]}}, "poi": {locus: [allele, allele]},
    "max_alleles": int}``; everything but ``reads`` is optional.
    Relative paths are resolved against the JSON file's directory.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DNA = frozenset("ACGT")
DEFAULT_CATALOG_THRESHOLD = 0.0025


class CaseFormatError(ValueError):
    """An input file could not be parsed."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class CaseValidationError(ValueError):
    """Parsed input is inconsistent (unknown locus, bad genotype, ...)."""


class AlleleBelowThresholdWarning(UserWarning):
    """A known contributor's allele is rare in the data; the assertion that
    this person contributed may be wrong."""


@dataclass(frozen=True)
class Locus:
    name: str
    primary_motif: str
    num_motifs_kappa: int = 1

    def __post_init__(self):
        if not self.primary_motif or not set(self.primary_motif) <= DNA:
            raise ValueError(f"locus {self.name}: motif must be a nonempty ACGT string")
        if self.num_motifs_kappa < 1:
            raise ValueError(f"locus {self.name}: kappa must be >= 1")


@dataclass(frozen=True)
class LocusReadTable:
    """Unique sequences observed at one locus with their depth of coverage."""

    locus: Locus
    rows: tuple[tuple[str, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple((str(s), int(n)) for s, n in self.rows))

    @property
    def sequences(self) -> list[str]:
        return [s for s, _ in self.rows]

    @property
    def docs(self) -> np.ndarray:
        return np.array([n for _, n in self.rows], dtype=np.int64)

    @property
    def total(self) -> int:
        """Total doc-weighted observation count."""
        return int(sum(n for _, n in self.rows))

    def doc_of(self, sequence: str) -> int:
        for s, n in self.rows:
            if s == sequence:
                return n
        return 0

    def merged(self) -> "LocusReadTable":
        """Collapse duplicate sequences by summing their doc."""
        acc: dict[str, int] = {}
        for s, n in self.rows:
            acc[s] = acc.get(s, 0) + n
        return LocusReadTable(self.locus, tuple(acc.items()))


@dataclass(frozen=True)
class AlleleCatalog:
    locus: Locus
    alleles: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "alleles", tuple(self.alleles))

    def __len__(self):
        return len(self.alleles)

    def index(self, allele: str) -> int:
        return self.alleles.index(allele)


Genotype = tuple[int, int]


@dataclass(frozen=True)
class CaseData:
    """Everything the sampler needs for one mixture.

    ``known_profiles`` and ``poi_profile`` hold one genotype per locus as a
    sorted pair of catalog indices.
    """

    loci: tuple[tuple[LocusReadTable, AlleleCatalog], ...]
    num_contributors_k: int
    known_profiles: Mapping[str, tuple[Genotype, ...]] = field(default_factory=dict)
    poi_profile: tuple[Genotype, ...] | None = None
    warnings: tuple[str, ...] = ()

    @property
    def n_loci(self) -> int:
        return len(self.loci)

    @property
    def locus_names(self) -> list[str]:
        return [reads.locus.name for reads, _ in self.loci]

    def with_poi(self, poi_profile) -> "CaseData":
        return CaseData(self.loci, self.num_contributors_k, dict(self.known_profiles),
                        tuple(tuple(sorted(g)) for g in poi_profile), self.warnings)


def build_catalog(reads: LocusReadTable, threshold: float = DEFAULT_CATALOG_THRESHOLD,
                  required: Sequence[str] = (), max_alleles: int | None = None) -> AlleleCatalog:
    """Candidate alleles: observed sequences whose doc is at least
    ``threshold * total`` plus every ``required`` allele regardless of doc.

    Observed candidates come first, sorted by decreasing doc (ties broken
    lexicographically), followed by required alleles not already present in
    the order given.  ``max_alleles`` caps the catalog size by dropping the
    lowest-doc candidates that are not required.
    """
    if not 0.0 <= threshold < 1.0:
        raise ValueError("threshold must lie in [0, 1)")
    cutoff = threshold * reads.total
    kept = [(s, n) for s, n in reads.rows if n >= cutoff and n > 0]
    kept.sort(key=lambda r: (-r[1], r[0]))
    if max_alleles is not None:
        req = set(required)
        free = max_alleles - len(req)
        if free < 0:
            raise ValueError(f"locus {reads.locus.name}: {len(req)} required alleles exceed "
                             f"max_alleles={max_alleles}")
        trimmed = []
        for s, n in kept:
            if s in req:
                trimmed.append((s, n))
            elif free > 0:
                trimmed.append((s, n))
                free -= 1
        kept = trimmed
    alleles = [s for s, _ in kept]
    seen = set(alleles)
    for s in required:
        if s not in seen:
            alleles.append(s)
            seen.add(s)
    return AlleleCatalog(reads.locus, tuple(alleles))


def read_motif_table(path) -> dict[str, Locus]:
    loci = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#") or line.lower().startswith("locus\t"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise CaseFormatError(path, lineno, "expected 3 tab-separated columns")
            name, motif, kappa = parts
            try:
                loci[name] = Locus(name, motif.upper(), int(kappa))
            except ValueError as exc:
                raise CaseFormatError(path, lineno, str(exc)) from None
    return loci


def read_reads_tsv(path, motifs: Mapping[str, Locus] | None = None) -> dict[str, LocusReadTable]:
    """Parse a reads TSV into per-locus tables (order of first appearance)."""
    rows: dict[str, list[tuple[str, int]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#") or line.lower().startswith("locus\t"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise CaseFormatError(path, lineno, "expected 3 tab-separated columns")
            locus, seq, doc = parts
            seq = seq.strip().upper()
            if not seq or not set(seq) <= DNA:
                raise CaseFormatError(path, lineno, f"invalid sequence {seq!r}")
            try:
                n = int(doc)
            except ValueError:
                raise CaseFormatError(path, lineno, f"doc {doc!r} is not an integer") from None
            if n < 1:
                raise CaseFormatError(path, lineno, "doc must be >= 1")
            rows.setdefault(locus, []).append((seq, n))
    tables = {}
    for name, r in rows.items():
        if motifs is not None and name not in motifs:
            raise CaseValidationError(f"locus {name} has no entry in the motif table")
        locus = motifs[name] if motifs is not None else Locus(name, "A")
        seqs = [s for s, _ in r]
        if len(set(seqs)) != len(seqs):
            raise CaseValidationError(f"locus {name}: duplicate sequence rows")
        tables[name] = LocusReadTable(locus, tuple(r))
    return tables


def write_reads_tsv(path, tables: Sequence[LocusReadTable]):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["locus", "sequence", "doc"])
        for t in tables:
            for s, n in t.rows:
                w.writerow([t.locus.name, s, n])


def write_motif_table(path, loci: Sequence[Locus]):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["locus", "motif", "kappa"])
        for loc in loci:
            w.writerow([loc.name, loc.primary_motif, loc.num_motifs_kappa])


def assemble_case(tables: Sequence[LocusReadTable], k: int,
                  known: Mapping[str, Mapping[str, Sequence[str]]] | None = None,
                  poi: Mapping[str, Sequence[str]] | None = None,
                  catalog_threshold: float = DEFAULT_CATALOG_THRESHOLD,
                  max_alleles: int | None = None) -> CaseData:
    """Build catalogs and index genotypes from allele strings.

    Known and POI alleles are forced into the catalog; a warning is recorded
    (and issued through :mod:`warnings`) for each one below the threshold.
    """
    known = dict(known or {})
    by_name = {t.locus.name: t for t in tables}
    for label, prof in known.items():
        for loc in prof:
            if loc not in by_name:
                raise CaseValidationError(f"known profile {label!r} references absent locus {loc}")
    if poi is not None:
        for loc in poi:
            if loc not in by_name:
                raise CaseValidationError(f"POI profile references absent locus {loc}")

    notes = []
    loci = []
    known_idx: dict[str, list[Genotype]] = {label: [] for label in known}
    poi_idx: list[Genotype] | None = [] if poi is not None else None
    for t in tables:
        name = t.locus.name
        required = []
        owners = [(label, prof.get(name)) for label, prof in known.items()]
        if poi is not None:
            owners.append(("POI", poi.get(name)))
        for label, alleles in owners:
            if alleles is None:
                raise CaseValidationError(f"profile {label!r} lacks locus {name}")
            if len(alleles) != 2:
                raise CaseValidationError(f"profile {label!r} at {name}: need exactly 2 alleles")
            for a in alleles:
                a = a.upper()
                required.append(a)
                if t.doc_of(a) < catalog_threshold * t.total:
                    msg = (f"{label} allele at {name} has doc {t.doc_of(a)} below "
                           f"{catalog_threshold:.4%} of {t.total}; added by assertion")
                    notes.append(msg)
                    warnings.warn(msg, AlleleBelowThresholdWarning, stacklevel=2)
        cat = build_catalog(t, catalog_threshold, required, max_alleles)
        loci.append((t, cat))
        for label, prof in known.items():
            a, b = (cat.index(x.upper()) for x in prof[name])
            known_idx[label].append((min(a, b), max(a, b)))
        if poi is not None:
            a, b = (cat.index(x.upper()) for x in poi[name])
            poi_idx.append((min(a, b), max(a, b)))
    case = CaseData(tuple(loci), int(k), {lab: tuple(g) for lab, g in known_idx.items()},
                    tuple(poi_idx) if poi_idx is not None else None, tuple(notes))
    problems = validate_case(case)
    if problems:
        raise CaseValidationError("; ".join(problems))
    return case


def load_case(reads_path, catalog_threshold: float = DEFAULT_CATALOG_THRESHOLD,
              known_profiles=None, poi_profile=None, k: int = 2, motifs=None,
              max_alleles: int | None = None) -> CaseData:
    """Read a reads TSV and assemble a :class:`CaseData`.

    ``known_profiles`` maps contributor label to ``{locus: [allele, allele]}``;
    ``motifs`` is a motif-table path or a ``{name: Locus}`` mapping.
    """
    if not 0.0 <= catalog_threshold < 1.0:
        raise ValueError("catalog_threshold must lie in [0, 1)")
    if isinstance(motifs, (str, Path)):
        motifs = read_motif_table(motifs)
    tables = read_reads_tsv(reads_path, motifs)
    return assemble_case(list(tables.values()), k, known_profiles, poi_profile, catalog_threshold,
                         max_alleles)


def load_case_json(path) -> CaseData:
    path = Path(path)
    try:
        spec = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CaseFormatError(path, exc.lineno, exc.msg) from None
    base = path.parent
    motifs = spec.get("motifs")
    return load_case(base / spec["reads"], spec.get("catalog_threshold", DEFAULT_CATALOG_THRESHOLD),
                     spec.get("known"), spec.get("poi"), spec.get("k", 2),
                     base / motifs if motifs else None, spec.get("max_alleles"))


def validate_case(case: CaseData) -> list[str]:
    """Return human-readable diagnostics; an empty list means the case is valid."""
    out = []
    if case.num_contributors_k < 1:
        out.append(f"k = {case.num_contributors_k} must be >= 1")
    if case.num_contributors_k < 1 + len(case.known_profiles):
        out.append(f"k = {case.num_contributors_k} leaves no unknown contributor beside "
                   f"{len(case.known_profiles)} known")
    if not case.loci:
        out.append("case has no loci")
    for li, (reads, cat) in enumerate(case.loci):
        name = reads.locus.name
        if not reads.rows:
            out.append(f"locus {name}: empty read table")
        seqs = reads.sequences
        seen = set()
        for row, s in enumerate(seqs):
            if s in seen:
                out.append(f"locus {name} row {row}: duplicate sequence")
            seen.add(s)
        for row, (_, n) in enumerate(reads.rows):
            if n < 1:
                out.append(f"locus {name} row {row}: doc {n} < 1")
        if len(cat) < 1:
            out.append(f"locus {name}: empty catalog")
        if len(set(cat.alleles)) != len(cat.alleles):
            out.append(f"locus {name}: duplicate catalog alleles")
        profiles = list(case.known_profiles.items())
        if case.poi_profile is not None:
            profiles.append(("POI", case.poi_profile))
        for label, prof in profiles:
            if len(prof) != len(case.loci):
                if li == 0:
                    out.append(f"profile {label}: {len(prof)} genotypes for {len(case.loci)} loci")
                continue
            for g in prof[li]:
                if not 0 <= g < len(cat):
                    out.append(f"profile {label} at locus {name}: allele index {g} >= J = {len(cat)}")
    return out
