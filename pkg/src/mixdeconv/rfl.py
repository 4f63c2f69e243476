"""Restricted Forensic Levenshtein (RFL) distance.

A weighted edit distance over five edit types: single-character insertion,
deletion and substitution (SNP), plus forward and back stutter, i.e. the
insertion or deletion of one whole copy of the locus motif.

"Restricted" is meant in the optimal-string-alignment sense: every character
of the parent and of the child takes part in at most one edit, so an edit
script is a set of non-overlapping edits applied to the parent at once.  Under
this reading the distance is exactly an alignment dynamic program with these
moves:

* match / SNP        ``(i-1, j-1)``
* deletion           ``(i-1, j)``
* insertion          ``(i, j-1)``
* back stutter       ``(i-m, j)``, needs ``parent[i-m:i] == motif``
* forward stutter    ``(i, j-m)``, needs ``child[j-m:j] == motif`` and a motif
  copy adjacent to the insertion point in the parent
  (``parent[i-m:i]`` or ``parent[i:i+m]``).

Among minimizing scripts the reported :class:`EditTable` is the one with the
fewest edits, then the lexicographically smallest ``(B, F, del, ins, S)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numba
import numpy as np

# column order of the count arrays used by the DP (tie-break order)
_B, _F, _DEL, _INS, _SNP = range(5)


@dataclass(frozen=True)
class EditCosts:
    cost_insert: float
    cost_delete: float
    cost_snp: float
    cost_forward_stutter: float
    cost_back_stutter: float = 1.0

    def __post_init__(self):
        for name in ("cost_insert", "cost_delete", "cost_snp", "cost_forward_stutter",
                     "cost_back_stutter"):
            object.__setattr__(self, name, float(getattr(self, name)))
        for name, v in self.as_dict().items():
            if not v > 0 or not math.isfinite(v):
                raise ValueError(f"{name} must be a positive finite number, got {v}")

    def as_dict(self) -> dict[str, float]:
        return {"cost_insert": self.cost_insert, "cost_delete": self.cost_delete,
                "cost_snp": self.cost_snp, "cost_forward_stutter": self.cost_forward_stutter,
                "cost_back_stutter": self.cost_back_stutter}

    def normalized(self) -> "EditCosts":
        """Rescale so back stutter costs exactly 1."""
        b = self.cost_back_stutter
        return EditCosts(self.cost_insert / b, self.cost_delete / b, self.cost_snp / b,
                         self.cost_forward_stutter / b, 1.0)

    def _vector(self) -> np.ndarray:
        # B, F, del, ins, S
        return np.array([self.cost_back_stutter, self.cost_forward_stutter, self.cost_delete,
                         self.cost_insert, self.cost_snp], dtype=np.float64)

    @classmethod
    def unit(cls) -> "EditCosts":
        return cls(1.0, 1.0, 1.0, 1.0, 1.0)


@dataclass(frozen=True)
class EditTable:
    """Edit-type counts of one minimizing script, with the parent length and
    the locus motif count kappa needed by :func:`ntable`."""

    n_ins: int = 0
    n_del: int = 0
    n_snp: int = 0
    n_fwd: int = 0
    n_back: int = 0
    parent_len: int = 1
    kappa: int = 1

    def __post_init__(self):
        if min(self.n_ins, self.n_del, self.n_snp, self.n_fwd, self.n_back) < 0:
            raise ValueError("edit counts must be nonnegative")
        if self.parent_len < 1 or self.kappa < 1:
            raise ValueError("parent_len and kappa must be >= 1")

    @property
    def counts(self) -> tuple[int, int, int, int, int]:
        """``(I, del, S, F, B)``, the order used in the distance cache file."""
        return (self.n_ins, self.n_del, self.n_snp, self.n_fwd, self.n_back)

    @property
    def n_edits(self) -> int:
        return sum(self.counts)


def _encode(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("ascii"), dtype=np.uint8)


@numba.njit(cache=True)
def _motif_flags(x, motif):
    """flags[i] is True when x[i:i+m] equals the motif."""
    n = x.shape[0]
    m = motif.shape[0]
    out = np.zeros(n + 1, dtype=np.bool_)
    for i in range(n - m + 1):
        ok = True
        for t in range(m):
            if x[i + t] != motif[t]:
                ok = False
                break
        out[i] = ok
    return out


# Tie-break key: (n_edits, B, F, del, ins, S) packed 10 bits per field, most
# significant first, so integer order is the lexicographic order.
_BITS = 10
_MAX_LEN = (1 << _BITS) - 1
_SHIFT = np.array([4, 3, 2, 1, 0], dtype=np.int64) * _BITS  # B, F, del, ins, S
_STEP = (np.int64(1) << (5 * _BITS)) + (np.int64(1) << _SHIFT)


@numba.njit(cache=True)
def _unpack(key):
    out = np.empty(5, dtype=np.int64)
    for t in range(5):
        out[t] = (key >> _SHIFT[t]) & _MAX_LEN
    return out


@numba.njit(cache=True)
def _rfl_dp(x, y, motif, w):
    n = x.shape[0]
    L = y.shape[0]
    m = motif.shape[0]
    xs = _motif_flags(x, motif)
    ys = _motif_flags(y, motif)
    cost = np.empty((n + 1, L + 1))
    key = np.zeros((n + 1, L + 1), dtype=np.int64)
    cost[0, 0] = 0.0
    for i in range(n + 1):
        for j in range(L + 1):
            if i == 0 and j == 0:
                continue
            best = np.inf
            bk = np.int64(0)
            # match / SNP
            if i > 0 and j > 0:
                if x[i - 1] == y[j - 1]:
                    c = cost[i - 1, j - 1]
                    kk = key[i - 1, j - 1]
                else:
                    c = cost[i - 1, j - 1] + w[_SNP]
                    kk = key[i - 1, j - 1] + _STEP[_SNP]
                best = c
                bk = kk
            # single deletion
            if i > 0:
                c = cost[i - 1, j] + w[_DEL]
                kk = key[i - 1, j] + _STEP[_DEL]
                tol = 1e-9 * max(1.0, abs(best)) if best < np.inf else 0.0
                if c < best - tol or (c <= best + tol and kk < bk):
                    best = c
                    bk = kk
            # single insertion
            if j > 0:
                c = cost[i, j - 1] + w[_INS]
                kk = key[i, j - 1] + _STEP[_INS]
                tol = 1e-9 * max(1.0, abs(best)) if best < np.inf else 0.0
                if c < best - tol or (c <= best + tol and kk < bk):
                    best = c
                    bk = kk
            # back stutter: drop parent[i-m:i]
            if i >= m and xs[i - m]:
                c = cost[i - m, j] + w[_B]
                kk = key[i - m, j] + _STEP[_B]
                tol = 1e-9 * max(1.0, abs(best)) if best < np.inf else 0.0
                if c < best - tol or (c <= best + tol and kk < bk):
                    best = c
                    bk = kk
            # forward stutter: child[j-m:j] is a new copy next to a parent copy
            if j >= m and ys[j - m] and ((i >= m and xs[i - m]) or (i + m <= n and xs[i])):
                c = cost[i, j - m] + w[_F]
                kk = key[i, j - m] + _STEP[_F]
                tol = 1e-9 * max(1.0, abs(best)) if best < np.inf else 0.0
                if c < best - tol or (c <= best + tol and kk < bk):
                    best = c
                    bk = kk
            cost[i, j] = best
            key[i, j] = bk
    return cost[n, L], _unpack(key[n, L])


@numba.njit(cache=True)
def _rfl_many(xbuf, xoff, ybuf, yoff, pairs, motif, w, dist, counts):
    for r in range(pairs.shape[0]):
        a = pairs[r, 0]
        b = pairs[r, 1]
        d, k = _rfl_dp(xbuf[xoff[a]:xoff[a + 1]], ybuf[yoff[b]:yoff[b + 1]], motif, w)
        dist[r] = d
        counts[r, :] = k


def _table_from_counts(k, parent_len: int, kappa: int) -> EditTable:
    return EditTable(n_ins=int(k[_INS]), n_del=int(k[_DEL]), n_snp=int(k[_SNP]),
                     n_fwd=int(k[_F]), n_back=int(k[_B]), parent_len=parent_len, kappa=kappa)


def rfl_distance(parent: str, child: str, motif: str, costs: EditCosts,
                 kappa: int = 1) -> tuple[float, EditTable]:
    """Minimum edit cost of turning ``parent`` into ``child``.

    Returns the distance and the edit table of one minimizing script.
    """
    if not parent or not child:
        raise ValueError("sequences must be nonempty")
    if not motif:
        raise ValueError("motif must be nonempty")
    _check_len([parent, child])
    d, k = _rfl_dp(_encode(parent), _encode(child), _encode(motif), costs._vector())
    return float(d), _table_from_counts(k, len(parent), kappa)


def _check_len(seqs):
    if max(len(s) for s in seqs) > _MAX_LEN:
        raise ValueError(f"sequences longer than {_MAX_LEN} bases are not supported")


def _pack(seqs: Sequence[str]):
    buf = np.frombuffer("".join(seqs).encode("ascii"), dtype=np.uint8)
    off = np.zeros(len(seqs) + 1, dtype=np.int64)
    off[1:] = np.cumsum([len(s) for s in seqs])
    return buf, off


def rfl_matrix(parents: Sequence[str], children: Sequence[str], motif: str,
               costs: EditCosts) -> tuple[np.ndarray, np.ndarray]:
    """All pairwise distances; returns ``(dist[J, M], counts[J, M, 5])`` where
    the count columns follow ``(I, del, S, F, B)``."""
    J, M = len(parents), len(children)
    if J and M:
        _check_len(list(parents) + list(children))
    xbuf, xoff = _pack(parents)
    ybuf, yoff = _pack(children)
    pairs = np.array([(a, b) for a in range(J) for b in range(M)], dtype=np.int64).reshape(-1, 2)
    dist = np.empty(len(pairs))
    raw = np.empty((len(pairs), 5), dtype=np.int64)
    _rfl_many(xbuf, xoff, ybuf, yoff, pairs, _encode(motif), costs._vector(), dist, raw)
    counts = raw[:, [_INS, _DEL, _SNP, _F, _B]]
    return dist.reshape(J, M), counts.reshape(J, M, 5)


def ntable(table: EditTable) -> int:
    """Number of distinct edit tables of the same shape.

    ``C(LP, I+del+S) * 3**S * 4**I * C(kappa+F-1, F) * C(kappa+B-1, B)``,
    evaluated exactly in integer arithmetic.
    """
    I, dl, S, F, B = table.counts
    k = table.kappa
    return (math.comb(table.parent_len, I + dl + S) * 3 ** S * 4 ** I
            * math.comb(k + F - 1, F) * math.comb(k + B - 1, B))


def distance_key(d: float) -> float:
    """Grouping key for 'equal' distances (sums of costs in different orders
    differ in the last bits)."""
    return round(float(d), 9)


def continuity_counts(locus_distances) -> dict[float, int]:
    """Lower-bound count of distinct artifacts at each observed distance.

    ``locus_distances`` is an iterable of ``(sequence, distance, table)``
    triples measured from one parent allele.  For every distance the ntable
    values of the *distinct* edit tables seen at that distance are summed.
    Keys are :func:`distance_key` values.
    """
    tables: dict[float, set] = {}
    for _, d, t in locus_distances:
        tables.setdefault(distance_key(d), set()).add(t)
    out = {}
    for key, ts in tables.items():
        out[key] = max(1, sum(ntable(t) for t in ts))
    return out


@dataclass(frozen=True)
class LocusDistances:
    """Distances and continuity counts from every catalog allele (rows) to
    every observed sequence (columns) at one locus."""

    locus: str
    dist: np.ndarray  # (J, M) float64
    tables: np.ndarray  # (J, M, 5) int64, columns I, del, S, F, B
    counts: np.ndarray  # (J, M) object array of python ints

    @property
    def log_counts(self) -> np.ndarray:
        return np.vectorize(lambda c: math.log(c), otypes=[float])(self.counts)

    def __eq__(self, other):
        if not isinstance(other, LocusDistances):
            return NotImplemented
        return (self.locus == other.locus and np.array_equal(self.dist, other.dist)
                and np.array_equal(self.tables, other.tables)
                and np.array_equal(self.counts, other.counts))


def _counts_for(dist, tables, parents, kappa):
    J, M = dist.shape
    counts = np.empty((J, M), dtype=object)
    for j in range(J):
        rows = []
        for m in range(M):
            I, dl, S, F, B = (int(v) for v in tables[j, m])
            rows.append((m, dist[j, m], EditTable(I, dl, S, F, B, len(parents[j]), kappa)))
        cmap = continuity_counts(rows)
        for m in range(M):
            counts[j, m] = cmap[distance_key(dist[j, m])]
    return counts


def locus_distances(reads, catalog, costs: EditCosts) -> LocusDistances:
    parents = list(catalog.alleles)
    dist, tables = rfl_matrix(parents, reads.sequences, reads.locus.primary_motif, costs)
    counts = _counts_for(dist, tables, parents, reads.locus.num_motifs_kappa)
    return LocusDistances(reads.locus.name, dist, tables, counts)


def precompute_distances(case, costs: EditCosts, path=None) -> list[LocusDistances]:
    """Distances for every (catalog allele, observed sequence) pair of every
    locus; written to ``path`` as a TSV cache when given."""
    out = [locus_distances(reads, cat, costs) for reads, cat in case.loci]
    if path is not None:
        save_distance_cache(path, out)
    return out


def save_distance_cache(path, matrices: Sequence[LocusDistances]):
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("locus\tallele_idx\tseq_idx\tdistance\tI,del,S,F,B\n")
            for ld in matrices:
                J, M = ld.dist.shape
                for j in range(J):
                    for m in range(M):
                        tab = ",".join(str(int(v)) for v in ld.tables[j, m])
                        fh.write(f"{ld.locus}\t{j}\t{m}\t{float(ld.dist[j, m])!r}\t{tab}\n")
    except OSError as exc:
        raise OSError(f"cannot write distance cache {path}: {exc}") from exc


def load_distance_cache(path, case) -> list[LocusDistances]:
    """Reload a cache written by :func:`save_distance_cache` for ``case``."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise OSError(f"cannot read distance cache {path}: {exc}") from exc
    shapes = {reads.locus.name: (len(cat), len(reads.rows)) for reads, cat in case.loci}
    dist = {k: np.full(s, np.nan) for k, s in shapes.items()}
    tabs = {k: np.zeros(s + (5,), dtype=np.int64) for k, s in shapes.items()}
    for lineno, line in enumerate(lines[1:], 2):
        locus, j, m, d, tab = line.split("\t")
        if locus not in shapes:
            raise ValueError(f"{path}:{lineno}: locus {locus} not in case")
        j, m = int(j), int(m)
        dist[locus][j, m] = float(d)
        tabs[locus][j, m] = [int(v) for v in tab.split(",")]
    out = []
    for reads, cat in case.loci:
        name = reads.locus.name
        if np.isnan(dist[name]).any():
            raise ValueError(f"{path}: incomplete entries for locus {name}")
        counts = _counts_for(dist[name], tabs[name], list(cat.alleles), reads.locus.num_motifs_kappa)
        out.append(LocusDistances(name, dist[name], tabs[name], counts))
    return out
