"""Calibration of the artifact-distance density.

Pipeline: tally how far every artifact at a homozygous training locus sits
from its parent, fit per-edit probabilities with the 7-state graveyard chain,
turn the probabilities into RFL costs through the zero-inflated Pareto, build
the averaged distance ECDF, refit the Pareto, and repeat until the costs stop
moving.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import least_squares, minimize

from .core import LocusReadTable
from .rfl import EditCosts, rfl_matrix

PCR_CYCLES = 29
STATES = ("N", "F", "B", "I", "D", "S", "G")
EDIT_NAMES = {"f": "forward stutter", "b": "back stutter", "i": "insertion",
              "d": "deletion", "s": "SNP"}


class CalibrationError(RuntimeError):
    """An optimizer or fixed-point loop failed; carries what it had."""

    def __init__(self, message, best=None, residual=None, trajectory=None):
        super().__init__(message)
        self.best = best
        self.residual = residual
        self.trajectory = trajectory


# --------------------------------------------------------------------------
# graveyard chain

@dataclass(frozen=True)
class EditProbabilities:
    p_f: float
    p_b: float
    p_i: float
    p_d: float
    p_s: float

    def __post_init__(self):
        for name in ("p_f", "p_b", "p_i", "p_d", "p_s"):
            v = getattr(self, name)
            if not (0.0 <= v < 1.0):
                raise ValueError(f"{name} must lie in [0, 1), got {v}")
        if self.p_a >= 1.0:
            raise ValueError(f"edit probabilities sum to {self.p_a} >= 1")

    @property
    def p_a(self) -> float:
        return self.p_f + self.p_b + self.p_i + self.p_d + self.p_s

    @property
    def p_n(self) -> float:
        return 1.0 - self.p_a

    def as_array(self) -> np.ndarray:
        """Edit probabilities in chain order F, B, I, D, S."""
        return np.array([self.p_f, self.p_b, self.p_i, self.p_d, self.p_s])

    @classmethod
    def from_array(cls, v) -> "EditProbabilities":
        return cls(*(float(x) for x in v))

    def as_dict(self) -> dict[str, float]:
        return {"p_f": self.p_f, "p_b": self.p_b, "p_i": self.p_i, "p_d": self.p_d, "p_s": self.p_s}


def transition_matrix(probs: EditProbabilities) -> np.ndarray:
    """7x7 transition matrix over the states N, F, B, I, D, S, G."""
    T = np.zeros((7, 7))
    T[0, 0] = probs.p_n
    T[0, 1:6] = probs.as_array()
    for s in range(1, 6):
        T[s, s] = probs.p_n
        T[s, 6] = probs.p_a
    T[6, 6] = 1.0
    return T


def graveyard_forward(probs: EditProbabilities, cycles: int = PCR_CYCLES,
                      method: str = "closed") -> np.ndarray:
    """State distribution after ``cycles`` rounds starting from the parent.

    ``method="closed"`` uses the closed form, ``"matrix"`` the explicit
    matrix power; the two agree to rounding.
    """
    if method == "matrix":
        mu0 = np.zeros(7)
        mu0[0] = 1.0
        return mu0 @ np.linalg.matrix_power(transition_matrix(probs), cycles)
    if method != "closed":
        raise ValueError(f"unknown method {method!r}")
    pn = probs.p_n
    head = pn ** (cycles - 1)
    mu = np.empty(7)
    mu[0] = head * pn
    mu[1:6] = cycles * probs.as_array() * head
    mu[6] = 1.0 - head * (pn + cycles * probs.p_a)
    return mu


@dataclass(frozen=True)
class EditProbFit:
    probs: EditProbabilities
    residual: float  # sum of squared differences at the optimum
    n_iter: int


def _analytic_edit_probs(freqs: np.ndarray, cycles: int) -> np.ndarray:
    """Invert the first six closed-form coordinates directly."""
    pn = max(freqs[0], 1e-300) ** (1.0 / cycles)
    theta = np.clip(freqs[1:6], 0.0, None) / (cycles * pn ** (cycles - 1))
    s = theta.sum()
    if s >= 1.0:
        theta *= 0.999 / s
    return theta


def _closed_form(theta: np.ndarray, cycles: int) -> np.ndarray:
    pa = theta.sum()
    pn = 1.0 - pa
    head = pn ** (cycles - 1)
    return np.concatenate([[head * pn], cycles * theta * head, [1.0 - head * (pn + cycles * pa)]])


def fit_edit_probs(state_freqs, cycles: int = PCR_CYCLES, maxiter: int = 2000) -> EditProbFit:
    """Least-squares fit of the five edit probabilities to observed state
    frequencies (order N, F, B, I, D, S, G).

    Starts at the direct inversion of the closed form and polishes with a
    bounded trust-region least-squares solve on the seven residuals.
    """
    freqs = np.asarray(state_freqs, dtype=float)
    if freqs.shape != (7,) or np.any(freqs < 0) or not np.isclose(freqs.sum(), 1.0, atol=1e-9):
        raise ValueError("state_freqs must be a nonnegative 7-vector summing to 1")

    def resid(theta):
        if theta.sum() >= 1.0:
            return np.full(7, 1e3)
        return _closed_form(theta, cycles) - freqs

    def loss(theta):
        return float(np.sum(resid(theta) ** 2))

    x0 = _analytic_edit_probs(freqs, cycles)
    # the box keeps every coordinate below 1/5 so the sum stays below 1
    res = least_squares(resid, np.clip(x0, 0.0, 0.19), bounds=(0.0, 0.2), method="trf",
                        xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=maxiter, x_scale="jac")
    best = np.clip(res.x, 0.0, None)
    if loss(x0) < loss(best):
        best = x0
    residual = loss(best)
    if res.status <= 0 and residual > 1e-10:
        raise CalibrationError(f"edit-probability fit did not converge: {res.message}",
                               best=best, residual=residual)
    return EditProbFit(EditProbabilities.from_array(best), residual, int(res.nfev))


# --------------------------------------------------------------------------
# zero-inflated Pareto

@dataclass(frozen=True)
class ParetoParams:
    shape: float
    rate_lambda: float
    zero_mass_rho: float

    def __post_init__(self):
        if not self.shape > 0 or not self.rate_lambda > 0:
            raise ValueError("shape and rate_lambda must be positive")
        if not 0.0 <= self.zero_mass_rho < 1.0:
            raise ValueError("zero_mass_rho must lie in [0, 1)")

    def as_dict(self) -> dict[str, float]:
        return {"shape": self.shape, "rate_lambda": self.rate_lambda,
                "zero_mass_rho": self.zero_mass_rho}


def _check_nonneg(d):
    d = np.asarray(d, dtype=float)
    if np.any(d < 0) or np.any(np.isnan(d)):
        raise ValueError("distance must be nonnegative")
    return d


def pareto_pdf(d, params: ParetoParams):
    """Zero-inflated Pareto: point mass rho at 0 plus a Lomax density."""
    d = _check_nonneg(d)
    c, lam, rho = params.shape, params.rate_lambda, params.zero_mass_rho
    cont = (1.0 - rho) * c * lam / (1.0 + lam * d) ** (c + 1.0)
    out = np.where(d == 0, rho, cont)
    return out if out.ndim else float(out)


def pareto_logpdf(d, params: ParetoParams):
    d = _check_nonneg(d)
    c, lam, rho = params.shape, params.rate_lambda, params.zero_mass_rho
    with np.errstate(divide="ignore"):
        cont = math.log1p(-rho) + math.log(c * lam) - (c + 1.0) * np.log1p(lam * d)
        out = np.where(d == 0, math.log(rho) if rho > 0 else -np.inf, cont)
    return out if out.ndim else float(out)


def pareto_cdf(d, params: ParetoParams):
    d = _check_nonneg(d)
    c, lam, rho = params.shape, params.rate_lambda, params.zero_mass_rho
    out = rho + (1.0 - rho) * (1.0 - (1.0 + lam * d) ** (-c))
    return out if out.ndim else float(out)


def pareto_sample(params: ParetoParams, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draws from the zero-inflated Pareto by inversion."""
    zero = rng.random(size) < params.zero_mass_rho
    u = rng.random(size)
    d = ((1.0 - u) ** (-1.0 / params.shape) - 1.0) / params.rate_lambda
    d[zero] = 0.0
    return d


def cost_from_prob(p: float, params: ParetoParams) -> float:
    """Distance at which the continuous density equals ``p``."""
    peak = (1.0 - params.zero_mass_rho) * params.shape * params.rate_lambda
    return ((p / peak) ** (-1.0 / (params.shape + 1.0)) - 1.0) / params.rate_lambda


def probs_to_costs(probs: EditProbabilities, params: ParetoParams,
                   normalize: bool = True) -> EditCosts:
    """Invert the Pareto density at each edit probability; costs are then
    rescaled so back stutter costs 1."""
    peak = (1.0 - params.zero_mass_rho) * params.shape * params.rate_lambda
    raw = {}
    for key, p in zip("fbids", probs.as_array()):
        if not 0.0 < p < peak:
            raise ValueError(f"{EDIT_NAMES[key]} probability {p} must lie in (0, {peak:.6g}) "
                             "for a positive cost")
        raw[key] = cost_from_prob(p, params)
    b = raw["b"] if normalize else 1.0
    return EditCosts(cost_insert=raw["i"] / b, cost_delete=raw["d"] / b, cost_snp=raw["s"] / b,
                     cost_forward_stutter=raw["f"] / b, cost_back_stutter=raw["b"] / b)


# --------------------------------------------------------------------------
# ECDF

@dataclass(frozen=True)
class AveragedEcdf:
    support_x: np.ndarray
    values_y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.support_x, dtype=float)
        y = np.asarray(self.values_y, dtype=float)
        if x.shape != y.shape or x.ndim != 1 or x.size == 0:
            raise ValueError("support and values must be equal-length nonempty vectors")
        if np.any(x < 0) or np.any(np.diff(x) <= 0):
            raise ValueError("support must be nonnegative and strictly increasing")
        if np.any(y < -1e-12) or np.any(y > 1 + 1e-12):
            raise ValueError("ECDF values must lie in [0, 1]")
        object.__setattr__(self, "support_x", x)
        object.__setattr__(self, "values_y", y)

    @property
    def is_monotone(self) -> bool:
        return bool(np.all(np.diff(self.values_y) >= -1e-12))

    def as_dict(self):
        return {"support_x": self.support_x.tolist(), "values_y": self.values_y.tolist()}


def locus_ecdf(distances, weights=None) -> tuple[np.ndarray, np.ndarray]:
    """Jump points and ECDF values of one locus' (optionally doc-weighted)
    distances."""
    d = np.asarray(distances, dtype=float)
    w = np.ones_like(d) if weights is None else np.asarray(weights, dtype=float)
    order = np.argsort(d, kind="stable")
    d, w = d[order], w[order]
    x, inv = np.unique(d, return_inverse=True)
    mass = np.bincount(inv, weights=w)
    return x, np.cumsum(mass) / mass.sum()


def average_ecdfs(curves: Sequence[tuple[np.ndarray, np.ndarray]], rule: str = "attained") -> AveragedEcdf:
    """Combine per-locus ECDFs on the union of their jump points.

    ``rule="attained"`` averages, at each t, only the loci that have a jump
    at t.  ``rule="flat"`` carries every locus' ECDF flat between its own
    jumps and averages all loci; this version is always nondecreasing, the
    attained rule is not.
    """
    if not curves:
        raise ValueError("no ECDFs to average")
    xs = np.unique(np.concatenate([np.asarray(x, float) for x, _ in curves]))
    total = np.zeros_like(xs)
    count = np.zeros_like(xs)
    for x, y in curves:
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        if rule == "attained":
            idx = np.searchsorted(xs, x)
            total[idx] += y
            count[idx] += 1
        elif rule == "flat":
            pos = np.searchsorted(x, xs, side="right") - 1
            total += np.where(pos >= 0, y[np.maximum(pos, 0)], 0.0)
            count += 1
        else:
            raise ValueError(f"unknown averaging rule {rule!r}")
    return AveragedEcdf(xs, total / count)


def ecdf_from_samples(distances, weights=None) -> AveragedEcdf:
    x, y = locus_ecdf(distances, weights)
    return AveragedEcdf(x, y)


def training_parent(table: LocusReadTable, tie_break: bool = False) -> str:
    """Highest-doc sequence of a homozygous training locus."""
    docs = table.docs
    top = docs.max()
    winners = sorted(s for s, n in table.rows if n == top)
    if len(winners) > 1 and not tie_break:
        raise ValueError(f"locus {table.locus.name}: ambiguous parent, {len(winners)} sequences "
                         f"share the maximal doc {top}")
    return winners[0]


@dataclass(frozen=True)
class TrainingDistances:
    """Distances and edit tables of every sequence to its locus' parent."""

    distances: list[np.ndarray]
    tables: list[np.ndarray]  # (M, 5) in I, del, S, F, B order
    docs: list[np.ndarray]


def training_distances(training: Sequence[LocusReadTable], costs: EditCosts,
                       tie_break: bool = False) -> TrainingDistances:
    dists, tabs, docs = [], [], []
    for t in training:
        parent = training_parent(t, tie_break)
        d, tab = rfl_matrix([parent], t.sequences, t.locus.primary_motif, costs)
        dists.append(d[0])
        tabs.append(tab[0])
        docs.append(t.docs.astype(float))
    return TrainingDistances(dists, tabs, docs)


def build_averaged_ecdf(training: Sequence[LocusReadTable], costs: EditCosts,
                        rule: str = "attained", tie_break: bool = False) -> AveragedEcdf:
    """Doc-weighted distance ECDF per training locus, averaged across loci."""
    if not training:
        raise ValueError("empty training corpus")
    td = training_distances(training, costs, tie_break)
    return average_ecdfs([locus_ecdf(d, w) for d, w in zip(td.distances, td.docs)], rule)


def state_frequencies(td: TrainingDistances) -> np.ndarray:
    """Doc-weighted graveyard-state tallies, averaged over loci.

    A sequence is in state N at distance 0, in the single-edit state of its
    edit type when its minimizing script has exactly one edit, and in G
    otherwise.
    """
    # column index in the (I, del, S, F, B) table for states F, B, I, D, S
    col = {1: 3, 2: 4, 3: 0, 4: 1, 5: 2}
    per_locus = []
    for tab, w in zip(td.tables, td.docs):
        n_edits = tab.sum(axis=1)
        freq = np.zeros(7)
        freq[0] = w[n_edits == 0].sum()
        single = n_edits == 1
        for state, c in col.items():
            freq[state] = w[single & (tab[:, c] == 1)].sum()
        freq[6] = w[n_edits >= 2].sum()
        per_locus.append(freq / freq.sum())
    return np.mean(per_locus, axis=0)


# --------------------------------------------------------------------------
# Pareto fit

def gap_weights(x) -> np.ndarray:
    """Weight 1/gap, with gap half the span to the neighbouring support
    points (the single neighbour at either end), normalized to mean 1."""
    x = np.asarray(x, dtype=float)
    if x.size == 1:
        return np.ones(1)
    gap = np.empty_like(x)
    gap[1:-1] = (x[2:] - x[:-2]) / 2.0
    gap[0] = x[1] - x[0]
    gap[-1] = x[-1] - x[-2]
    w = 1.0 / gap
    return w / w.mean()


def l1_objective(params: ParetoParams, ecdf: AveragedEcdf, weights=None) -> float:
    diff = np.abs(ecdf.values_y - pareto_cdf(ecdf.support_x, params))
    return float(np.sum(diff if weights is None else weights * diff))


@dataclass(frozen=True)
class ParetoFit:
    params: ParetoParams
    objective: float
    init_objective: float
    n_iter: int
    at_boundary: tuple[str, ...] = ()


_RHO_EDGE = 1e-9


def _decode(z) -> ParetoParams:
    rho = 1.0 / (1.0 + math.exp(-float(np.clip(z[2], -700, 700))))
    rho = min(rho, 1.0 - _RHO_EDGE)
    return ParetoParams(math.exp(float(np.clip(z[0], -700, 700))),
                        math.exp(float(np.clip(z[1], -700, 700))), rho)


def _encode(p: ParetoParams) -> np.ndarray:
    rho = min(max(p.zero_mass_rho, 1e-12), 1 - 1e-12)
    return np.array([math.log(p.shape), math.log(p.rate_lambda), math.log(rho / (1 - rho))])


def fit_pareto(ecdf: AveragedEcdf, init: ParetoParams = ParetoParams(2.0, 0.5, 0.7),
               weighted: bool = True, maxiter: int = 3000, tol: float = 1e-12,
               restarts: int = 3) -> ParetoFit:
    """Weighted-L1 fit of the zero-inflated Pareto CDF to an ECDF.

    Nelder-Mead in (log shape, log lambda, logit rho); after a run ends the
    search restarts from its result (a fresh simplex) until it stops
    improving.  Reaching ``maxiter`` away from a parameter boundary raises
    :class:`CalibrationError`.
    """
    w = gap_weights(ecdf.support_x) if weighted else None

    def obj(z):
        return l1_objective(_decode(z), ecdf, w)

    z = _encode(init)
    f0 = obj(z)
    best_f, n_iter, res = f0, 0, None
    for _ in range(1 + restarts):
        res = minimize(obj, z, method="Nelder-Mead",
                       options={"maxiter": maxiter, "xatol": tol, "fatol": tol})
        n_iter += int(res.nit)
        improved = res.fun < best_f - tol
        if res.fun <= best_f:
            z, best_f = res.x, float(res.fun)
        if not improved:
            break
    params = _decode(z)
    boundary = []
    if params.zero_mass_rho >= 1.0 - 1e-6:
        boundary.append("zero_mass_rho")
    if params.shape > 1e6 or params.shape < 1e-6:
        boundary.append("shape")
    if params.rate_lambda > 1e6 or params.rate_lambda < 1e-6:
        boundary.append("rate_lambda")
    if not res.success and not boundary:
        raise CalibrationError(f"Pareto fit did not converge: {res.message}", best=params,
                               residual=best_f)
    return ParetoFit(params, best_f, f0, n_iter, tuple(boundary))


# --------------------------------------------------------------------------
# fixed-point calibration

@dataclass(frozen=True)
class CalibrationBundle:
    probs: EditProbabilities
    costs: EditCosts
    pareto: ParetoParams
    ecdf: AveragedEcdf | None = None
    state_freqs: tuple[float, ...] | None = None
    provenance: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "edit_probabilities": self.probs.as_dict(),
            "edit_costs": self.costs.as_dict(),
            "pareto": self.pareto.as_dict(),
            "ecdf": None if self.ecdf is None else self.ecdf.as_dict(),
            "state_freqs": None if self.state_freqs is None else list(self.state_freqs),
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CalibrationBundle":
        try:
            ecdf = obj.get("ecdf")
            return cls(
                probs=EditProbabilities(**obj["edit_probabilities"]),
                costs=EditCosts(**obj["edit_costs"]),
                pareto=ParetoParams(**obj["pareto"]),
                ecdf=None if ecdf is None else AveragedEcdf(np.array(ecdf["support_x"]),
                                                            np.array(ecdf["values_y"])),
                state_freqs=None if obj.get("state_freqs") is None else tuple(obj["state_freqs"]),
                provenance=obj.get("provenance", {}),
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed calibration bundle: {exc}") from exc

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "CalibrationBundle":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_json(obj)

    @classmethod
    def from_probs(cls, probs: EditProbabilities, pareto: ParetoParams, **provenance):
        return cls(probs, probs_to_costs(probs, pareto), pareto, provenance=dict(provenance))


def corpus_hash(training: Sequence[LocusReadTable]) -> str:
    h = hashlib.sha256()
    for t in training:
        h.update(f"{t.locus.name}\t{t.locus.primary_motif}\t{t.locus.num_motifs_kappa}\n".encode())
        for s, n in t.rows:
            h.update(f"{s}\t{n}\n".encode())
        h.update(b"//\n")
    return h.hexdigest()


def _cost_vec(c: EditCosts) -> np.ndarray:
    return np.array(list(c.as_dict().values()))


def calibrate(training: Sequence[LocusReadTable],
              init: ParetoParams | CalibrationBundle = ParetoParams(2.0, 0.5, 0.7),
              max_rounds: int = 20, tol: float = 1e-6, rule: str = "attained",
              weighted: bool = True, tie_break: bool = False) -> CalibrationBundle:
    """Alternate edit-probability and Pareto fits until costs settle.

    Each round: distances and edit tables under the current costs, state
    tallies, graveyard fit, averaged ECDF, Pareto fit, new costs.  The first
    round starts from unit costs, or from the costs of ``init`` when a bundle
    is passed.  ``provenance["iterations"]`` counts rounds whose costs moved
    by ``tol`` or more, so restarting from a converged bundle reports 0.
    """
    if not training:
        raise ValueError("empty training corpus")
    if isinstance(init, CalibrationBundle):
        costs, pareto = init.costs, init.pareto
    else:
        costs, pareto = EditCosts.unit(), init
    trajectory = [costs.as_dict()]
    moved = 0
    for _ in range(max_rounds):
        td = training_distances(training, costs, tie_break)
        freqs = state_frequencies(td)
        pfit = fit_edit_probs(freqs)
        ecdf = average_ecdfs([locus_ecdf(d, w) for d, w in zip(td.distances, td.docs)], rule)
        pareto = fit_pareto(ecdf, pareto, weighted=weighted).params
        new_costs = probs_to_costs(pfit.probs, pareto)
        trajectory.append(new_costs.as_dict())
        delta = float(np.max(np.abs(_cost_vec(new_costs) - _cost_vec(costs))))
        costs = new_costs
        if delta < tol:
            return CalibrationBundle(
                pfit.probs, costs, pareto, ecdf, tuple(freqs.tolist()),
                provenance={"corpus_hash": corpus_hash(training), "iterations": moved,
                            "edit_prob_residual": pfit.residual, "ecdf_rule": rule,
                            "weighted_l1": weighted, "trajectory": trajectory})
        moved += 1
    raise CalibrationError(f"costs still moving after {max_rounds} rounds", trajectory=trajectory)
