"""Priors, the Metropolis-within-Gibbs sampler and the Bayes factor.

The sampler targets ``pi(p, c, A | D)`` under the model without a person of
interest (POI) constraint.  Each sweep updates the genotype matrices ``A``
by an exact Gibbs draw over every matrix, then ``p`` by a Dirichlet random
walk, then ``c`` by a log-normal random walk.  After every sweep it records
the importance ratio

    P(A in Omega_1 | p, c, D) / prod_l pi_l(S_l),

where ``Omega_1`` is the event that some unknown contributor carries the
POI genotype ``S`` at every locus.  The Bayes factor estimate is the mean of
these ratios after burn-in.  By default ``P(A in Omega_1 | p, c, D)`` is the
exact probability of the union over unknown rows (inclusion-exclusion, loci
are independent given p and c); ``union="disjoint"`` sums the single-row
events instead, which can exceed 1 when the POI fits several rows.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp
from scipy.stats import dirichlet

from .calibration import CalibrationBundle
from .core import CaseData
from .likelihood import ExactEvaluator, LocusData, LocusEvaluator, genotypes, matrix_space
from .rfl import LocusDistances, precompute_distances

LN10 = math.log(10.0)
C_MEAN = 22.0
C_VAR = 3.0


class InferenceError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# priors

def lognormal_params(mean: float = C_MEAN, var: float = C_VAR) -> tuple[float, float]:
    """(mu, sigma^2) of the log-normal with the given mean and variance."""
    return math.log(mean ** 2 / math.sqrt(mean ** 2 + var)), math.log(1.0 + var / mean ** 2)


def log_prior_p(p, k: int | None = None) -> float:
    """Dirichlet(1/k, ..., 1/k) log density."""
    p = np.asarray(p, dtype=float)
    k = p.size if k is None else k
    if p.size != k or np.any(p <= 0) or not math.isclose(p.sum(), 1.0, abs_tol=1e-9):
        raise ValueError("p must be a positive probability vector of length k")
    if k == 1:
        return 0.0
    a = 1.0 / k
    return float((a - 1.0) * np.log(p).sum() - (k * gammaln(a) - gammaln(1.0)))


def log_prior_c(c: float, mean: float = C_MEAN, var: float = C_VAR) -> float:
    if not c > 0:
        raise ValueError("c must be positive")
    mu, s2 = lognormal_params(mean, var)
    lc = math.log(c)
    return -(lc - mu) ** 2 / (2 * s2) - lc - 0.5 * math.log(2 * math.pi * s2)


def log_prior_row(row, J: int) -> float:
    """Uniform genotype prior: 1/J^2 homozygous, 2/J^2 heterozygous."""
    a, b = row
    if not (0 <= a < J and 0 <= b < J):
        raise ValueError(f"genotype {row} out of range for J={J}")
    return math.log((1.0 if a == b else 2.0) / J ** 2)


@dataclass(frozen=True)
class PriorSpec:
    """Prior hyperparameters.  ``row_prior(locus_index, J)`` may return log
    masses over :func:`~mixdeconv.likelihood.genotypes`; the default is the
    uniform genotype prior."""

    c_mean: float = C_MEAN
    c_var: float = C_VAR
    row_prior: Callable[[int, int], np.ndarray] | None = None

    def row_log_masses(self, locus_index: int, J: int) -> np.ndarray:
        if self.row_prior is None:
            return np.array([log_prior_row(g, J) for g in genotypes(J)])
        out = np.asarray(self.row_prior(locus_index, J), dtype=float)
        if out.shape != (J * (J + 1) // 2,) or not math.isclose(logsumexp(out), 0.0, abs_tol=1e-9):
            raise ValueError("row prior must give normalized log masses over all genotypes")
        return out


@dataclass(frozen=True)
class ProposalConfig:
    alpha_p: float
    beta: tuple[float, ...]
    eta_c: float = 0.25

    def __post_init__(self):
        if not self.alpha_p > 0 or not self.eta_c > 0:
            raise ValueError("alpha_p and eta_c must be positive")

    @classmethod
    def default(cls, k: int, alpha_p: float | None = None, eta_c: float = 0.25) -> "ProposalConfig":
        if alpha_p is None:
            alpha_p = 70.0 if k >= 3 else 25.0
        return cls(float(alpha_p), tuple([1.0 / k] * k), eta_c)


INTEGRATORS = {"laplace": LocusEvaluator, "exact": ExactEvaluator}

PRESETS = {
    "scenario-2mix-victim": (1100, 100, 25.0),
    "scenario-2mix": (590, 90, 25.0),
    "scenario-3mix-victim": (350, 50, 70.0),
}


@dataclass(frozen=True)
class ChainConfig:
    steps: int
    burn_in: int
    seed: int = 0
    init_p: tuple[float, ...] | None = None
    init_c: float = C_MEAN
    alpha_p: float | None = None
    eta_c: float = 0.25
    union: str = "exact"
    warm_start: bool = True
    use_likelihood: bool = True
    integrator: str = "laplace"

    def __post_init__(self):
        if not self.steps > self.burn_in >= 0:
            raise ValueError("need steps > burn_in >= 0")
        if self.union not in ("exact", "disjoint"):
            raise ValueError("union must be 'exact' or 'disjoint'")
        if self.integrator not in INTEGRATORS:
            raise ValueError(f"integrator must be one of {sorted(INTEGRATORS)}")

    @classmethod
    def preset(cls, name: str, seed: int = 0, **kw) -> "ChainConfig":
        try:
            steps, burn, alpha = PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
        return cls(steps, burn, seed, alpha_p=alpha, **kw)

    def as_dict(self):
        return {"steps": self.steps, "burn_in": self.burn_in, "seed": self.seed,
                "init_p": None if self.init_p is None else list(self.init_p),
                "init_c": self.init_c, "alpha_p": self.alpha_p, "eta_c": self.eta_c,
                "union": self.union, "warm_start": self.warm_start,
                "use_likelihood": self.use_likelihood, "integrator": self.integrator}


def default_init_p(k: int) -> np.ndarray:
    w = np.arange(k, 0, -1, dtype=float)
    return w / w.sum()


# --------------------------------------------------------------------------
# model assembly

@dataclass
class LocusModel:
    data: LocusData
    space: list
    evaluator: LocusEvaluator
    log_prior: np.ndarray  # per matrix, unknown rows only
    omega1: dict  # frozenset of unknown rows -> boolean mask over the space
    log_poi_prior: float


def _lse(x) -> float:
    """log-sum-exp of a 1-D array; scipy's version costs ~0.3 ms per call,
    which dominates the per-step bookkeeping."""
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return -math.inf
    m = x.max()
    if not math.isfinite(m):
        return float(m)
    return float(m + math.log(np.exp(x - m).sum()))


class CaseModel:
    """Everything the sampler needs that does not change along the chain.

    Rows are kept in *label order*: unknown contributors first, then known
    contributors in the order of ``case.known_profiles``.
    """

    def __init__(self, case: CaseData, calibration: CalibrationBundle,
                 distances: Sequence[LocusDistances] | None = None,
                 prior: PriorSpec = PriorSpec(), warm_start: bool = True,
                 integrator: str = "laplace"):
        self.case = case
        self.prior = prior
        k = case.num_contributors_k
        known = list(case.known_profiles.items())
        self.n_unknown = k - len(known)
        if self.n_unknown < 0:
            raise InferenceError("more known contributors than k")
        self.labels = tuple([f"unknown{i}" for i in range(self.n_unknown)] + [lab for lab, _ in known])
        self.k = k
        if distances is None:
            distances = precompute_distances(case, calibration.costs)
        self.loci: list[LocusModel] = []
        for li, ((reads, cat), ld) in enumerate(zip(case.loci, distances)):
            J = len(cat)
            data = LocusData.from_distances(ld, reads, calibration.pareto)
            fixed = {self.n_unknown + r: prof[li] for r, (_, prof) in enumerate(known)}
            space = matrix_space(J, k, fixed)
            ev = INTEGRATORS[integrator](data, space, warm=warm_start)
            row_lp = prior.row_log_masses(li, J)
            gidx = {g: i for i, g in enumerate(genotypes(J))}
            lp = np.array([sum(row_lp[gidx[m[r]]] for r in range(self.n_unknown)) for m in space])
            omega1 = {}
            log_poi = 0.0
            if case.poi_profile is not None:
                S = tuple(case.poi_profile[li])
                log_poi = float(row_lp[gidx[S]])
                for size in range(1, self.n_unknown + 1):
                    for T in itertools.combinations(range(self.n_unknown), size):
                        omega1[frozenset(T)] = np.array([all(m[r] == S for r in T) for m in space])
            self.loci.append(LocusModel(data, space, ev, lp, omega1, log_poi))

    @property
    def has_poi(self) -> bool:
        return self.case.poi_profile is not None

    @property
    def log_poi_prior_mass(self) -> float:
        return float(sum(lm.log_poi_prior for lm in self.loci))

    @property
    def log10_upper_bound(self) -> float:
        return -self.log_poi_prior_mass / LN10

    def log_posterior_weights(self, integrals: Sequence[np.ndarray]) -> list[np.ndarray]:
        return [lm.log_prior + v for lm, v in zip(self.loci, integrals)]

    def log_importance_ratio(self, integrals: Sequence[np.ndarray], union: str = "exact") -> float:
        """log of P(Omega_1 | p, c, D) / prod_l pi_l(S_l) from per-matrix
        log integrals at one (p, c)."""
        if not self.has_poi:
            raise InferenceError("case has no POI profile")
        if self.n_unknown == 0:
            raise InferenceError("no unknown contributor can carry the POI genotype")
        weights = self.log_posterior_weights(integrals)
        denom = [_lse(w) for w in weights]
        for lm, d in zip(self.loci, denom):
            if not np.isfinite(d):
                raise InferenceError(f"all matrices have zero likelihood at locus {lm.data.name}")
        terms = {}
        for T in self.loci[0].omega1:
            tot = 0.0
            for lm, w, d in zip(self.loci, weights, denom):
                mask = lm.omega1[T]
                tot += _lse(w[mask]) - d
            terms[T] = tot
        singles = [t for T, t in terms.items() if len(T) == 1]
        if union == "disjoint":
            log_p = _lse(singles)
        else:
            pos = [t for T, t in terms.items() if len(T) % 2 == 1]
            neg = [t for T, t in terms.items() if len(T) % 2 == 0]
            lp, ln = _lse(pos), _lse(neg)
            if ln == -np.inf:
                log_p = lp
            elif ln < lp:
                log_p = lp + math.log1p(-math.exp(ln - lp))
            else:
                log_p = -np.inf
            # rounding guard: a union is at least its largest member, at most 1
            log_p = min(max(log_p, max(singles)), 0.0)
        return float(log_p - self.log_poi_prior_mass)


# --------------------------------------------------------------------------
# chain state

@dataclass(frozen=True)
class MixtureState:
    """Sampler state with ``p`` sorted descending; ``A[l]`` lists one
    genotype per row in the same order, ``labels`` names each row."""

    p: np.ndarray
    c: float
    A: tuple
    labels: tuple[str, ...]


@dataclass
class ChainTrace:
    p: np.ndarray  # (steps, k), sorted descending
    c: np.ndarray
    log10_ratio: np.ndarray  # nan when the case has no POI
    accepted_p: np.ndarray
    accepted_c: np.ndarray
    burn_in: int
    A: list  # per step: tuple over loci of rows (label order)
    labels: tuple[str, ...]
    seed: int
    config: dict = field(default_factory=dict)
    final_state: MixtureState | None = None

    @property
    def steps(self) -> int:
        return len(self.c)

    @property
    def in_burn_in(self) -> np.ndarray:
        return np.arange(self.steps) < self.burn_in

    def write_tsv(self, path):
        k = self.p.shape[1]
        with open(path, "w", encoding="utf-8") as fh:
            cols = ["step"] + [f"p_{i}" for i in range(k)] + ["c", "log10_importance_ratio",
                                                               "accepted_p", "accepted_c", "burn_in"]
            fh.write("\t".join(cols) + "\n")
            for s in range(self.steps):
                row = [str(s)] + [repr(float(x)) for x in self.p[s]] + [
                    repr(float(self.c[s])), repr(float(self.log10_ratio[s])),
                    str(int(self.accepted_p[s])), str(int(self.accepted_c[s])), str(int(s < self.burn_in))]
                fh.write("\t".join(row) + "\n")


def _dirichlet_logpdf(x, alpha) -> float:
    return float(dirichlet.logpdf(x, alpha))


def proposal_log_ratio(p_cur, p_new, prop: ProposalConfig) -> float:
    """log b(p_cur | p_new) - log b(p_new | p_cur) for the Dirichlet walk."""
    beta = np.asarray(prop.beta)
    return (_dirichlet_logpdf(p_cur, prop.alpha_p * np.asarray(p_new) + beta)
            - _dirichlet_logpdf(p_new, prop.alpha_p * np.asarray(p_cur) + beta))


def _sample_index(logw: np.ndarray, rng) -> int:
    w = np.exp(logw - logw.max())
    cum = np.cumsum(w)
    return int(min(np.searchsorted(cum, rng.random() * cum[-1], side="right"), len(w) - 1))


class Sampler:
    """Blocked Metropolis-within-Gibbs over (A, p, c) for one case."""

    def __init__(self, model: CaseModel, config: ChainConfig):
        self.model = model
        self.config = config
        k = model.k
        self.prop = ProposalConfig.default(k, config.alpha_p, config.eta_c)
        self.rng = np.random.Generator(np.random.Philox(config.seed))
        p0 = default_init_p(k) if config.init_p is None else np.asarray(config.init_p, dtype=float)
        if p0.size != k or np.any(p0 <= 0) or not math.isclose(p0.sum(), 1.0, abs_tol=1e-9):
            raise ValueError("init_p must be a positive probability vector of length k")
        self.p = p0 / p0.sum()  # label order
        self.c = float(config.init_c)
        self.A_idx = [0 for _ in model.loci]
        self._sort_unknown()
        self.full = self._full(self.p, self.c)
        self.n_acc_p = 0
        self.n_acc_c = 0

    # likelihood helpers -------------------------------------------------
    def _full(self, p, c):
        if not self.config.use_likelihood:
            return [np.zeros(len(lm.space)) for lm in self.model.loci]
        return [lm.evaluator.evaluate(p, c) for lm in self.model.loci]

    def _current(self, p, c) -> float:
        if not self.config.use_likelihood:
            return 0.0
        tot = 0.0
        for lm, i in zip(self.model.loci, self.A_idx):
            tot += float(lm.evaluator.evaluate(p, c, which=[i])[0])
        return tot

    def _current_cached(self) -> float:
        return float(sum(v[i] for v, i in zip(self.full, self.A_idx)))

    def _sort_unknown(self):
        """Order unknown rows by decreasing p (stable), permuting A rows."""
        u = self.model.n_unknown
        if u < 2:
            return
        perm = np.argsort(-self.p[:u], kind="stable")
        if np.all(perm == np.arange(u)):
            return
        self.p[:u] = self.p[:u][perm]
        for li, lm in enumerate(self.model.loci):
            rows = lm.space[self.A_idx[li]]
            new = tuple(rows[perm[r]] for r in range(u)) + rows[u:]
            self.A_idx[li] = lm.evaluator.index(new)

    # updates --------------------------------------------------------------
    def update_A(self):
        weights = self.model.log_posterior_weights(self.full)
        for li, (lm, w) in enumerate(zip(self.model.loci, weights)):
            if not np.any(np.isfinite(w)):
                raise InferenceError(f"all genotype matrices have zero likelihood at locus {lm.data.name}")
            self.A_idx[li] = _sample_index(w, self.rng)

    def update_p(self) -> bool:
        k = self.model.k
        if k == 1:
            return False
        alpha = self.prop.alpha_p * self.p + np.asarray(self.prop.beta)
        prop = self.rng.dirichlet(alpha)
        if np.any(prop <= 1e-300):
            return False
        prop = prop / prop.sum()
        cur = self._current_cached()
        new = self._current(prop, self.c)
        if not np.isfinite(new):
            return False
        log_r = (log_prior_p(prop, k) - log_prior_p(self.p, k) + new - cur
                 + proposal_log_ratio(self.p, prop, self.prop))
        if math.log(self.rng.random()) < log_r:
            self.p = prop
            self._sort_unknown()
            return True
        return False

    def update_c(self, cur: float) -> bool:
        prior = self.model.prior
        c_new = self.c * math.exp(self.prop.eta_c * self.rng.standard_normal())
        new = self._current(self.p, c_new)
        if not np.isfinite(new):
            return False
        log_r = (log_prior_c(c_new, prior.c_mean, prior.c_var) - log_prior_c(self.c, prior.c_mean, prior.c_var)
                 + new - cur + math.log(c_new / self.c))
        if math.log(self.rng.random()) < log_r:
            self.c = c_new
            return True
        return False

    def step(self):
        self.update_A()
        acc_p = self.update_p()
        cur = self._current(self.p, self.c) if acc_p else self._current_cached()
        acc_c = self.update_c(cur)
        if acc_p or acc_c:
            self.full = self._full(self.p, self.c)
        self.n_acc_p += acc_p
        self.n_acc_c += acc_c
        return acc_p, acc_c

    def state(self) -> MixtureState:
        order = np.argsort(-self.p, kind="stable")
        A = tuple(tuple(lm.space[i][r] for r in order) for lm, i in zip(self.model.loci, self.A_idx))
        return MixtureState(self.p[order].copy(), self.c, A, tuple(self.model.labels[r] for r in order))


def run_chain(case: CaseData, calibration: CalibrationBundle, config: ChainConfig,
              distances=None, model: CaseModel | None = None, prior: PriorSpec = PriorSpec(),
              progress: Callable[[int], None] | None = None) -> ChainTrace:
    """Run the sampler and record, per step, the sorted p, c, acceptance
    flags and (when the case has a POI) the log10 importance ratio."""
    model = model or CaseModel(case, calibration, distances, prior, config.warm_start,
                               config.integrator)
    s = Sampler(model, config)
    k = model.k
    P = np.empty((config.steps, k))
    C = np.empty(config.steps)
    R = np.full(config.steps, np.nan)
    AP = np.zeros(config.steps, dtype=bool)
    AC = np.zeros(config.steps, dtype=bool)
    A_trace = []
    for t in range(config.steps):
        AP[t], AC[t] = s.step()
        st = s.state()
        P[t] = st.p
        C[t] = st.c
        A_trace.append(tuple(lm.space[i] for lm, i in zip(model.loci, s.A_idx)))
        if model.has_poi and model.n_unknown > 0:
            R[t] = model.log_importance_ratio(s.full, config.union) / LN10
        if progress is not None:
            progress(t)
    return ChainTrace(P, C, R, AP, AC, config.burn_in, A_trace, model.labels, config.seed,
                      config.as_dict(), s.state())


# --------------------------------------------------------------------------
# Bayes factor

@dataclass
class BayesFactorReport:
    log10_ratios: np.ndarray
    log10_bf: float
    log10_upper_bound: float
    acceptance_p: float
    acceptance_c: float
    burn_in: int
    n_steps: int
    seed: int
    log10_bf_se_heuristic: float
    warnings: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"log10_bf": _num(self.log10_bf), "log10_upper_bound": _num(self.log10_upper_bound),
                "acceptance_p": self.acceptance_p, "acceptance_c": self.acceptance_c,
                "burn_in": self.burn_in, "n_steps": self.n_steps, "seed": self.seed,
                "log10_bf_se_heuristic": _num(self.log10_bf_se_heuristic),
                "log10_importance_ratios": [_num(x) for x in self.log10_ratios],
                "warnings": list(self.warnings), "config": self.config}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2), encoding="utf-8")


def _num(x):
    x = float(x)
    if math.isnan(x):
        return None
    if math.isinf(x):
        return "-inf" if x < 0 else "inf"
    return x


def bf_estimate(trace: ChainTrace, model: CaseModel | None = None,
                log10_upper_bound: float | None = None, warnings: Sequence[str] = ()) -> BayesFactorReport:
    """Mean of the post-burn-in importance ratios, in log10."""
    if log10_upper_bound is None:
        if model is None:
            raise ValueError("need the model or the upper bound")
        log10_upper_bound = model.log10_upper_bound
    r = trace.log10_ratio[trace.burn_in:]
    if r.size == 0:
        raise ValueError("no post-burn-in steps")
    if np.any(np.isnan(r)):
        raise ValueError("trace carries no importance ratios (no POI)")
    notes = list(warnings)
    ln = r * LN10
    if np.all(np.isneginf(ln)):
        est = -math.inf
        se = math.nan
        notes.append("every importance ratio is zero: the POI genotype has no posterior mass")
    else:
        est = (logsumexp(ln) - math.log(r.size)) / LN10
        w = np.exp(ln - ln.max())
        se = float(w.std(ddof=1) / math.sqrt(r.size) / w.mean() / LN10) if r.size > 1 else math.nan
    return BayesFactorReport(r.copy(), float(est), float(log10_upper_bound),
                             float(trace.accepted_p.mean()), float(trace.accepted_c.mean()),
                             trace.burn_in, trace.steps, trace.seed, se, notes, dict(trace.config))


# --------------------------------------------------------------------------
# decision

def decision_threshold(losses, prior_m1: float = 0.5, prior_m2: float = 0.5) -> float:
    """BF threshold above which M_1 is supported.

    ``losses[i][j]`` is the loss of choosing model i+1 when model j+1 is
    true.
    """
    L = np.asarray(losses, dtype=float)
    if L.shape != (2, 2):
        raise ValueError("losses must be a 2x2 matrix")
    if not (L[0, 1] > L[1, 1] and L[1, 0] > L[0, 0]):
        raise ValueError("need loss_12 > loss_22 and loss_21 > loss_11")
    if not (prior_m1 > 0 and prior_m2 > 0 and math.isclose(prior_m1 + prior_m2, 1.0)):
        raise ValueError("model priors must be positive and sum to 1")
    return (L[0, 1] - L[1, 1]) / (L[1, 0] - L[0, 0]) * prior_m2 / prior_m1


def decide(bf: float, losses=((0.0, 1.0), (1.0, 0.0)), prior_m1: float = 0.5,
           prior_m2: float = 0.5) -> str:
    """``"M1"`` iff the Bayes factor strictly exceeds the threshold."""
    return "M1" if bf > decision_threshold(losses, prior_m1, prior_m2) else "M2"


def decide_log10(log10_bf: float, losses=((0.0, 1.0), (1.0, 0.0)), prior_m1: float = 0.5,
                 prior_m2: float = 0.5) -> str:
    return "M1" if log10_bf > math.log10(decision_threshold(losses, prior_m1, prior_m2)) else "M2"
