"""Per-locus marginal likelihood.

For a genotype matrix ``A`` (k rows, one genotype each) and mixing
proportions ``p`` the theoretical allele proportions are ``q = A^T p``.  Allele
proportions in the sample are modelled with a Dirichlet of parameter
``u = c * q`` on the support of ``q``, written through the softmax map
``a -> p(a)`` together with a normal density on ``sum(a)``.  The integrand is

    G(a) = h(sum a) * prod_t p(a)_t**u_t / (Z_Dir(u) / I)
           * prod_m ( sum_j p(a)_j f(d_jm) / C_j(d_jm) )**n_m

with ``I`` the support size and ``n_m`` the doc of observed sequence ``m``.
``laplace_integral`` approximates ``log \\int G``.  Two optimizers are
available: the derivative-free Nelder-Mead search with a finite-difference
Hessian, and a Newton iteration on the closed-form gradient and Hessian
(the default used by the sampler, much faster, same optimum).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numba
import numpy as np
from scipy.optimize import minimize
from scipy.special import gammaln, logsumexp

from .calibration import ParetoParams, pareto_logpdf

LOG_2PI = math.log(2.0 * math.pi)
MAX_CONDITION = 1e12

Genotype = tuple[int, int]


# --------------------------------------------------------------------------
# genotype matrices

def genotypes(J: int) -> list[Genotype]:
    """All J(J+1)/2 genotypes over J alleles, lexicographic."""
    return [(a, b) for a in range(J) for b in range(a, J)]


def genotype_row(g: Genotype, J: int) -> np.ndarray:
    row = np.zeros(J)
    row[g[0]] += 0.5
    row[g[1]] += 0.5
    return row


@dataclass(frozen=True)
class GenotypeMatrix:
    """k x J matrix over {0, 1/2, 1}, stored as one genotype per row."""

    rows: tuple[Genotype, ...]
    J: int

    def __post_init__(self):
        rows = tuple((min(a, b), max(a, b)) for a, b in self.rows)
        for a, b in rows:
            if not (0 <= a < self.J and 0 <= b < self.J):
                raise ValueError(f"genotype {(a, b)} out of range for J={self.J}")
        object.__setattr__(self, "rows", rows)

    @property
    def array(self) -> np.ndarray:
        return np.stack([genotype_row(g, self.J) for g in self.rows])

    def allele_proportions(self, p) -> np.ndarray:
        return allele_proportions(self.rows, p, self.J)


def allele_proportions(rows: Sequence[Genotype], p, J: int) -> np.ndarray:
    """``q = A^T p``."""
    q = np.zeros(J)
    for (a, b), pi in zip(rows, p):
        q[a] += 0.5 * pi
        q[b] += 0.5 * pi
    return q


def matrix_space(J: int, k: int, fixed: Mapping[int, Genotype] | None = None) -> list[tuple[Genotype, ...]]:
    """All genotype matrices with the given rows held fixed.

    Unknown rows vary independently over :func:`genotypes`; the product is
    taken in lexicographic order so enumeration is deterministic.
    """
    fixed = dict(fixed or {})
    choices = [[tuple(sorted(fixed[i]))] if i in fixed else genotypes(J) for i in range(k)]
    return [tuple(m) for m in itertools.product(*choices)]


# --------------------------------------------------------------------------
# softmax-Dirichlet density

def softmax(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    e = np.exp(a - a.max())
    return e / e.sum()


def log_dirichlet_norm(u) -> float:
    """``log Z_Dir(u) = sum log Gamma(u_t) - log Gamma(sum u)``."""
    u = np.asarray(u, dtype=float)
    return float(gammaln(u).sum() - gammaln(u.sum()))


def softmax_dirichlet_logpdf(a, u) -> float:
    """Log density of the softmax-Dirichlet reparametrization at ``a``.

    ``h(sum a) * prod p(a)_t**u_t / (Z_Dir(u) / I)`` with ``h`` the
    N(0, I) density and ``I = len(u)``.
    """
    a = np.asarray(a, dtype=float)
    u = np.asarray(u, dtype=float)
    if a.shape != u.shape or a.ndim != 1:
        raise ValueError("a and u must be vectors of equal length")
    if np.any(u <= 0) or not np.all(np.isfinite(u)):
        raise ValueError("Dirichlet parameters must be positive and finite")
    I = a.size
    S = a.sum()
    log_h = -S * S / (2.0 * I) - 0.5 * math.log(2.0 * math.pi * I)
    log_p = a - logsumexp(a)
    return float(log_h + u @ log_p - log_dirichlet_norm(u) + math.log(I))


# --------------------------------------------------------------------------
# per-locus data

def _merge_identical_columns(lw: np.ndarray, docs: np.ndarray):
    """Sum the docs of reads whose log-weight columns are identical."""
    if lw.shape[1] == 0:
        return lw, docs
    cols = np.ascontiguousarray(lw.T)
    _, first, inv = np.unique(cols.view(np.dtype((np.void, cols.dtype.itemsize * cols.shape[1]))).ravel(),
                              return_index=True, return_inverse=True)
    merged = np.bincount(inv.ravel(), weights=docs, minlength=first.size)
    order = np.argsort(first)
    return np.ascontiguousarray(lw[:, first[order]]), merged[order]


@dataclass
class LocusData:
    """Everything about one locus that does not depend on (p, c, A).

    ``lw[j, m] = log f(d_jm) - log C_j(d_jm)``; reads with identical
    columns are merged.  Restrictions to an allele support are cached.
    """

    name: str
    lw: np.ndarray  # (J, M)
    docs: np.ndarray  # (M,) float

    def __post_init__(self):
        self.lw = np.ascontiguousarray(self.lw, dtype=np.float64)
        self.docs = np.asarray(self.docs, dtype=np.float64)
        self._support_cache: dict[tuple[int, ...], tuple[np.ndarray, np.ndarray]] = {}

    @property
    def J(self) -> int:
        return self.lw.shape[0]

    @property
    def total_doc(self) -> float:
        return float(self.docs.sum())

    @classmethod
    def from_arrays(cls, name, dist, counts, docs, pareto: ParetoParams, compress: bool = True):
        dist = np.asarray(dist, dtype=float)
        logc = np.vectorize(lambda x: math.log(int(x)), otypes=[float])(np.asarray(counts, dtype=object)) \
            if np.asarray(counts).dtype == object else np.log(np.asarray(counts, dtype=float))
        lw = pareto_logpdf(dist, pareto) - logc
        docs = np.asarray(docs, dtype=float)
        if compress:
            lw, docs = _merge_identical_columns(lw, docs)
        return cls(name, lw, docs)

    @classmethod
    def from_distances(cls, ld, reads, pareto: ParetoParams, compress: bool = True):
        """From a :class:`~mixdeconv.rfl.LocusDistances` and its read table."""
        return cls.from_arrays(ld.locus, ld.dist, ld.counts, reads.docs, pareto, compress)

    def restrict(self, support: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
        """Rows of ``lw`` on ``support`` with identical columns merged."""
        hit = self._support_cache.get(support)
        if hit is None:
            hit = _merge_identical_columns(self.lw[list(support)], self.docs)
            self._support_cache[support] = hit
        return hit


@dataclass(frozen=True)
class LikelihoodContext:
    """(p, c, A) at one locus together with the locus data."""

    p: np.ndarray
    c: float
    rows: tuple[Genotype, ...]
    locus: LocusData

    @property
    def q(self) -> np.ndarray:
        return allele_proportions(self.rows, self.p, self.locus.J)

    @property
    def support(self) -> tuple[int, ...]:
        return tuple(int(j) for j in np.flatnonzero(self.q > 0))

    @property
    def q_nonzero(self) -> np.ndarray:
        q = self.q
        return q[q > 0]

    @property
    def u(self) -> np.ndarray:
        return self.c * self.q_nonzero

    def problem(self):
        lw, n = self.locus.restrict(self.support)
        return self.u, lw, n


def log_G(a, ctx: LikelihoodContext) -> float:
    u, lw, n = ctx.problem()
    return log_G_raw(np.asarray(a, dtype=float), u, lw, n)


def log_G_raw(a, u, lw, n) -> float:
    a = np.asarray(a, dtype=float)
    prior = softmax_dirichlet_logpdf(a, u)
    log_p = a - logsumexp(a)
    mix = logsumexp(log_p[:, None] + lw, axis=0)
    return float(prior + n @ mix)


# --------------------------------------------------------------------------
# Laplace approximation

@dataclass(frozen=True)
class LaplaceResult:
    log_value: float
    argmax: np.ndarray
    converged: bool
    hessian_log_det: float
    n_iter: int = 0


def _failed(a, n_iter=0) -> LaplaceResult:
    return LaplaceResult(-math.inf, np.asarray(a, dtype=float), False, math.nan, n_iter)


def fd_hessian(fun, x, step: float = 1e-4) -> np.ndarray:
    """Central finite-difference Hessian, symmetrized."""
    x = np.asarray(x, dtype=float)
    d = x.size
    H = np.empty((d, d))
    f0 = fun(x)
    E = np.eye(d) * step
    for i in range(d):
        H[i, i] = (fun(x + E[i]) - 2.0 * f0 + fun(x - E[i])) / step ** 2
        for j in range(i + 1, d):
            H[i, j] = (fun(x + E[i] + E[j]) - fun(x + E[i] - E[j])
                       - fun(x - E[i] + E[j]) + fun(x - E[i] - E[j])) / (4.0 * step ** 2)
            H[j, i] = H[i, j]
    return 0.5 * (H + H.T)


def _laplace_from_hessian(fmax, a, H, n_iter) -> LaplaceResult:
    negH = -0.5 * (H + H.T)
    if not np.all(np.isfinite(negH)):
        return _failed(a, n_iter)
    eig = np.linalg.eigvalsh(negH)
    if eig[0] <= 0 or eig[-1] / eig[0] > MAX_CONDITION:
        return _failed(a, n_iter)
    logdet = float(np.sum(np.log(eig)))
    d = a.size
    return LaplaceResult(float(fmax + 0.5 * d * LOG_2PI - 0.5 * logdet), a, True, logdet, n_iter)


def laplace_approx(fun, x0, maxiter: int = 80000, step: float = 1e-4,
                   xatol: float = 1e-8, fatol: float = 1e-10) -> LaplaceResult:
    """Laplace approximation of ``log \\int exp(fun)``.

    Maximizes ``fun`` by Nelder-Mead from ``x0``; the Hessian comes from
    central finite differences.  A failed search or a Hessian that is not
    safely negative definite gives ``log_value = -inf``.
    """
    x0 = np.asarray(x0, dtype=float)
    res = minimize(lambda x: -fun(x), x0, method="Nelder-Mead",
                   options={"maxiter": maxiter, "maxfev": 4 * maxiter, "xatol": xatol,
                            "fatol": fatol, "adaptive": x0.size > 2})
    if not res.success or not np.isfinite(res.fun):
        return _failed(res.x, int(res.nit))
    return _laplace_from_hessian(-res.fun, res.x, fd_hessian(fun, res.x, step), int(res.nit))


def _scaled_weights(lw):
    """``exp(lw - colmax)`` and the column maxima."""
    lw = np.asarray(lw, dtype=float)
    top = lw.max(axis=0) if lw.shape[1] else np.zeros(0)
    return np.ascontiguousarray(np.exp(lw - top)), top


@numba.njit(cache=True)
def _log_g_const(u):
    I = u.shape[0]
    lz = -math.lgamma(u.sum())
    for t in range(I):
        lz += math.lgamma(u[t])
    return -0.5 * math.log(2.0 * math.pi * I) - lz + math.log(I)


@numba.njit(cache=True, fastmath={"reassoc", "contract"})
def _eval(a, u, W, n, const, e, g, H, buf):
    """log G (without the sum of n_m * colmax_m) with gradient and Hessian.

    ``W`` holds the read weights scaled so each column's maximum is 1 and
    ``buf`` is a (2, M) work array.  The read term of the Hessian is
    e_i e_j sum_m W_im W_jm n_m / z_m^2, so every inner loop runs along m.
    """
    I = a.shape[0]
    M = W.shape[1]
    U = 0.0
    for t in range(I):
        U += u[t]
    N = 0.0
    for m in range(M):
        N += n[m]
    S = 0.0
    amax = a[0]
    for t in range(I):
        S += a[t]
        if a[t] > amax:
            amax = a[t]
    se = 0.0
    for t in range(I):
        e[t] = math.exp(a[t] - amax)
        se += e[t]
    la = amax + math.log(se)
    f = const - S * S / (2.0 * I) - (U + N) * la + N * amax
    for t in range(I):
        f += u[t] * a[t]
        g[t] = u[t] - (U + N) * e[t] / se - S / I
    for i in range(I):
        si = e[i] / se
        for j in range(I):
            H[i, j] = -1.0 / I + (U + N) * si * e[j] / se
        H[i, i] -= (U + N) * si
    q = buf[0]
    r = buf[1]
    for m in range(M):
        q[m] = 0.0
    for t in range(I):
        et = e[t]
        for m in range(M):
            q[m] += et * W[t, m]
    for m in range(M):
        z = q[m]
        if z <= 0.0:
            return -np.inf
        f += n[m] * math.log(z)
        q[m] = n[m] / z
        r[m] = q[m] / z
    for i in range(I):
        s = 0.0
        for m in range(M):
            s += W[i, m] * q[m]
        v = e[i] * s
        g[i] += v
        H[i, i] += v
        for j in range(i, I):
            s = 0.0
            for m in range(M):
                s += W[i, m] * W[j, m] * r[m]
            H[i, j] -= e[i] * e[j] * s
    for i in range(I):
        for j in range(i):
            H[i, j] = H[j, i]
    return f


@numba.njit(cache=True)
def _cholesky(A, Lc):
    """Lower Cholesky factor into ``Lc``; False if not positive definite."""
    I = A.shape[0]
    for i in range(I):
        for j in range(i + 1):
            acc = A[i, j]
            for k in range(j):
                acc -= Lc[i, k] * Lc[j, k]
            if i == j:
                if acc <= 0.0 or not np.isfinite(acc):
                    return False
                Lc[i, i] = math.sqrt(acc)
            else:
                Lc[i, j] = acc / Lc[j, j]
        for j in range(i + 1, I):
            Lc[i, j] = 0.0
    return True


@numba.njit(cache=True)
def _chol_solve(Lc, b, x):
    I = b.shape[0]
    for i in range(I):
        acc = b[i]
        for k in range(i):
            acc -= Lc[i, k] * x[k]
        x[i] = acc / Lc[i, i]
    for i in range(I - 1, -1, -1):
        acc = x[i]
        for k in range(i + 1, I):
            acc -= Lc[k, i] * x[k]
        x[i] = acc / Lc[i, i]


@numba.njit(cache=True)
def _inv_trace(Lc):
    """trace(A^-1) = squared Frobenius norm of L^-1, for A = L L^T."""
    I = Lc.shape[0]
    col = np.empty(I)
    tot = 0.0
    for c in range(I):
        for i in range(I):
            acc = 1.0 if i == c else 0.0
            for k in range(i):
                acc -= Lc[i, k] * col[k]
            col[i] = acc / Lc[i, i]
            tot += col[i] * col[i]
    return tot


@numba.njit(cache=True)
def _sym_eigvals(A):
    """Eigenvalues of a small symmetric matrix by cyclic Jacobi rotations."""
    I = A.shape[0]
    B = A.copy()
    for _ in range(100):
        off = 0.0
        scale = 0.0
        for i in range(I):
            scale += B[i, i] * B[i, i]
            for j in range(i + 1, I):
                off += B[i, j] * B[i, j]
        if off <= 1e-30 * scale or off == 0.0:
            break
        for p in range(I - 1):
            for q in range(p + 1, I):
                if B[p, q] == 0.0:
                    continue
                theta = (B[q, q] - B[p, p]) / (2.0 * B[p, q])
                t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                for k in range(I):
                    bkp = B[k, p]
                    bkq = B[k, q]
                    B[k, p] = c * bkp - s * bkq
                    B[k, q] = s * bkp + c * bkq
                for k in range(I):
                    bpk = B[p, k]
                    bqk = B[q, k]
                    B[p, k] = c * bpk - s * bqk
                    B[q, k] = s * bpk + c * bqk
    out = np.empty(I)
    for i in range(I):
        out[i] = B[i, i]
    return np.sort(out)


@numba.njit(cache=True)
def _workspace(imax, mmax):
    return np.empty((5, imax)), np.empty((4, imax, imax)), np.empty((2, mmax))


@numba.njit(cache=True)
def _newton(u, W, n, a0, maxit, max_cond):
    """Damped Newton ascent on log G followed by the Laplace formula.

    Returns (log value without the colmax offset, argmax, log det(-H),
    converged, iterations).  Iteration stops once half the Newton decrement
    drops below 1e-8, i.e. the value is within that of the maximum.
    """
    a = a0.copy()
    vec, mat, buf = _workspace(a.shape[0], W.shape[1])
    return _newton_ws(u, W, n, a, maxit, max_cond, vec, mat, buf)


@numba.njit(cache=True)
def _newton_ws(u, W, n, a, maxit, max_cond, vec, mat, buf):
    """:func:`_newton` on caller-owned work arrays; ``a`` is updated in place."""
    I = a.shape[0]
    const = _log_g_const(u)
    e, g, gt, delta, cand = vec[0, :I], vec[1, :I], vec[2, :I], vec[3, :I], vec[4, :I]
    H, Ht, negH, Lc = mat[0, :I, :I], mat[1, :I, :I], mat[2, :I, :I], mat[3, :I, :I]
    buf = buf[:, :W.shape[1]]
    scale = 1.0 + u.sum() + n.sum()
    f = _eval(a, u, W, n, const, e, g, H, buf)
    if not np.isfinite(f):
        return -np.inf, a, np.nan, False, 0
    it = 0
    ok = False
    for it in range(1, maxit + 1):
        mu = 0.0
        solved = False
        for _ in range(80):
            for i in range(I):
                for j in range(I):
                    negH[i, j] = -H[i, j]
                negH[i, i] += mu
            if _cholesky(negH, Lc):
                solved = True
                break
            mu = max(4.0 * mu, 1e-8 * scale)
        if not solved:
            break
        _chol_solve(Lc, g, delta)
        dec = 0.0
        for i in range(I):
            dec += g[i] * delta[i]
        if mu == 0.0 and 0.5 * dec < 1e-8:
            ok = True
            break
        step = 1.0
        accepted = False
        for _ in range(60):
            for i in range(I):
                cand[i] = a[i] + step * delta[i]
            fc = _eval(cand, u, W, n, const, e, gt, Ht, buf)
            if fc >= f - 1e-13 * abs(f):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        a[:] = cand
        g[:] = gt
        H[:, :] = Ht
        f = fc
    if not ok:
        return f, a, np.nan, False, it
    for i in range(I):
        for j in range(I):
            negH[i, j] = -0.5 * (H[i, j] + H[j, i])
    if not _cholesky(negH, Lc):
        return f, a, np.nan, False, it
    # tr(A) tr(A^-1) bounds the condition number; eigenvalues only when it is inconclusive
    tr = 0.0
    for i in range(I):
        tr += negH[i, i]
    if tr * _inv_trace(Lc) > max_cond:
        eig = _sym_eigvals(negH)
        if eig[0] <= 0.0 or eig[I - 1] / eig[0] > max_cond:
            return f, a, np.nan, False, it
    logdet = 0.0
    for i in range(I):
        logdet += 2.0 * math.log(Lc[i, i])
    return f, a, logdet, True, it


def laplace_newton(u, lw, n, a0=None, maxit: int = 200) -> LaplaceResult:
    u = np.asarray(u, dtype=float)
    n = np.asarray(n, dtype=float)
    W, top = _scaled_weights(lw)
    a0 = np.log(u) if a0 is None else np.asarray(a0, dtype=float)
    f, a, logdet, ok, it = _newton(u, W, n, a0.copy(), maxit, MAX_CONDITION)
    if not ok:
        return _failed(a, it)
    d = u.size
    val = f + float(n @ top) + 0.5 * d * LOG_2PI - 0.5 * logdet
    return LaplaceResult(float(val), a, True, float(logdet), it)


def laplace_integral(ctx: LikelihoodContext, method: str = "newton", a0=None) -> LaplaceResult:
    """Laplace approximation of ``log \\int G(a) da`` at one locus.

    ``method="nelder-mead"`` runs the derivative-free search (80,000
    iterations at most, started at ``ln(c q_nonzero)``) with a
    finite-difference Hessian (step 1e-4).  ``method="newton"`` uses the
    closed-form gradient and Hessian.
    """
    u, lw, n = ctx.problem()
    if np.any(u <= 0) or not np.all(np.isfinite(u)):
        raise ValueError("Dirichlet parameters must be positive and finite")
    if method == "newton":
        return laplace_newton(u, lw, n, a0)
    if method == "nelder-mead":
        start = np.log(u) if a0 is None else np.asarray(a0, float)
        return laplace_approx(lambda a: log_G_raw(a, u, lw, n), start)
    raise ValueError(f"unknown method {method!r}")


# --------------------------------------------------------------------------
# batched evaluation over a matrix space

@numba.njit(cache=True)
def _batch(sup_id, u_pad, a_pad, sizes, w_off, w_buf, n_off, n_buf, m_of, offset,
           out_val, out_conv, maxit, max_cond):
    B = sup_id.shape[0]
    vec, mat, buf = _workspace(u_pad.shape[1], m_of.max() if m_of.size else 1)
    for b in range(B):
        s = sup_id[b]
        I = sizes[s]
        M = m_of[s]
        W = w_buf[w_off[s]:w_off[s] + I * M].reshape((I, M))
        n = n_buf[n_off[s]:n_off[s] + M]
        f, a, logdet, ok, it = _newton_ws(u_pad[b, :I], W, n, a_pad[b, :I], maxit, max_cond, vec, mat, buf)
        out_conv[b] = ok
        if ok:
            out_val[b] = f + offset[s] + 0.5 * I * math.log(2.0 * math.pi) - 0.5 * logdet
        else:
            out_val[b] = -np.inf


class LocusEvaluator:
    """Laplace log-integrals for every matrix of a fixed space at one locus.

    Support-restricted read tables are packed once; :meth:`evaluate` then
    solves all matrices for a given (p, c) in one compiled loop.  With
    ``warm=True`` each matrix starts from its previous optimum instead of
    ``ln(c q_nonzero)``.
    """

    def __init__(self, locus: LocusData, space: Sequence[tuple[Genotype, ...]], warm: bool = False):
        self.locus = locus
        self.space = list(space)
        self.warm = warm
        self._index = {m: i for i, m in enumerate(self.space)}
        J = locus.J
        supports = []
        sup_key: dict[tuple[int, ...], int] = {}
        self._sup_of = np.empty(len(self.space), dtype=np.int64)
        for i, rows in enumerate(self.space):
            key = tuple(sorted({a for g in rows for a in g}))
            if key not in sup_key:
                sup_key[key] = len(supports)
                supports.append(key)
            self._sup_of[i] = sup_key[key]
        self.supports = supports
        lw_parts, n_parts, sizes, ms, offs = [], [], [], [], []
        for key in supports:
            lw, n = locus.restrict(key)
            W, top = _scaled_weights(lw)
            lw_parts.append(W.ravel())
            n_parts.append(n)
            sizes.append(len(key))
            ms.append(lw.shape[1])
            offs.append(float(n @ top))
        self._offset = np.array(offs)
        self._sizes = np.array(sizes, dtype=np.int64)
        self._m = np.array(ms, dtype=np.int64)
        self._lw_off = np.concatenate([[0], np.cumsum([x.size for x in lw_parts])]).astype(np.int64)
        self._n_off = np.concatenate([[0], np.cumsum(ms)]).astype(np.int64)
        self._lw_buf = np.concatenate(lw_parts) if lw_parts else np.zeros(0)
        self._n_buf = np.concatenate(n_parts) if n_parts else np.zeros(0)
        self._imax = max(sizes) if sizes else 1
        # alleles of each matrix in support order, with their row weights
        k = len(self.space[0]) if self.space else 0
        self._w = np.zeros((len(self.space), self._imax, k))
        for i, rows in enumerate(self.space):
            key = supports[self._sup_of[i]]
            pos = {a: t for t, a in enumerate(key)}
            for r, (a, b) in enumerate(rows):
                self._w[i, pos[a], r] += 0.5
                self._w[i, pos[b], r] += 0.5
        self._a = None
        self.J = J

    def index(self, rows) -> int:
        return self._index[tuple(rows)]

    def u_matrix(self, p, c) -> np.ndarray:
        return c * (self._w @ np.asarray(p, dtype=float))

    def evaluate(self, p, c, which=None, maxit: int = 200) -> np.ndarray:
        """Log Laplace integrals for matrices ``which`` (default: all)."""
        if which is None:
            idx = np.arange(len(self.space))
            u = self.u_matrix(p, c)
        else:
            idx = np.asarray(which, dtype=np.int64)
            u = c * (self._w[idx] @ np.asarray(p, dtype=float))
        if np.any(u[self._mask(idx)] <= 0):
            raise ValueError("mixing proportions must be positive")
        u_safe = np.where(u > 0, u, 1.0)
        if self.warm and self._a is not None:
            a0 = self._a[idx].copy()
        else:
            a0 = np.log(u_safe)
        vals = np.empty(idx.size)
        conv = np.empty(idx.size, dtype=np.bool_)
        _batch(self._sup_of[idx], np.ascontiguousarray(u_safe), a0, self._sizes, self._lw_off,
               self._lw_buf, self._n_off, self._n_buf, self._m, self._offset, vals, conv, maxit,
               MAX_CONDITION)
        if self.warm:
            if self._a is None:
                u_all = self.u_matrix(p, c)
                self._a = np.log(np.where(u_all > 0, u_all, 1.0))
            self._a[idx[conv]] = a0[conv]
        return vals

    def _mask(self, idx):
        sizes = self._sizes[self._sup_of[idx]]
        return np.arange(self._imax)[None, :] < sizes[:, None]


# --------------------------------------------------------------------------
# exact integral (small problems)

class ExactIntegrator:
    """Exact ``log \\int G`` for small read totals.

    Mapping ``a`` back to the simplex turns the integral into
    ``E_{r ~ Dir(u)} prod_m (sum_t r_t w_tm)**n_m``.  The product is
    expanded once into a polynomial in ``r`` (it does not depend on ``u``),
    after which each evaluation is a sum of Dirichlet moments.  Docs must be
    integers.
    """

    def __init__(self, lw, n):
        lw = np.asarray(lw, dtype=float)
        n = np.asarray(n)
        if not np.allclose(n, np.round(n)):
            raise ValueError("docs must be integers")
        n = np.round(n).astype(int)
        I, M = lw.shape
        N = int(n.sum())
        if math.comb(N + I - 1, I - 1) > 5_000_000:
            raise ValueError("problem too large for exact expansion")
        self.I, self.N = I, N
        top = lw.max(axis=0)
        self.log_scale = float(n @ top)
        w = np.exp(lw - top)
        poly = np.zeros((N + 1,) * I)
        poly[(0,) * I] = 1.0
        for m in range(M):
            for _ in range(n[m]):
                new = np.zeros_like(poly)
                for t in range(I):
                    src = [slice(None)] * I
                    dst = [slice(None)] * I
                    src[t] = slice(0, N)
                    dst[t] = slice(1, N + 1)
                    new[tuple(dst)] += w[t, m] * poly[tuple(src)]
                poly = new
        idx = np.argwhere(poly > 0)
        idx = idx[idx.sum(axis=1) == N]
        self.exponents = idx
        self.log_coef = np.log(poly[tuple(idx.T)])

    def log_integral(self, u) -> float:
        u = np.asarray(u, dtype=float)
        lm = (gammaln(u.sum()) - gammaln(u.sum() + self.N)
              + (gammaln(u[None, :] + self.exponents) - gammaln(u)[None, :]).sum(axis=1))
        return float(self.log_scale + logsumexp(self.log_coef + lm))


def exact_log_integral(ctx: LikelihoodContext) -> float:
    u, lw, n = ctx.problem()
    return ExactIntegrator(lw, n).log_integral(u)


class ExactEvaluator(LocusEvaluator):
    """Drop-in replacement for :class:`LocusEvaluator` that integrates
    exactly with :class:`ExactIntegrator`.  Only practical when every read
    table has a small integer doc total."""

    def __init__(self, locus: LocusData, space: Sequence[tuple[Genotype, ...]], warm: bool = False):
        super().__init__(locus, space, warm=False)
        self._integrators = [ExactIntegrator(*locus.restrict(key)) for key in self.supports]

    def evaluate(self, p, c, which=None, maxit: int = 200) -> np.ndarray:
        if which is None:
            idx = np.arange(len(self.space))
            u = self.u_matrix(p, c)
        else:
            idx = np.asarray(which, dtype=np.int64)
            u = c * (self._w[idx] @ np.asarray(p, dtype=float))
        if np.any(u[self._mask(idx)] <= 0):
            raise ValueError("mixing proportions must be positive")
        out = np.empty(idx.size)
        for t, i in enumerate(idx):
            s = self._sup_of[i]
            out[t] = self._integrators[s].log_integral(u[t, :self._sizes[s]])
        return out
