import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from mixdeconv import calibration as C
from mixdeconv.core import Locus, LocusReadTable

PAPER_PARETO = C.ParetoParams(2.668, 0.513, 0.683)

probs_st = st.tuples(*[st.floats(0.0, 0.0099) for _ in range(5)])


# ---- graveyard chain ---------------------------------------------------------

def test_no_edits_stays_in_parent_state():
    mu = C.graveyard_forward(C.EditProbabilities(0, 0, 0, 0, 0))
    assert np.array_equal(mu, [1, 0, 0, 0, 0, 0, 0])


def test_equal_small_probs():
    mu = C.graveyard_forward(C.EditProbabilities(0.002, 0.002, 0.002, 0.002, 0.002))
    assert mu[0] == pytest.approx(0.99 ** 29, abs=1e-15)
    assert round(mu[0], 4) == 0.7472


@given(probs_st)
def test_closed_form_matches_matrix_power(theta):
    p = C.EditProbabilities(*theta)
    a = C.graveyard_forward(p)
    b = C.graveyard_forward(p, method="matrix")
    assert np.max(np.abs(a - b)) <= 1e-12
    assert a.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(a >= -1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_edit_prob_round_trip(seed):
    theta = np.random.default_rng(seed).uniform(0, 0.01, 5)
    fit = C.fit_edit_probs(C.graveyard_forward(C.EditProbabilities(*theta)))
    assert np.max(np.abs(fit.probs.as_array() - theta)) < 1e-4


def test_all_parent_frequencies_give_zero_probs():
    fit = C.fit_edit_probs([1, 0, 0, 0, 0, 0, 0])
    assert np.allclose(fit.probs.as_array(), 0, atol=1e-8)


def test_noisy_round_trip_residual_is_at_noise_scale():
    rng = np.random.default_rng(3)
    mu = C.graveyard_forward(C.EditProbabilities(0.003, 0.008, 0.001, 0.002, 0.005))
    noisy = np.clip(mu + rng.uniform(-1e-3, 1e-3, 7), 0, None)
    noisy /= noisy.sum()
    fit = C.fit_edit_probs(noisy)
    assert fit.residual <= 7 * (1e-3) ** 2


def test_edit_probabilities_validation():
    with pytest.raises(ValueError):
        C.EditProbabilities(-0.1, 0, 0, 0, 0)
    with pytest.raises(ValueError):
        C.EditProbabilities(0.3, 0.3, 0.3, 0.2, 0.0)


# ---- zero-inflated Pareto -----------------------------------------------------

def test_cdf_endpoints():
    assert C.pareto_cdf(0.0, PAPER_PARETO) == pytest.approx(0.683)
    assert C.pareto_cdf(1e9, PAPER_PARETO) == pytest.approx(1.0, abs=1e-12)


def test_continuous_mass():
    val, _ = quad(lambda d: C.pareto_pdf(d, PAPER_PARETO) if d > 0 else 0.0, 0, np.inf,
                  epsabs=1e-12, epsrel=1e-12)
    assert val == pytest.approx(1 - 0.683, abs=1e-8)


@given(st.floats(0.1, 10), st.floats(0.05, 5), st.floats(0, 0.99),
       st.lists(st.floats(0, 100), min_size=2, max_size=20))
def test_cdf_nondecreasing(shape, lam, rho, xs):
    p = C.ParetoParams(shape, lam, rho)
    xs = np.sort(xs)
    y = C.pareto_cdf(xs, p)
    assert np.all(np.diff(y) >= -1e-15)
    assert np.all(y >= rho - 1e-15) and np.all(y <= 1)


def test_negative_distance_rejected():
    with pytest.raises(ValueError):
        C.pareto_pdf(-1.0, PAPER_PARETO)


def test_sampler_matches_cdf():
    rng = np.random.default_rng(0)
    d = C.pareto_sample(PAPER_PARETO, 20000, rng)
    assert np.mean(d == 0) == pytest.approx(0.683, abs=0.01)
    for t in (0.5, 2.0, 8.0):
        assert np.mean(d <= t) == pytest.approx(C.pareto_cdf(t, PAPER_PARETO), abs=0.012)


# ---- probability to cost inversion ------------------------------------------

def test_density_at_unit_distance_gives_unit_cost():
    c, lam, rho = PAPER_PARETO.shape, PAPER_PARETO.rate_lambda, PAPER_PARETO.zero_mass_rho
    p_edit = (1 - rho) * c * lam * (1 + lam) ** (-(c + 1))
    assert C.cost_from_prob(p_edit, PAPER_PARETO) == pytest.approx(1.0, abs=1e-12)


def test_equal_probs_equal_costs_and_rarer_costs_more():
    costs = C.probs_to_costs(C.EditProbabilities(0.002, 0.01, 0.001, 0.002, 0.02), PAPER_PARETO)
    assert costs.cost_forward_stutter == costs.cost_delete
    assert costs.cost_insert > costs.cost_delete > costs.cost_back_stutter > costs.cost_snp
    assert costs.cost_back_stutter == 1.0


@given(probs_st.filter(lambda t: min(t) > 1e-6))
def test_inversion_consistency(theta):
    probs = C.EditProbabilities(*theta)
    raw = C.probs_to_costs(probs, PAPER_PARETO, normalize=False)
    back = [C.pareto_pdf(x, PAPER_PARETO) for x in
            (raw.cost_forward_stutter, raw.cost_back_stutter, raw.cost_insert, raw.cost_delete,
             raw.cost_snp)]
    assert np.max(np.abs(np.array(back) - probs.as_array())) <= 1e-10


def test_probability_above_peak_rejected():
    with pytest.raises(ValueError):
        C.probs_to_costs(C.EditProbabilities(0.45, 0.01, 0.01, 0.01, 0.01), PAPER_PARETO)


# ---- ECDF ---------------------------------------------------------------------

def test_all_zero_distances():
    x, y = C.locus_ecdf([0.0, 0.0, 0.0], [5, 1, 2])
    assert np.array_equal(x, [0.0]) and np.array_equal(y, [1.0])


def test_disjoint_supports_attained_rule():
    a = (np.array([0.0, 1.0]), np.array([0.5, 1.0]))
    b = (np.array([2.0, 3.0]), np.array([0.25, 1.0]))
    e = C.average_ecdfs([a, b], "attained")
    assert np.array_equal(e.support_x, [0, 1, 2, 3])
    assert np.array_equal(e.values_y, [0.5, 1.0, 0.25, 1.0])
    assert not e.is_monotone
    flat = C.average_ecdfs([a, b], "flat")
    assert np.allclose(flat.values_y, [0.25, 0.5, 0.625, 1.0])


curve = st.lists(st.tuples(st.sampled_from([0.0, 0.5, 1.0, 1.5, 2.0, 3.0]), st.integers(1, 9)),
                 min_size=1, max_size=8)


@given(st.lists(curve, min_size=1, max_size=4))
def test_flat_average_is_monotone(curves):
    ecdfs = [C.locus_ecdf([d for d, _ in c], [w for _, w in c]) for c in curves]
    e = C.average_ecdfs(ecdfs, "flat")
    assert e.is_monotone
    assert e.values_y[-1] == pytest.approx(1.0)


def test_ecdf_dkw_band():
    rng = np.random.default_rng(11)
    n = 10_000
    d = C.pareto_sample(PAPER_PARETO, n, rng)
    e = C.ecdf_from_samples(d)
    eps = math.sqrt(math.log(2 / 0.01) / (2 * n))
    assert np.max(np.abs(e.values_y - C.pareto_cdf(e.support_x, PAPER_PARETO))) <= eps


# ---- Pareto fit -----------------------------------------------------------------

def _exact_ecdf(params, xs):
    xs = np.asarray(xs, float)
    return C.AveragedEcdf(xs, C.pareto_cdf(xs, params))


@pytest.mark.parametrize("weighted", [True, False])
def test_fit_recovers_exact_curve(weighted):
    truth = C.ParetoParams(2.0, 0.5, 0.7)
    e = _exact_ecdf(truth, np.concatenate([[0.0], np.geomspace(0.05, 40, 60)]))
    fit = C.fit_pareto(e, init=C.ParetoParams(3.0, 1.0, 0.5), weighted=weighted)
    assert abs(fit.params.shape - 2.0) < 0.05
    assert abs(fit.params.rate_lambda - 0.5) < 0.05
    assert abs(fit.params.zero_mass_rho - 0.7) < 0.05
    assert fit.objective <= fit.init_objective


def test_single_jump_reports_rho_boundary():
    fit = C.fit_pareto(C.AveragedEcdf(np.array([0.0]), np.array([1.0])))
    assert "zero_mass_rho" in fit.at_boundary
    assert fit.params.zero_mass_rho > 0.999


def test_gap_weights():
    w = C.gap_weights([0.0, 1.0, 1.1, 1.2, 5.0])
    assert w.mean() == pytest.approx(1.0)
    assert w[2] > w[0] and w[2] > w[4]


# ---- calibration loop --------------------------------------------------------

def graveyard_corpus(theta, n=200_000, n_loci=3):
    """Training loci whose graveyard-state doc totals are the expected counts
    under ``theta``: one child per single-edit type and several two-edit
    children sharing the G mass."""
    mu = C.graveyard_forward(C.EditProbabilities(*theta))
    counts = np.round(mu * n).astype(int)
    m = "AGAT"
    out = []
    for li in range(n_loci):
        L, R = "TCGCG" + "GC"[li % 2], "CG" + "GC"[li % 2] + "GCT"
        P = L + m * (6 + li) + R
        snp = L + m * (6 + li) + R[:2] + "A" + R[3:]
        kids = [L + m * (7 + li) + R, L + m * (5 + li) + R, L[:3] + "T" + L[3:] + m * (6 + li) + R,
                L[:2] + L[3:] + m * (6 + li) + R, snp]
        g = [L + m * (4 + li) + R, L + m * (8 + li) + R, snp[:-1] + "A", "A" + L[1:] + m * (5 + li) + R]
        per = np.full(len(g), counts[6] // len(g))
        per[0] += counts[6] - per.sum()
        rows = [(P, counts[0])] + list(zip(kids, counts[1:6])) + list(zip(g, per))
        out.append(LocusReadTable(Locus(f"L{li}", m), tuple((s, int(c)) for s, c in rows)))
    return out


@pytest.fixture(scope="module")
def calibrated():
    theta = (0.003, 0.01, 0.001, 0.0015, 0.004)
    corpus = graveyard_corpus(theta)
    return theta, corpus, C.calibrate(corpus)


def test_calibration_recovers_edit_probs(calibrated):
    theta, corpus, bundle = calibrated
    assert np.max(np.abs(bundle.probs.as_array() - theta)) < 1e-4
    assert bundle.costs.cost_back_stutter == 1.0
    assert bundle.provenance["corpus_hash"] == C.corpus_hash(corpus)


def test_restart_from_fixed_point_takes_no_rounds(calibrated):
    _, corpus, bundle = calibrated
    again = C.calibrate(corpus, init=bundle)
    assert again.provenance["iterations"] == 0
    a, b = again.costs.as_dict(), bundle.costs.as_dict()
    assert all(abs(a[key] - b[key]) < 1e-6 for key in a)


def test_bundle_json_round_trip(calibrated, tmp_path):
    bundle = calibrated[2]
    bundle.save(tmp_path / "b.json")
    back = C.CalibrationBundle.load(tmp_path / "b.json")
    assert back.probs == bundle.probs and back.costs == bundle.costs and back.pareto == bundle.pareto
    assert np.array_equal(back.ecdf.values_y, bundle.ecdf.values_y)
    json.loads((tmp_path / "b.json").read_text())


def test_empty_corpus():
    with pytest.raises(ValueError):
        C.calibrate([])


def test_ambiguous_parent():
    t = LocusReadTable(Locus("L", "AGAT"), (("AGAT", 5), ("AGATAGAT", 5)))
    with pytest.raises(ValueError):
        C.training_parent(t)
    assert C.training_parent(t, tie_break=True) == "AGAT"
