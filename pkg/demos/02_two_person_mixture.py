"""Is the person of interest in this two-person mixture?

We simulate a five-locus mixture at 30:70, once with the person of interest
(POI) as the minor contributor and once with a POI who is not in it, and
estimate the Bayes factor for "POI + unknown" against "two unknowns".
"""

import warnings

from mixdeconv import inference, mixsim

warnings.simplefilter("ignore")  # catalog threshold notes are expected here
cal = mixsim.default_calibration()

for present in (True, False):
    sc = mixsim.make_synthetic_case(5, (0.3, 0.7), seed=4, poi_present=present)
    case = sc.case(catalog_threshold=0.0025, max_alleles=6)
    print(f"POI {'in' if present else 'not in'} the mixture; catalog sizes",
          [len(cat) for _, cat in case.loci])

    model = inference.CaseModel(case, cal)
    config = inference.ChainConfig(steps=300, burn_in=50, seed=1, alpha_p=25)
    trace = inference.run_chain(case, cal, config, model=model)
    report = inference.bf_estimate(trace, model)

    p_mean = trace.p[trace.burn_in:].mean(axis=0)
    print(f"  posterior mean p = {p_mean.round(3)}  (truth, sorted: {sorted(sc.p_mix, reverse=True)})")
    print(f"  log10 BF = {report.log10_bf:.2f}, ceiling {report.log10_upper_bound:.2f}")
    print(f"  acceptance: p {report.acceptance_p:.2f}, c {report.acceptance_c:.2f}")
    print(f"  decision with symmetric losses: {inference.decide_log10(report.log10_bf)}\n")

# The ceiling is -log10 of the POI genotype's prior probability: no amount of
# data can push the Bayes factor above the rarity of the profile itself.
