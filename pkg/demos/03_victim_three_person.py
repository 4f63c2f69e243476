"""A three-person mixture with a known victim.

The victim's genotype is fixed in both hypotheses, so the sampler only has
to place the POI and one unknown.  The preset mirrors the published
three-person runs: 350 steps, 50 burn-in, proposal concentration 70.
"""

import warnings

from mixdeconv import inference, mixsim

warnings.simplefilter("ignore")
cal = mixsim.default_calibration()
steps, burn, alpha = inference.PRESETS["scenario-3mix-victim"]

for present in (True, False):
    sc = mixsim.make_synthetic_case(4, (0.25, 0.35, 0.40), seed=2, poi_present=present, victim=True)
    case = sc.case(0.0025, 6)
    model = inference.CaseModel(case, cal)
    trace = inference.run_chain(case, cal, inference.ChainConfig(steps, burn, seed=0, alpha_p=alpha),
                                model=model)
    report = inference.bf_estimate(trace, model)
    state = ", ".join(f"{k}={v:.2f}" for k, v in zip(trace.final_state.labels, trace.final_state.p))
    print(f"POI {'present' if present else 'absent'}: log10 BF {report.log10_bf:9.2f} (final state {state})")
