"""How far is a stutter read from its parent allele?

The restricted edit distance treats gaining or losing a whole repeat unit
as a single cheap edit, while ordinary Levenshtein distance would charge
one edit per base.  The costs themselves come from a calibration: edit
probabilities are turned into distances where the artifact density equals
each probability.
"""

from mixdeconv.calibration import EditProbabilities, ParetoParams, graveyard_forward, probs_to_costs
from mixdeconv.rfl import rfl_distance

motif = "AGAT"
parent = "TCTA" + motif * 10 + "TCAT"
reads = {
    "parent": parent,
    "back stutter": "TCTA" + motif * 9 + "TCAT",
    "forward stutter": "TCTA" + motif * 11 + "TCAT",
    "double back stutter": "TCTA" + motif * 8 + "TCAT",
    "SNP in flank": "TCTA" + motif * 10 + "TCGT",
    "stutter + SNP": "TCTA" + motif * 9 + "TCGT",
}

probs = EditProbabilities(p_f=0.003, p_b=0.01, p_i=0.001, p_d=0.001, p_s=0.02)
pareto = ParetoParams(2.668, 0.513, 0.683)
costs = probs_to_costs(probs, pareto)
print("edit costs (back stutter = 1):")
for name, value in costs.as_dict().items():
    print(f"  {name:22s} {value:.3f}")

print("\ndistances from the parent:")
for label, seq in reads.items():
    d, table = rfl_distance(parent, seq, motif, costs)
    print(f"  {label:20s} d={d:6.3f}  edits (I, D, S, F, B) = {table.counts}")

# Where the edit probabilities come from: after 29 PCR cycles the chance that
# a read is still the untouched parent, carries one edit of each type, or has
# drifted further (the "graveyard" state).
mu = graveyard_forward(probs)
print("\nstate frequencies after 29 cycles:")
for name, value in zip(["parent", "forward", "back", "insert", "delete", "SNP", "graveyard"], mu):
    print(f"  {name:10s} {value:.4f}")
