"""A small factorial experiment, as the `grid` subcommand runs it.

Two proportions, two seeds, POI in and out: eight reports plus a summary
table that any plotting tool can read.
"""

import sys
import tempfile
from pathlib import Path

from mixdeconv.cli import run_grid

spec = {"proportions": [0.25, 0.75], "seeds": [0, 1], "poi_present": [True, False],
        "n_loci": 3, "max_alleles": 5, "steps": 150, "burn_in": 30, "alpha_p": 25}
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="grid_"))
rows = run_grid(spec, out)
print((out / "summary.tsv").read_text())
present = [r["log10_bf"] for r in rows if r["poi_present"]]
absent = [r["log10_bf"] for r in rows if not r["poi_present"]]
print(f"smallest POI-present log10 BF {min(present):.2f}; largest POI-absent {max(absent):.2f}")
