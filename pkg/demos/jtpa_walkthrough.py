"""Job-training effects on unemployment duration (JTPA).

Needs the JTPA extract. Fetch it once with

    csforest fetch-jtpa --output data/jtpa.csv

then run  python demos/jtpa_walkthrough.py [path]. The outcome is days until
re-employment, truncated at two years, so a positive effect means the
program *lengthened* unemployment. Treatment is relabeled so that W = 1
marks the control group, matching the usual presentation.
"""

import sys
import time
from pathlib import Path

from csforest import csf
from csforest.cli import top_fraction_mask
from csforest.dataset import JTPA_SCHEMA, group_covariate_means, load_csv, relabel_treatment
from csforest.inference import average_treatment_effect, best_linear_projection, dr_scores, rate

path = Path(sys.argv[1] if len(sys.argv) > 1 else "data/jtpa.csv")
if not path.is_file():
    sys.exit(f"{path} not found; run `csforest fetch-jtpa --output {path}` first")

ds = relabel_treatment(load_csv(path, JTPA_SCHEMA))
print(f"{ds.n} participants, {ds.censoring_rate:.0%} censored")

start = time.perf_counter()
model = csf.fit(ds, csf.CsfParams(horizon=720, w_hat=float(ds.w.mean())))
print(f"fit in {time.perf_counter() - start:.0f}s")

scores = dr_scores(model)
ate = average_treatment_effect(scores)
print(f"\nATE: {ate.estimate:.1f} days (std.err {ate.std_err:.1f})")

tau = csf.predict_cate(model)
print("\n" + best_linear_projection(scores, ds.x, ds.names).table())

res = rate(scores, tau)
print(f"\nAUTOC: {res.autoc_estimate:.2f} +/- {1.96 * res.std_err:.2f}")

top = top_fraction_mask(tau, 0.2)
full, best = group_covariate_means(ds, [True] * ds.n), group_covariate_means(ds, top)
print("\n" + " " * 12 + "".join(f"{k:>21}" for k in full))
print(f"{'full.sample':<12}" + "".join(f"{v:>21.2f}" for v in full.values()))
print(f"{'top.20':<12}" + "".join(f"{v:>21.2f}" for v in best.values()))
