"""Why a single strip can matter: scoring and thresholding the rigged net.

The rigged CNN routes every useful signal through one conv2 strip. Hutchinson
scoring should rank it first, and the threshold search should keep it at
8 bits while pushing the rest of the net to 4 bits.
"""

from cimquant.fixtures import make_blobs, rigged_cnn
from cimquant.quantizer import assign_clusters
from cimquant.sensitivity import HutchinsonConfig, decompose_strips, rank_strips, score_strips
from cimquant.threshold import optimize_threshold, sweep_thresholds

model, critical = rigged_cnn(0)
data = make_blobs(64, seed=0)
records = rank_strips(score_strips(model, data, decompose_strips(model), HutchinsonConfig(m=8, seed=0)))

print("top strips (layer, m, n, oc): score")
for rec in records[:5]:
    print(f"  {rec.key}: {rec.score:.3e}")
print(f"designed critical strip {critical} ranked #{[r.key for r in records].index(critical) + 1}")

res = optimize_threshold(model, records, data)
sweep = sweep_thresholds(model, records, data)
best = min(L for *_, L in sweep)
print(f"\noptimizer: {len(res.log)} iterations, {res.evaluations} evaluations")
print(f"  L = {res.L:.4e} (exhaustive minimum {best:.4e}), {res.p_low}/{len(records)} strips at 4 bits")
print(f"  critical strip is {assign_clusters(records, res.T).cluster(critical)}")
for rec in res.log:
    print(f"  iter {rec.iter:2d}  rank {rec.T_rank:2d}  L {rec.L:.3e}  best {rec.best_L:.3e}")
