"""Group-Lasso channel search over a small grid and its Pareto front."""
import numpy as np

from tcnhr import model as M, nas as N, pipeline as P, synth as S, trainer as T

# the generator puts its last subject far out of band; keep the first three
recs = S.synth_set(S.default_profiles(4, 4.0, seed=8)[:3])
data = T.Dataset.concat(P.windows_for(r) for r in recs)
norm = P.NormStats.fit(data.x)
data = T.Dataset(norm.apply(data.x), data.y)
rng = np.random.default_rng(0)
idx = rng.permutation(len(data))
tr, va = data.subset(idx[: len(idx) * 4 // 5]), data.subset(idx[len(idx) * 4 // 5 :])

# %% a small seed keeps this quick; the grid trades strength for width
seed = M.build_seed((8, 12, 16), (24, 12))
grid = [N.RegularizerConfig(N.SIZE, s, 0.01) for s in (0.0, 1e-3, 1e-2)]
grid.append(N.RegularizerConfig(N.FLOPS, 1e-5, 0.01, expansion=1.5))
# gamma moves by at most ~lr per update, so a channel needs ~1000 updates to die:
# small batches buy enough of them on a small set
cfg = T.TrainConfig(max_epochs=30, patience=6, batch_size=8)
points = N.morph_search(seed, tr, va, grid, cfg)

for p in points:
    print(f"{p.config.kind:5s} lambda={p.config.strength:g}  widths {p.spec.block_out_channels()}  "
          f"params {p.params:6d}  MAE {p.mae:.2f}")

# %% non-dominated points, smallest first
for p in N.pareto_front(points, "params"):
    print("pareto:", p.params, round(p.mae, 2))
