"""Generate a small synthetic cohort, train a narrow network, smooth its output."""
import numpy as np

from tcnhr import model as M, pipeline as P, synth as S, trainer as T

# %% six subjects with different HR bands, 4 minutes each; the last is far above the rest
recs = S.synth_set(S.default_profiles(6, 4.0, seed=3))
for r in recs:
    print(r.subject_id, f"{r.hr.min():.0f}-{r.hr.max():.0f} BPM", r.ppg.shape)

# %% 8 s windows every 2 s; S5 is held out, S6 sits unused
data = [P.windows_for(r) for r in recs]
train_raw = T.Dataset.concat(data[:3])
norm = P.NormStats.fit(train_raw.x)
z = lambda d: T.Dataset(norm.apply(d.x), d.y)  # noqa: E731
tr, va, te = z(train_raw), z(data[3]), z(data[4])
print(len(tr), "training windows")

# %% a narrow version of the seed trains in a minute or two
spec = M.build_seed((8, 16, 16), (32, 16))
res = T.train(spec, tr, va, T.TrainConfig(max_epochs=50, patience=8, batch_size=32))
print(f"best epoch {res.best_epoch}, val MAE {res.best_val_mae:.2f}")

# %% raw predictions vs the clipped stream on the unseen subject
raw = T.predict(spec, res.weights, te.x)
post = P.HRPostProcessor().run(raw)
print(f"held-out MAE raw {T.mae(raw, te.y):.2f}  post-processed {T.mae(post, te.y):.2f}")
print("first windows:", np.round(raw[:6], 1), "truth", np.round(te.y[:6], 1))
