"""Post-training int8 quantization, then adapting to an out-of-range subject."""
import numpy as np

from tcnhr import model as M, pipeline as P, quantizer as Q, synth as S, trainer as T

profiles = S.default_profiles(5, 4.0, seed=1)
data = [P.windows_for(S.synth_subject(p)) for p in profiles]
norm = P.NormStats.fit(T.Dataset.concat(data[:3]).x)
tr, va, oob = (T.Dataset(norm.apply(d.x), d.y) for d in (T.Dataset.concat(data[:3]), data[3], data[4]))
print("out-of-band subject:", f"{oob.y.min():.0f}-{oob.y.max():.0f} BPM")

spec = M.build_seed((8, 16, 16), (32, 16))
w = T.train(spec, tr, va, T.TrainConfig(max_epochs=25, patience=6, batch_size=32)).weights

# %% calibrate on 128 training windows; int8 weights and activations, int32 accumulators
qm = Q.quantize_pipeline(spec, w, tr.x[:128])
y8 = Q.infer_int8(qm, va.x)
print(f"float MAE {T.evaluate_mae(spec, w, va.x, va.y):.2f}  int8 MAE {T.mae(y8, va.y):.2f}")
print("bit-identical rerun:", np.array_equal(y8, Q.infer_int8(qm, va.x)))

# %% fine-tune on the first quarter of the unseen high-HR subject, score the rest
k = P.finetune_split(len(oob))
tail = oob.subset(slice(k, len(oob)))
before = T.evaluate_mae(spec, w, tail.x, tail.y)
ft = P.finetune(spec, w, oob)
print(f"out-of-band MAE {before:.1f} -> {ft.mae:.1f} after fine-tuning on {ft.split} windows")
