"""Causal dilated convolutions, the seed network, and what flattening costs."""
import numpy as np

from tcnhr import model as M, ops, quantizer as Q

# %% a kernel of ones with dilation 2 adds x[t] and x[t-2]
x = np.array([[1, 2, 3, 4]], np.float32)
y = ops.conv1d_causal(x, np.ones((1, 1, 2), np.float32), dilation=2)
print("dilated sum:", y.data)

# %% the output at t never sees the future: poke the last sample
x2 = x.copy()
x2[0, -1] = 100
print("unchanged prefix:", ops.conv1d_causal(x2, np.ones((1, 1, 2), np.float32), dilation=2).data[0, :3])

# %% the seed network
seed = M.build_seed()
print(M.to_text(seed))
print(f"params {M.count_params(seed):,}  MACs {M.count_macs(seed):,}")

# %% flattening turns each dilated kernel into a dense one with zeros in the gaps
fs, fw = Q.flatten_dilation(seed, M.init_weights(seed, 0))
print(f"flattened: params {M.count_params(fs):,}  MACs {M.count_macs(fs):,}")
for i in seed.conv_indices()[:3]:
    print(f"  layer {i}: K={seed[i].k} d={seed[i].d} -> K={fs[i].k}")
