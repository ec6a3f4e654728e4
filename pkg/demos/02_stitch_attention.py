# %% [markdown]
# # Stitching and grouped attention
#
# `stitch` splits a feature map into s*s interleaved sub-grids. Attention
# runs inside each sub-grid, so a rate-s group mixes n/s^2 tokens at a
# time and the token-mixing cost falls by s^2.

# %%
import numpy as np

from cto.engine import Tensor, precision
from cto.stitchvit import AttentionParams, count_attention_macs, group_mhsa, stitch, unstitch

# %%
with precision(np.float64):
    grid = Tensor(np.arange(1, 17, dtype=np.float64).reshape(1, 1, 4, 4))
    phases = stitch(grid, 2).data[0, :, 0]
    for i, p in enumerate(phases):
        print(f"phase {i}:\n{p}")
    assert np.array_equal(unstitch(stitch(grid, 2), 2).data, grid.data)

# %%
# Perturbing one sub-grid leaves the others bit-for-bit unchanged.
rng = np.random.default_rng(1)
with precision(np.float64):
    params = AttentionParams(8, 2, 4)
    for _, q in params.named_parameters():
        q.data = rng.normal(size=q.shape) * 0.3
    x = rng.normal(size=(1, 8, 8, 8))
    base = group_mhsa(stitch(Tensor(x), 2), params).data
    y = x.copy()
    y[0, :, 0, 0] += 1.0  # lands in phase 0
    moved = group_mhsa(stitch(Tensor(y), 2), params).data
    print("changed per phase:", [bool(np.any(moved[0, g] != base[0, g])) for g in range(4)])

# %%
report = count_attention_macs(16, 16, 32, [1, 2, 4, 8, 16])
print("dense QK^T MACs:", report["dense_macs"])
for row in report["stitched"]:
    print(f"rate {row['rate']:>2}: measured {row['measured']:>8}  reduction x{row['reduction']}")
