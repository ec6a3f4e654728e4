# %% [markdown]
# # Sobel edge gating
#
# Fixed Sobel kernels give horizontal and vertical gradients per channel;
# the enhancement multiplies features by a sigmoid of their average.

# %%
import numpy as np

from cto.boundary import bem_enhance, sobel_gradients
from cto.engine import Tensor, precision

# %%
with precision(np.float64):
    img = np.zeros((1, 1, 10, 10))
    img[0, 0, 3:7, 3:7] = 1.0
    mx, my = sobel_gradients(Tensor(img))
    print("Mx:\n", mx.data[0, 0].astype(int))
    print("My:\n", my.data[0, 0].astype(int))

# %%
# Flat regions are gated by sigmoid(0) = 0.5; edges move away from it.
with precision(np.float64):
    gate = bem_enhance(Tensor(img + 1.0)).data[0, 0] / (img[0, 0] + 1.0)
    print(np.round(gate, 2))
