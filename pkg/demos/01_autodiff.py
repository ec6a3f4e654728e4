# %% [markdown]
# # A tiny reverse-mode engine
#
# Every op records a backward closure on the active record; `backward`
# walks it in reverse. Here we fit one conv filter and then confirm the
# analytic gradients against central differences.

# %%
import numpy as np

from cto.engine import ComputationRecord, Parameter, Tensor, backward, precision, use_record
from cto.engine import functional as F
from cto.engine.gradcheck import finite_diff_check

rng = np.random.default_rng(0)

# %%
# Recover a known 3x3 kernel from input/output pairs by plain gradient descent.
with precision(np.float64):
    x = Tensor(rng.normal(size=(4, 1, 12, 12)))
    true_w = rng.normal(size=(1, 1, 3, 3))
    target = F.conv2d(x, Tensor(true_w), padding=1).data

    w = Parameter(np.zeros((1, 1, 3, 3)), "w")
    for step in range(200):
        with use_record(ComputationRecord()) as rec:
            diff = F.sub(F.conv2d(x, w, padding=1), Tensor(target))
            loss = F.mean(F.mul(diff, diff))
            w.grad = None
            backward(loss, rec)
        w.data -= 0.1 * w.grad
    print("final loss", float(loss.data))
    print("max kernel error", np.abs(w.data - true_w).max())

# %%
# The same gradient, checked coordinate by coordinate in float64.
with precision(np.float64):
    w = Parameter(rng.normal(size=(1, 1, 3, 3)), "w")

    def f():
        d = F.sub(F.conv2d(x, w, padding=1), Tensor(target))
        return F.mean(F.mul(d, d))

    print(finite_diff_check(f, [w], coords_per_param=9).summary())
