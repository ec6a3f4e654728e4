# %% [markdown]
# # Losses and evaluation metrics

# %%
import numpy as np

from cto.engine import Tensor, precision
from cto.losses import ce_loss, dice_loss, miou_loss
from cto.metrics import avg_hausdorff, boundary_gt, dice_metric, iou_metric

# %%
y = np.zeros((16, 16))
y[4:12, 4:12] = 1
with precision(np.float64):
    for name, p in [("perfect", y), ("inverted", 1 - y), ("half", np.full_like(y, 0.5))]:
        t = Tensor(p)
        print(f"{name:>8}: ce {float(ce_loss(t, y).data):.4f} "
              f"miou {float(miou_loss(t, y).data):.4f} dice {float(dice_loss(t, y).data):.4f}")

# %%
# Shift the square by two pixels and score it.
pred = np.roll(y, 2, axis=1).astype(bool)
gt = y.astype(bool)
print("dice", dice_metric(pred, gt), "iou", iou_metric(pred, gt))
print("average Hausdorff", avg_hausdorff(pred, gt))

# %%
# Boundary targets are a thin band straddling the mask edge.
print(boundary_gt(y.astype(np.uint8))[2:14, 2:14])
