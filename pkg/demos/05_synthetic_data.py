# %% [markdown]
# # Synthetic lesion-like corpus
#
# Images are rendered from (spec, seed) alone, so the same settings
# always produce the same bytes on disk.

# %%
import hashlib
import tempfile
from pathlib import Path

import numpy as np

from cto.data import SynthSpec, kfold_split, load_pairs, render_sample, synth_generate

# %%
spec = SynthSpec(n_images=6, seed=3)
img, mask, shapes = render_sample(spec, 0)
print(img.shape, img.dtype, "foreground fraction", mask.mean().round(3))
print(shapes[0])

# %%
def digest(root):
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(p.read_bytes())
    return h.hexdigest()[:16]

with tempfile.TemporaryDirectory() as a, tempfile.TemporaryDirectory() as b:
    synth_generate(spec, a)
    synth_generate(spec, b)
    print("digests", digest(a), digest(b))
    ds = load_pairs(a)
    print(len(ds), "samples; first id", ds[0].id)

# %%
for i, fold in enumerate(kfold_split(10, 5, seed=0)):
    print("fold", i, fold)
