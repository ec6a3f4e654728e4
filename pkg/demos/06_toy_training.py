# %% [markdown]
# # Toy training run through the CLI
#
# A short budget (a few epochs on 60 images) so the demo finishes in
# about a minute. Raise `train.epochs` to 30 and `synth.n_images` to 200
# for the full toy run.

# %%
import json
import tempfile
from pathlib import Path

from cto import cli

# %%
root = Path(tempfile.mkdtemp())
cfg = root / "toy.cfg"
cfg.write_text(f"""\
data.dir = {root}/data
output.dir = {root}/run
synth.n_images = 60
train.epochs = 5
train.batch_size = 8
optim.lr = 0.002
""")
cli.main(["synth", "--config", str(cfg)])
cli.main(["train", "--config", str(cfg), "--deterministic"])

# %%
for line in (root / "run/metrics.jsonl").read_text().splitlines():
    rec = json.loads(line)
    print(rec["epoch"], round(rec["total_loss"], 4), round(rec["val"]["dice"], 4))

# %%
cli.main(["flops", "--config", str(cfg)])
