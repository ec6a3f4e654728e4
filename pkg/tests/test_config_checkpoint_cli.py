import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cto import cli
from cto.checkpoint import CheckpointError, load_arrays, load_checkpoint, save_arrays, save_checkpoint
from cto.config import ConfigParseError, RunConfig, dump_config, load_config, parse_config
from cto.data import SynthSpec, generate_in_memory, write_pnm
from cto.model import ModelConfig, build
from cto.train import Adam, checkpoint_meta

TOY = """\
data.dir = {root}/data
output.dir = {root}/out
synth.n_images = 20
synth.seed = 4
train.epochs = 2
train.batch_size = 4
train.eval_train = false
optim.lr = 0.002
"""


def write_config(root: Path, extra: str = "", name: str = "run.cfg") -> Path:
    path = root / name
    path.write_text(TOY.format(root=root) + extra)
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """Synthesize a small corpus and train fold 0 once for the module."""
    root = tmp_path_factory.mktemp("toy")
    cfg = write_config(root)
    assert cli.main(["synth", "--config", str(cfg)]) == 0
    assert cli.main(["train", "--config", str(cfg), "--deterministic"]) == 0
    return root, cfg


# ---------------------------------------------------------------- config

def test_default_config_roundtrips():
    run = RunConfig()
    assert parse_config(dump_config(run)) == run


_safe_text = st.text(st.characters(whitelist_categories=("L", "N"), whitelist_characters="_-/."),
                     min_size=1, max_size=12)


@settings(max_examples=60, deadline=None)
@given(lr=st.floats(1e-8, 10, allow_nan=False), bs=st.integers(1, 64), epochs=st.integers(1, 500),
       fold=st.sampled_from(["0", "3", "all"]), augment=st.booleans(), data_dir=_safe_text,
       rates=st.lists(st.sampled_from([1, 2, 4, 8, 16]), min_size=1, max_size=4, unique=True),
       alpha=st.floats(0, 100, allow_nan=False), kinds=st.sampled_from([("ellipse",), ("ellipse", "blob")]))
def test_config_roundtrip_property(lr, bs, epochs, fold, augment, data_dir, rates, alpha, kinds):
    run = RunConfig()
    run.optim.lr, run.train.batch_size, run.train.epochs = lr, bs, epochs
    run.train.fold, run.train.augment, run.data.dir = fold, augment, data_dir
    run.model.vit.rates = sorted(rates)
    run.loss.alpha = alpha
    run.synth.kinds = kinds
    again = parse_config(dump_config(run))
    assert again == run
    assert dump_config(again) == dump_config(run)


def test_comments_and_blank_lines():
    run = parse_config("# header\n\noptim.lr = 0.5  # trailing\nvit.rates = 1, 2\n")
    assert run.optim.lr == 0.5
    assert run.model.vit.rates == [1, 2]


@pytest.mark.parametrize("text,lineno", [
    ("optim.lr = 1\nbogus.key = 2\n", 2),
    ("\n\ntrain.nope = 1\n", 3),
    ("train.epochs = ten\n", 1),
    ("optim.lr = 1\nno equals sign\n", 2),
    ("train.augment = maybe\n", 1),
    ("optim.betas = 0.9\n", 1),
    ("model.vit = x\n", 1),
])
def test_parse_errors_carry_line_number(text, lineno):
    with pytest.raises(ConfigParseError) as exc:
        parse_config(text, "cfg.txt")
    assert exc.value.lineno == lineno
    assert f"cfg.txt:{lineno}:" in str(exc.value)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigParseError):
        load_config(tmp_path / "absent.cfg")


@pytest.mark.parametrize("text,needle", [
    ("optim.lr = 0\n", "optim.lr"),
    ("train.batch_size = 0\n", "batch_size"),
    ("train.fold = 7\n", "train.fold"),
    ("model.num_classes = 1\n", "class_mode"),
])
def test_validation(text, needle):
    errs = parse_config(text).validate()
    assert any(needle in e for e in errs)


def test_defaults():
    run = RunConfig()
    assert run.optim.lr == 1e-4 and run.train.batch_size == 32
    assert run.optim.betas == (0.9, 0.999) and run.optim.eps == 1e-8


# ---------------------------------------------------------------- checkpoint

def test_checkpoint_layout(tmp_path):
    arrays = {"b": np.arange(6, dtype=">f4").reshape(2, 3), "a": np.array(3, dtype=np.int64)}
    save_arrays(tmp_path / "c", arrays, meta=["k=v"])
    raw = (tmp_path / "c").read_bytes()
    head, body = raw.split(b"\nEND\n", 1)
    lines = head.decode().split("\n")
    assert lines == ["CTO-CHECKPOINT 1", "meta k=v", "entry a <i8 - 0 8", "entry b <f4 2,3 8 24"]
    assert body[8:] == np.arange(6, dtype="<f4").tobytes()
    back, meta = load_arrays(tmp_path / "c")
    assert meta == ["k=v"]
    np.testing.assert_array_equal(back["b"], arrays["b"])
    assert back["a"] == 3


def _corrupt(path, old: bytes, new: bytes):
    raw = path.read_bytes()
    assert old in raw
    path.write_bytes(raw.replace(old, new, 1))


@pytest.mark.parametrize("mutate,match", [
    (lambda p: p.write_bytes(p.read_bytes()[:-3]), "truncated"),
    (lambda p: _corrupt(p, b"\nEND\n", b"\nEMD\n"), "END"),
    (lambda p: _corrupt(p, b"CTO-CHECKPOINT", b"XYZ-CHECKPOINT"), "not a checkpoint"),
    (lambda p: _corrupt(p, b"CTO-CHECKPOINT 1", b"CTO-CHECKPOINT 9"), "version"),
    (lambda p: _corrupt(p, b"2,3 8 24", b"2,3 4 24"), "offsets"),
    (lambda p: _corrupt(p, b"2,3 8 24", b"2,3 8 20"), "offsets"),
    (lambda p: _corrupt(p, b"entry a", b"entri a"), "manifest"),
])
def test_checkpoint_corruption(tmp_path, mutate, match):
    path = tmp_path / "c"
    save_arrays(path, {"a": np.zeros(1), "b": np.zeros((2, 3), np.float32)})
    mutate(path)
    with pytest.raises(CheckpointError, match=match):
        load_arrays(path)


def test_checkpoint_with_optimizer_state(tmp_path, rng):
    model = build(ModelConfig(seed=1))
    opt = Adam(model.named_parameters())
    for _, p in opt.params:
        p.grad = rng.normal(size=p.shape).astype(p.data.dtype)
    opt.step()
    save_checkpoint(tmp_path / "m", model, opt)
    other = build(ModelConfig(seed=2))
    opt2 = Adam(other.named_parameters())
    load_checkpoint(tmp_path / "m", other, opt2)
    assert opt2.t == 1
    for n in opt.m:
        np.testing.assert_array_equal(opt.m[n], opt2.m[n])
        np.testing.assert_array_equal(opt.v[n], opt2.v[n])


# ---------------------------------------------------------------- CLI exit codes

def test_unknown_command_exits_one(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate", "--config", str(write_config(tmp_path))])
    assert exc.value.code == cli.EXIT_USAGE


def test_bad_config_exits_one_with_line(tmp_path, capsys):
    cfg = write_config(tmp_path, "train.bogus = 1\n")
    assert cli.main(["flops", "--config", str(cfg)]) == cli.EXIT_USAGE
    assert ":9:" in capsys.readouterr().err


def test_invalid_config_exits_one(tmp_path):
    cfg = write_config(tmp_path, "optim.lr = -1\n")
    assert cli.main(["train", "--config", str(cfg)]) == cli.EXIT_USAGE


def test_missing_dataset_exits_two(tmp_path):
    assert cli.main(["train", "--config", str(write_config(tmp_path))]) == cli.EXIT_DATA


def test_bad_thread_env_exits_one(tmp_path, monkeypatch):
    monkeypatch.setenv("CTO_THREADS", "many")
    assert cli.main(["flops", "--config", str(write_config(tmp_path))]) == cli.EXIT_USAGE


# ---------------------------------------------------------------- train / eval

def test_train_outputs(trained):
    root, _ = trained
    lines = [json.loads(ln) for ln in (root / "out/metrics.jsonl").read_text().splitlines()]
    assert [ln["epoch"] for ln in lines] == [1, 2]
    assert {"total_loss", "terms", "val"} <= set(lines[0])
    assert set(lines[0]["val"]) == {"dice", "iou", "avg_hd", "n_images"}
    assert (root / "out/model.ckpt").exists()
    _, meta = load_arrays(root / "out/model.ckpt")
    assert any(m.startswith("epoch=") for m in meta)


def test_eval_equals_saved_val_metrics(trained):
    root, cfg = trained
    assert cli.main(["eval", "--config", str(cfg)]) == 0
    val = json.loads((root / "out/val.json").read_text())
    ev = json.loads((root / "out/eval.json").read_text())
    for key in ("dice", "iou", "avg_hd", "dice_std", "n_images", "per_class"):
        assert ev[key] == val[key]


def test_eval_class_count_mismatch_exits_two(trained, tmp_path):
    root, _ = trained
    cfg = write_config(root, "model.num_classes = 3\n", name="three.cfg")
    assert cli.main(["eval", "--config", str(cfg)]) == cli.EXIT_DATA


def test_eval_empty_prediction_model(trained, tmp_path):
    root, cfg = trained
    run = load_config(cfg)
    model = build(run.model)
    for i in range(3):
        model.heads[i].weight.data[...] = 0
        model.heads[i].bias.data[...] = np.array([50.0, -50.0], dtype=np.float32)
    ckpt = tmp_path / "empty.ckpt"
    save_checkpoint(ckpt, model, meta=checkpoint_meta(run))
    assert cli.main(["eval", "--config", str(cfg), "--checkpoint", str(ckpt)]) == 0
    ev = json.loads((root / "out/eval.json").read_text())
    assert ev["dice"] == pytest.approx(0.0, abs=1e-12)
    assert ev["avg_hd"] == "undefined"


def test_kfold_gives_five_blocks_and_pooled(tmp_path):
    cfg = write_config(tmp_path, "train.fold = all\ntrain.epochs = 1\n")
    assert cli.main(["synth", "--config", str(cfg)]) == 0
    assert cli.main(["train", "--config", str(cfg)]) == 0
    summary = json.loads((tmp_path / "out/train_summary.json").read_text())
    assert [b["fold"] for b in summary["folds"]] == [0, 1, 2, 3, 4]
    assert summary["pooled"]["n_folds"] == 5
    assert sum(b["n_images"] for b in summary["folds"]) == 20
    assert cli.main(["eval", "--config", str(cfg)]) == 0
    ev = json.loads((tmp_path / "out/eval.json").read_text())
    assert len(ev["folds"]) == 5 and "pooled" in ev


def test_deterministic_runs_identical(trained, tmp_path):
    root, _ = trained
    cfg = write_config(root, f"output.dir = {tmp_path}/again\n", name="again.cfg")
    assert cli.main(["train", "--config", str(cfg), "--deterministic"]) == 0
    assert (tmp_path / "again/metrics.jsonl").read_bytes() == (root / "out/metrics.jsonl").read_bytes()


def test_nan_loss_aborts_with_diagnostic(trained, tmp_path, capsys):
    root, _ = trained
    cfg = write_config(root, f"optim.lr = 1e30\noutput.dir = {tmp_path}/nan\n", name="nan.cfg")
    with np.errstate(all="ignore"):
        assert cli.main(["train", "--config", str(cfg)]) == cli.EXIT_NUMERIC
    diag = json.loads((tmp_path / "nan/nan_diagnostic.json").read_text())
    assert diag["batch_ids"] and diag["epoch"] == 1
    assert "batch_ids" in capsys.readouterr().err


# ---------------------------------------------------------------- predict

def test_predict_output_dims_after_pad_crop(trained, tmp_path):
    root, cfg = trained
    img = generate_in_memory(SynthSpec(n_images=1, size=(64, 64)))[0].image
    rgb = np.round(img.transpose(1, 2, 0)[:50, :40] * 255).astype(np.uint8)
    write_pnm(tmp_path / "odd.ppm", rgb)
    assert cli.main(["predict", "--config", str(cfg), "--image", str(tmp_path / "odd.ppm"),
                     "--out", str(tmp_path / "pred")]) == 0
    from cto.data import read_pnm
    assert read_pnm(tmp_path / "pred/odd_mask.pgm").shape == (50, 40)
    assert read_pnm(tmp_path / "pred/odd_boundary.pgm").shape == (50, 40)


def test_predict_zero_head_boundary_is_gray(trained, tmp_path):
    root, cfg = trained
    run = load_config(cfg)
    model = build(run.model)
    model.bem.head.weight.data[...] = 0
    model.bem.head.bias.data[...] = 0
    save_checkpoint(tmp_path / "z.ckpt", model, meta=checkpoint_meta(run))
    write_pnm(tmp_path / "x.ppm", np.full((64, 64, 3), 90, np.uint8))
    assert cli.main(["predict", "--config", str(cfg), "--checkpoint", str(tmp_path / "z.ckpt"),
                     "--image", str(tmp_path / "x.ppm"), "--out", str(tmp_path)]) == 0
    from cto.data import read_pnm
    gray = read_pnm(tmp_path / "x_boundary.pgm")
    assert set(np.unique(gray)) <= {127, 128}


def test_predict_unreadable_image(trained, tmp_path):
    _, cfg = trained
    (tmp_path / "bad.ppm").write_bytes(b"P6\n4 4\n255\n\x00")
    assert cli.main(["predict", "--config", str(cfg), "--image", str(tmp_path / "bad.ppm")]) == cli.EXIT_DATA


def test_predict_needs_image(trained):
    _, cfg = trained
    assert cli.main(["predict", "--config", str(cfg)]) == cli.EXIT_USAGE


# ---------------------------------------------------------------- gradcheck / flops / ablate

def test_gradcheck_passes_and_names_worst(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert cli.main(["gradcheck", "--config", str(cfg), "--coords", "1"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("PASS") and "worst parameter" in out and "max rel err" in out


def test_gradcheck_injected_fault_fails(tmp_path, capsys):
    cfg = write_config(tmp_path)
    code = cli.main(["gradcheck", "--config", str(cfg), "--coords", "1", "--inject-fault",
                     "--fault-param", "heads.2.weight"])
    assert code == cli.EXIT_NUMERIC
    out = capsys.readouterr().out
    assert out.startswith("FAIL") and "heads.2.weight" in out


def test_flops_json(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert cli.main(["flops", "--config", str(cfg), "--json"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["conv_all_match"]
    rows = rep["attention"]["stitched"]
    assert rows[0]["rate"] == 1 and rows[0]["measured"] == rep["attention"]["dense_macs"]
    for r in rows:
        assert r["measured"] == r["analytic"]
        assert r["reduction"] == r["rate"] ** 2


def test_flops_table(tmp_path, capsys):
    assert cli.main(["flops", "--config", str(write_config(tmp_path))]) == 0
    out = capsys.readouterr().out
    assert "dense" in out and "conv" in out


def test_ablate_six_rows(trained, tmp_path):
    root, _ = trained
    cfg = write_config(root, f"train.epochs = 1\noutput.dir = {tmp_path}/abl\n", name="abl.cfg")
    assert cli.main(["ablate", "--config", str(cfg)]) == 0
    rows = (tmp_path / "abl/ablation.tsv").read_text().splitlines()
    assert rows[0].split("\t") == list(cli.ABLATION_COLUMNS)
    body = [r.split("\t") for r in rows[1:]]
    assert [r[0] for r in body] == ["cnn_only", "vit_only", "dual", "dual+cbm", "dual+bem", "dual+bem+bim"]
    run = load_config(cfg)
    assert body[-1][6] == run.model.config_hash()
    assert body[0][-3:] == ["0.000000"] * 3 or body[0][-1] == "undefined"
