import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scribblesod import cli
from scribblesod.config import ConfigError, RunConfig, dump_config, parse_config
from scribblesod.data import read_manifest, save_mask, validate_manifest
from scribblesod.imaging import save_png

TINY = ["--set", "train.epochs=2", "--set", "train.width=4", "--set", "train.batch_size=2"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("gen-toy", "--out", root / "d", "--n", 6, "--n-test", 2, "--seed", 4) == 0
    assert run("synth", "--manifest", root / "d" / "manifest.jsonl", "--out", root / "s", "--variants", 2) == 0
    return root


# ---------------------------------------------------------------- config

def test_config_defaults_roundtrip():
    cfg = RunConfig()
    assert parse_config(dump_config(cfg)) == cfg


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 99), st.floats(1e-4, 0.5), st.booleans(), st.floats(0.0, 1.0))
def test_config_roundtrip_property(epochs, lr, flag, a2):
    text = f"[train]\nepochs = {epochs}\nlr_max = {lr!r}\nuse_sc = {json.dumps(flag)}\n[loss]\nalpha2 = {a2!r}\n"
    cfg = parse_config(text)
    assert (cfg.train.epochs, cfg.train.lr_max, cfg.train.use_sc, cfg.loss.alpha2) == (epochs, lr, flag, a2)
    assert parse_config(dump_config(cfg)) == cfg


def test_config_overrides_apply_in_order():
    cfg = parse_config("[train]\nepochs = 5\n", overrides=["train.epochs=7", "synth.beta1_range=[-0.5, 0.5]"])
    assert cfg.train.epochs == 7 and cfg.synth.beta1_range == (-0.5, 0.5)


@pytest.mark.parametrize("text,match", [
    ("[train]\nepochs = 3\nlr_max = nope\n", "line 3"),
    ("[train]\n\nbogus = 1\n", "line 3.*bogus"),
    ("[nowhere]\nx = 1\n", "line 1.*unknown section"),
    ("[train]\nepochs = 2.5\n", "line 2.*int"),
    ("[synth]\nbeta1_range = [0.1]\n", "2 numbers"),
    ("[train]\nlr_min = 0.1\nlr_max = 0.01\n", "lr_min"),
    ("epochs = 1\n", "section"),
])
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text, "c.ini")


def test_bad_override():
    with pytest.raises(ConfigError, match="section.key"):
        parse_config("", overrides=["epochs=3"])


# ---------------------------------------------------------------- commands

def test_gen_toy_deterministic(tmp_path, corpus):
    assert run("gen-toy", "--out", tmp_path / "d", "--n", 6, "--n-test", 2, "--seed", 4) == 0
    for sub in ("images", "scribbles", "gt"):
        for name in os.listdir(corpus / "d" / sub):
            assert (tmp_path / "d" / sub / name).read_bytes() == (corpus / "d" / sub / name).read_bytes()
    assert (tmp_path / "d" / cli.CONFIG_ECHO).exists()


def test_gen_toy_rejects_zero(tmp_path):
    assert run("gen-toy", "--out", tmp_path, "--n", 0) == 1


def test_synth_outputs(corpus):
    m = read_manifest(corpus / "s" / "manifest.jsonl")
    assert all(len(e.synthetic) == 2 for e in m.entries)
    assert validate_manifest(m) == {}
    prov = json.loads((corpus / "s" / "synthetic" / m.entries[0].id / "variant_0.json").read_text())
    assert {"strategy", "seed", "params"} <= prov.keys()


def test_synth_rerun_identical(tmp_path, corpus):
    assert run("synth", "--manifest", corpus / "d" / "manifest.jsonl", "--out", tmp_path / "s", "--variants", 2) == 0
    a = corpus / "s" / "synthetic"
    for d in os.listdir(a):
        for f in os.listdir(a / d):
            assert (tmp_path / "s" / "synthetic" / d / f).read_bytes() == (a / d / f).read_bytes()


def test_synth_per_image_failure(tmp_path, corpus):
    m = read_manifest(corpus / "d" / "manifest.jsonl")
    blank = np.zeros((64, 64), np.uint8)
    blank[5, 5] = 255  # foreground only, no background scribble
    save_png(blank, tmp_path / "blank.png")
    lines = (corpus / "d" / "manifest.jsonl").read_text().splitlines()
    first = json.loads(lines[0])
    first["image"] = str(corpus / "d" / first["image"])
    first["label"] = str(tmp_path / "blank.png")
    first["gt"] = None
    rest = [json.loads(x) for x in lines[1:2]]
    for r in rest:
        for k in ("image", "label", "gt"):
            r[k] = str(corpus / "d" / r[k])
    (tmp_path / "m.jsonl").write_text("\n".join(json.dumps(r) for r in [first] + rest) + "\n")
    assert run("synth", "--manifest", tmp_path / "m.jsonl", "--out", tmp_path / "o", "--variants", 1) == 0
    errors = [json.loads(x) for x in (tmp_path / "o" / "errors.jsonl").read_text().splitlines()]
    assert [e["id"] for e in errors] == [m.entries[0].id]


def test_synth_bad_manifest(tmp_path):
    (tmp_path / "m.jsonl").write_text("{not json\n")
    assert run("synth", "--manifest", tmp_path / "m.jsonl", "--out", tmp_path / "o") == 2


def test_train_and_eval(tmp_path, corpus):
    out = tmp_path / "r"
    assert run("train", "--data", corpus / "s", "--out", out, *TINY) == 0
    report = json.loads((out / "report.json").read_text())
    assert len(report["steps"]) == 4 and report["final"] is not None
    assert (out / "final.ckpt").read_bytes() == (out / "checkpoints" / "epoch_001.ckpt").read_bytes()
    assert parse_config((out / cli.CONFIG_ECHO).read_text()).train.epochs == 2
    assert run("eval", "--pred", out / "eval" / "pred", "--gt", out / "eval" / "gt", "--out", out / "e" / "s.jsonl") == 0
    rows = [json.loads(x) for x in (out / "e" / "s.jsonl").read_text().splitlines()]
    assert rows[-1]["id"] == "__mean__" and rows[-1]["n_images"] == 2
    assert (out / "e" / cli.CONFIG_ECHO).exists()


def test_train_baseline_flag(tmp_path, corpus):
    assert run("train", "--data", corpus / "d", "--out", tmp_path / "b", "--baseline", *TINY) == 0
    report = json.loads((tmp_path / "b" / "report.json").read_text())
    assert not report["config"]["train"]["use_bab"] and all(s["sc"] == 0 for s in report["steps"])


def test_train_resume_trace(tmp_path, corpus):
    args = ["--data", corpus / "s", "--set", "train.epochs=3", "--set", "train.width=4", "--set", "train.batch_size=2"]
    assert run("train", "--out", tmp_path / "a", *args) == 0
    assert run("train", "--out", tmp_path / "b", "--resume", tmp_path / "a" / "checkpoints" / "epoch_000.ckpt", *args) == 0
    full = json.loads((tmp_path / "a" / "report.json").read_text())["steps"]
    tail = json.loads((tmp_path / "b" / "report.json").read_text())["steps"]
    assert [s["lr"] for s in full[:2]] + [s["lr"] for s in tail] == [s["lr"] for s in full]
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()


def test_train_errors(tmp_path, corpus):
    assert run("train", "--data", tmp_path / "missing", "--out", tmp_path / "x") == 2
    (tmp_path / "c.ini").write_text("[train]\nepochs = x\n")
    assert run("train", "--config", tmp_path / "c.ini", "--data", corpus / "s", "--out", tmp_path / "x") == 1
    assert run("train", "--out", tmp_path / "x") == 1


def test_eval_identity_and_fixture(tmp_path):
    gt1 = np.zeros((8, 8), np.uint8)
    gt1[2:6, 2:6] = 1
    gt2 = np.zeros((8, 8), np.uint8)
    gt2[0, :] = 1
    for d in ("p", "g"):
        save_mask(gt1, tmp_path / d / "a.png")
        save_mask(gt2, tmp_path / d / "b.png")
    assert run("eval", "--pred", tmp_path / "p", "--gt", tmp_path / "g", "--out", tmp_path / "o.jsonl") == 0
    agg = json.loads((tmp_path / "o.jsonl").read_text().splitlines()[-1])
    assert (agg["s_measure"], agg["mean_fbeta"], agg["mae"], agg["e_measure"]) == pytest.approx((1, 1, 0, 1))
    # second image all wrong: MAE averages 0 and 16/64
    inv = np.zeros((8, 8), np.uint8)
    inv[7, :] = 1
    inv[6, :] = 1
    save_mask(inv, tmp_path / "p" / "b.png")
    assert run("eval", "--pred", tmp_path / "p", "--gt", tmp_path / "g", "--out", tmp_path / "o.jsonl") == 0
    agg = json.loads((tmp_path / "o.jsonl").read_text().splitlines()[-1])
    assert agg["mae"] == pytest.approx((0 + 24 / 64) / 2)
    assert agg["mean_fbeta"] == pytest.approx(0.5)


def test_eval_errors(tmp_path, capsys):
    (tmp_path / "p").mkdir()
    (tmp_path / "g").mkdir()
    assert run("eval", "--pred", tmp_path / "p", "--gt", tmp_path / "g", "--out", tmp_path / "o.jsonl") == 2
    save_mask(np.ones((4, 4)), tmp_path / "p" / "x.png")
    save_mask(np.ones((4, 4)), tmp_path / "g" / "y.png")
    assert run("eval", "--pred", tmp_path / "p", "--gt", tmp_path / "g", "--out", tmp_path / "o.jsonl") == 2
    err = capsys.readouterr().err
    assert "x.png" in err and "y.png" in err


def test_gradcheck_command(capsys):
    assert run("gradcheck", "--seed", 1, "--instances", 1) == 0
    out = capsys.readouterr().out
    from scribblesod.gradsuite import OPS
    assert all(op in out for op in OPS)
    assert run("gradcheck", "--seed", 1, "--instances", 1, "--inject-bug") == 2
    assert "FAIL partial_ce" in capsys.readouterr().out


def test_usage_errors():
    assert run("bogus") == 1
    assert run() == 1
