import hashlib
import json
import os

import numpy as np
import pytest

from mgno.cli import main
import mgno.tensor


def write_spec(path, **kw):
    doc = {"kind": "multiscale_trig", "d": 16, "seed": 3}
    doc.update(kw)
    with open(path, "w") as fh:
        json.dump(doc, fh)


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


@pytest.fixture()
def workspace(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


# ------------------------------------------------------------ solve-poisson

def test_solve_poisson_ok(workspace):
    rc = main(["solve-poisson", "--size", "64", "--iters", "10",
               "--out", "report.json"])
    assert rc == 0
    doc = json.load(open("report.json"))
    assert 0.05 <= doc["report"]["contraction_factor"] <= 0.2
    assert doc["report"]["diverged"] is False


def test_solve_poisson_divisibility_usage_error(workspace):
    assert main(["solve-poisson", "--size", "63", "--out", "r.json"]) == 2


def test_solve_poisson_single_iteration_low_confidence(workspace):
    rc = main(["solve-poisson", "--size", "16", "--levels", "2", "--iters", "1",
               "--out", "r1.json"])
    doc = json.load(open("r1.json"))
    assert doc["report"]["low_confidence"] is True
    assert rc in (0, 1)


def test_solve_poisson_rerun_byte_identical(workspace):
    main(["solve-poisson", "--size", "16", "--levels", "2", "--iters", "6",
          "--out", "a.json"])
    main(["solve-poisson", "--size", "16", "--levels", "2", "--iters", "6",
          "--out", "b.json"])
    assert open("a.json").read() == open("b.json").read()


# --------------------------------------------------------------------- gen

def test_gen_and_rerun_hashes(workspace):
    write_spec("spec.json")
    assert main(["gen", "--spec", "spec.json", "--n", "3", "--out", "d1"]) == 0
    assert sorted(os.listdir("d1")) == ["inputs.mgt", "meta.json", "outputs.mgt"]
    assert main(["gen", "--spec", "spec.json", "--n", "3", "--out", "d2"]) == 0
    for name in ("inputs.mgt", "outputs.mgt", "meta.json"):
        assert sha(f"d1/{name}") == sha(f"d2/{name}")


def test_gen_bad_kind_schema_error(workspace, capsys):
    write_spec("spec.json", kind="weird")
    assert main(["gen", "--spec", "spec.json", "--n", "1", "--out", "d"]) == 2
    assert "kind" in capsys.readouterr().err


def test_gen_unknown_key_rejected(workspace, capsys):
    write_spec("spec.json", extra_knob=1)
    assert main(["gen", "--spec", "spec.json", "--n", "1", "--out", "d"]) == 2
    assert "extra_knob" in capsys.readouterr().err


# ----------------------------------------------------------- train and eval

def run_config(tmp, train_dir="ds", val_dir=None, loss="l2", epochs=2, seed=0):
    doc = {
        "version": 1,
        "dataset": {"train": train_dir},
        "model": {"layers": 1, "width": 2, "levels": 2,
                  "pre_iters": [1, 1], "post_iters": [0, 0]},
        "train": {"epochs": epochs, "batch_size": 3, "loss": loss, "seed": seed},
    }
    if val_dir:
        doc["dataset"]["val"] = val_dir
    path = os.path.join(tmp, "run.json")
    with open(path, "w") as fh:
        json.dump(doc, fh)
    return path


@pytest.fixture()
def small_dataset(workspace):
    write_spec("spec.json", d=16, seed=5)
    assert main(["gen", "--spec", "spec.json", "--n", "6", "--out", "ds"]) == 0
    return workspace


def test_train_eval_cycle(small_dataset):
    cfgp = run_config(small_dataset)
    assert main(["train", "--config", cfgp, "--out", "ckpt"]) == 0
    assert os.path.exists("ckpt/config.json")
    assert os.path.exists("ckpt/history.csv")
    assert main(["eval", "--ckpt", "ckpt", "--data", "ds",
                 "--out", "metrics.json"]) == 0
    doc = json.load(open("metrics.json"))
    assert doc["config_hash"] == hashlib.sha256(
        open("ckpt/config.json", "rb").read()).hexdigest()
    assert len(doc["per_sample_l2"]) == 6

    # eval on the training set reproduces the final history row
    hist = json.load(open("ckpt/history.json"))
    assert abs(doc["mean_l2"] - hist["val_l2"][-1]) < 1e-10
    assert abs(doc["mean_h1"] - hist["val_h1"][-1]) < 1e-10


def test_train_losses_differ(small_dataset):
    p1 = run_config(small_dataset, loss="l2")
    assert main(["train", "--config", p1, "--out", "c1"]) == 0
    p2 = run_config(small_dataset, loss="h1")
    assert main(["train", "--config", p2, "--out", "c2"]) == 0
    h1 = json.load(open("c1/history.json"))
    h2 = json.load(open("c2/history.json"))
    assert h1["train_loss"] != h2["train_loss"]


def test_train_unknown_model_key(small_dataset, capsys):
    path = run_config(small_dataset)
    doc = json.load(open(path))
    doc["model"]["wizardry"] = True
    json.dump(doc, open(path, "w"))
    assert main(["train", "--config", path, "--out", "c"]) == 2
    assert "wizardry" in capsys.readouterr().err


def test_train_missing_dataset_path(workspace, capsys):
    path = run_config(workspace, train_dir="missing_dir")
    assert main(["train", "--config", path, "--out", "c"]) == 2
    assert "missing_dir" in capsys.readouterr().err


def test_eval_shape_mismatch(small_dataset):
    cfgp = run_config(small_dataset)
    assert main(["train", "--config", cfgp, "--out", "ckpt"]) == 0
    write_spec("spec9.json", d=9, kind="constant")
    assert main(["gen", "--spec", "spec9.json", "--n", "1", "--out", "ds9"]) == 0
    assert main(["eval", "--ckpt", "ckpt", "--data", "ds9",
                 "--out", "m.json"]) == 2


# ----------------------------------------------------------------- superres

def test_superres_zero_levels_matches_eval(small_dataset):
    cfgp = run_config(small_dataset)
    assert main(["train", "--config", cfgp, "--out", "ckpt"]) == 0
    assert main(["eval", "--ckpt", "ckpt", "--data", "ds",
                 "--out", "m1.json"]) == 0
    assert main(["superres", "--ckpt", "ckpt", "--data-hi", "ds",
                 "--extra-levels", "0", "--out", "m2.json"]) == 0
    m1 = json.load(open("m1.json"))
    m2 = json.load(open("m2.json"))
    assert m1["mean_l2"] == m2["mean_l2"]
    assert m1["per_sample_h1"] == m2["per_sample_h1"]


def test_superres_untrained_plumbing_and_ratio_check(small_dataset):
    cfgp = run_config(small_dataset, epochs=1)
    assert main(["train", "--config", cfgp, "--out", "ckpt"]) == 0
    write_spec("spec32.json", d=32, seed=6)
    assert main(["gen", "--spec", "spec32.json", "--n", "2", "--out", "ds32"]) == 0
    assert main(["superres", "--ckpt", "ckpt", "--data-hi", "ds32",
                 "--extra-levels", "1", "--out", "sr.json"]) == 0
    doc = json.load(open("sr.json"))
    assert np.isfinite(doc["mean_l2"])
    # wrong ratio for the requested level count
    assert main(["superres", "--ckpt", "ckpt", "--data-hi", "ds32",
                 "--extra-levels", "2", "--out", "sr2.json"]) == 2


# ---------------------------------------------------------------- gradcheck

def test_gradcheck_passes(workspace):
    assert main(["gradcheck", "--size", "8", "--seed", "0"]) == 0


def test_gradcheck_size_cap(workspace):
    assert main(["gradcheck", "--size", "32"]) == 2


def test_gradcheck_detects_sabotaged_backward(workspace, monkeypatch):
    orig = mgno.tensor.gelu_grad_cnhw
    monkeypatch.setattr(mgno.tensor, "gelu_grad_cnhw",
                        lambda x, t=None: -orig(x, t))
    assert main(["gradcheck", "--size", "8", "--seed", "0"]) == 1
