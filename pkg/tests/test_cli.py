"""End-to-end checks of the command-line layer: artifact layout, exit
codes, rerun byte-identity, and the flag/config/default precedence."""

import json

import numpy as np
import pytest

from rankdebias.cli import main
from rankdebias.data import BiasedDataset
from rankdebias.nn import load_checkpoint
from rankdebias.spectral import read_matrix_csv

pytestmark = pytest.mark.filterwarnings("ignore:.*groups are empty")

# small-but-real settings shared by every command in this module
NET = ["--batch-size", "64", "--latent-dim", "8", "--hidden-dims", "16,16",
       "--proj-hidden", "16", "--proj-dim", "8", "--head-iters", "80",
       "--epochs", "3", "--warmup-epochs", "1", "--seed", "5"]


def run(argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Workspace with a generated dataset and both pretrained encoders."""
    root = tmp_path_factory.mktemp("cliws")
    assert run(["data", "gen", "--n", 480, "--classes", 4, "--bias-ratio", 0.95,
                "--input-dim", 6, "--seed", 3, "--out", root / "ds"]) == 0
    assert run(["pretrain", "--data", root / "ds", "--role", "biased",
                "--lambda-reg", 0.1, "--out", root / "pre_b", *NET]) == 0
    assert run(["pretrain", "--data", root / "ds", "--role", "main",
                "--out", root / "pre_m", *NET]) == 0
    return root


def read_csv_rows(path):
    lines = path.read_text().strip().splitlines()
    header = lines[0].split(",")
    return header, [dict(zip(header, ln.split(","))) for ln in lines[1:]]


# ------------------------------------------------------------------- data


def test_data_gen_layout_and_stdout(ws, capsys):
    rc = run(["data", "gen", "--n", 200, "--classes", 3, "--bias-ratio", 0.9,
              "--input-dim", 5, "--seed", 1, "--out", ws / "ds2"])
    out = capsys.readouterr().out
    assert rc == 0
    for name in ("inputs.csv", "labels.csv", "meta.json", "manifest.json"):
        assert (ws / "ds2" / name).exists()
    assert "n=200" in out and "classes=3" in out and "bias_ratio=0.9" in out
    assert "group counts" in out
    ds = BiasedDataset.load(ws / "ds2")
    assert len(ds) == 200 and ds.num_classes == 3


def test_data_cmnist_missing_file_names_path(tmp_path, capsys):
    rc = run(["data", "cmnist", "--images", tmp_path / "gone-images.idx",
              "--labels", tmp_path / "gone-labels.idx", "--out", tmp_path / "o"])
    assert rc == 2
    assert "gone-images.idx" in capsys.readouterr().err


def test_missing_dataset_directory_names_path(tmp_path, capsys):
    rc = run(["erm", "--data", tmp_path / "absent", "--out", tmp_path / "o", *NET])
    assert rc == 2
    assert "absent" in capsys.readouterr().err


# --------------------------------------------------------------- pretrain


def test_pretrain_artifacts_and_log_schema(ws):
    header, rows = read_csv_rows(ws / "pre_b" / "train_log.csv")
    assert header == ["epoch", "loss", "eff_rank", "lr"]
    assert len(rows) == 3
    for row in rows:
        assert float(row["eff_rank"]) <= np.log(8) + 1e-12
    ckpt, sidecar = load_checkpoint(ws / "pre_b" / "encoder.ckpt")
    assert ckpt.out_dim == 8
    assert sidecar["config"]["lambda_reg"] == 0.1
    assert "manifest_hash" in sidecar["config"]


def test_pretrain_role_main_equals_biased_zero_reg(ws, tmp_path):
    rc = run(["pretrain", "--data", ws / "ds", "--role", "biased",
              "--lambda-reg", 0.0, "--out", tmp_path / "pre0", *NET])
    assert rc == 0
    a = (ws / "pre_m" / "encoder.ckpt").read_bytes()
    b = (tmp_path / "pre0" / "encoder.ckpt").read_bytes()
    assert a == b
    assert (ws / "pre_m" / "train_log.csv").read_bytes() == \
        (tmp_path / "pre0" / "train_log.csv").read_bytes()
    ma = json.loads((ws / "pre_m" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "pre0" / "manifest.json").read_text())
    assert ma["manifest_hash"] == mb["manifest_hash"]


def test_pretrain_rerun_is_byte_identical(ws, tmp_path):
    rc = run(["pretrain", "--data", ws / "ds", "--role", "biased",
              "--lambda-reg", 0.1, "--out", tmp_path / "again", *NET])
    assert rc == 0
    assert (tmp_path / "again" / "encoder.ckpt").read_bytes() == \
        (ws / "pre_b" / "encoder.ckpt").read_bytes()
    assert (tmp_path / "again" / "train_log.csv").read_bytes() == \
        (ws / "pre_b" / "train_log.csv").read_bytes()


def test_erm_divergence_exits_1_and_keeps_partial_log(ws, tmp_path, capsys):
    rc = run(["erm", "--data", ws / "ds", "--base-lr", 1e150,
              "--out", tmp_path / "dvg", *NET])
    err = capsys.readouterr().err
    assert rc == 1
    assert "diverged" in err
    assert (tmp_path / "dvg" / "train_log.csv").exists()
    assert not (tmp_path / "dvg" / "encoder.ckpt").exists()


# -------------------------------------------------------------------- erm


def test_erm_artifacts(ws, tmp_path):
    rc = run(["erm", "--data", ws / "ds", "--out", tmp_path / "erm", *NET])
    assert rc == 0
    header, log_rows = read_csv_rows(tmp_path / "erm" / "train_log.csv")
    assert header == ["epoch", "loss", "ce", "rank_term", "lr", "eff_rank"]
    assert len(log_rows) == 3
    metrics = json.loads((tmp_path / "erm" / "metrics.json").read_text())
    for key in ("bias_conflict_acc", "bias_aligned_acc", "unbiased_acc"):
        assert isinstance(metrics[key], float)
    _, err_rows = read_csv_rows(tmp_path / "erm" / "error_set.csv")
    model_enc, _ = load_checkpoint(tmp_path / "erm" / "encoder.ckpt")
    head, _ = load_checkpoint(tmp_path / "erm" / "head.ckpt")
    ds = BiasedDataset.load(ws / "ds")
    from rankdebias.nn import apply
    pred = np.argmax(apply(head, apply(model_enc, ds.inputs)), axis=1)
    assert len(err_rows) == int((pred != ds.y).sum())


def test_erm_reversed_target_reports_bias_accuracy(ws, tmp_path, capsys):
    rc = run(["erm", "--data", ws / "ds", "--target", "b",
              "--out", tmp_path / "ermb", *NET])
    out = capsys.readouterr().out
    assert rc == 0
    assert "bias-label accuracy" in out
    metrics = json.loads((tmp_path / "ermb" / "metrics.json").read_text())
    assert metrics["target"] == "b"


# ------------------------------------------------------------------ debias


def test_debias_rerun_identical_and_artifacts(ws, tmp_path):
    args = ["debias", "--data", ws / "ds", "--biased-ckpt", ws / "pre_b" / "encoder.ckpt",
            "--main-ckpt", ws / "pre_m" / "encoder.ckpt", "--lambda-up", 4, *NET]
    assert run([*args, "--out", tmp_path / "d1"]) == 0
    assert run([*args, "--out", tmp_path / "d2"]) == 0
    assert (tmp_path / "d1" / "metrics.json").read_bytes() == \
        (tmp_path / "d2" / "metrics.json").read_bytes()
    assert (tmp_path / "d1" / "head.ckpt").read_bytes() == \
        (tmp_path / "d2" / "head.ckpt").read_bytes()
    _, rows = read_csv_rows(tmp_path / "d1" / "error_set.csv")
    metrics = json.loads((tmp_path / "d1" / "metrics.json").read_text())
    assert metrics["error_set_size"] == len(rows)
    assert metrics["mode"] == "linear-eval"
    assert not (tmp_path / "d1" / "encoder_finetuned.ckpt").exists()


def test_debias_semisup_writes_finetuned_encoder(ws, tmp_path):
    rc = run(["debias", "--data", ws / "ds", "--biased-ckpt", ws / "pre_b" / "encoder.ckpt",
              "--main-ckpt", ws / "pre_m" / "encoder.ckpt", "--lambda-up", 4,
              "--mode", "semisup", "--label-fraction", 0.5,
              "--finetune-epochs", 2, "--out", tmp_path / "d3", *NET])
    assert rc == 0
    assert (tmp_path / "d3" / "encoder_finetuned.ckpt").exists()
    metrics = json.loads((tmp_path / "d3" / "metrics.json").read_text())
    from rankdebias.data import label_fraction_split
    from rankdebias.pipeline import stream
    split_seed = int(stream(5, "label-split").integers(2**31))
    labeled, _ = label_fraction_split(BiasedDataset.load(ws / "ds"), 0.5,
                                      seed=split_seed)
    assert metrics["labeled_n"] == len(labeled)
    assert metrics["label_fraction"] == 0.5


def test_debias_dimension_mismatch_exits_2(ws, tmp_path, capsys):
    assert run(["data", "gen", "--n", 120, "--classes", 4, "--input-dim", 9,
                "--seed", 2, "--out", tmp_path / "wide"]) == 0
    rc = run(["debias", "--data", tmp_path / "wide",
              "--biased-ckpt", ws / "pre_b" / "encoder.ckpt",
              "--main-ckpt", ws / "pre_m" / "encoder.ckpt",
              "--out", tmp_path / "d4", *NET])
    assert rc == 2
    err = capsys.readouterr().err
    assert "width 6" in err and "width 9" in err


# ---------------------------------------------------------------- spectrum


def test_spectrum_outputs(ws, tmp_path, capsys):
    rc = run(["spectrum", "--ckpt", ws / "pre_b" / "encoder.ckpt",
              "--data", ws / "ds", "--out", tmp_path / "sp"])
    out = capsys.readouterr().out
    assert rc == 0
    spectrum = read_matrix_csv(tmp_path / "sp" / "spectrum.csv")
    assert spectrum[0, 0] == 1.0
    assert np.all(np.diff(spectrum[:, 0]) <= 0)
    corr = read_matrix_csv(tmp_path / "sp" / "correlation.csv")
    assert np.allclose(corr, corr.T)
    report = json.loads((tmp_path / "sp" / "report.json").read_text())
    printed = float(out.split("effective_rank")[1].split()[0])
    assert printed == pytest.approx(report["effective_rank"], abs=1e-12)


# ------------------------------------------------------------------- sweep


def test_sweep_rows_and_partial_failure(tmp_path, capsys):
    spec = {
        "family": "erm", "n": 240, "classes": 4, "test_n": 240,
        "r": [0.9], "lambda_reg": [0.0, -1.0], "seed": [0, 1],
        "config": {"epochs": 2, "warmup_epochs": 0, "batch_size": 64,
                   "latent_dim": 8, "hidden_dims": [16, 16]},
    }
    (tmp_path / "sweep.json").write_text(json.dumps(spec))
    rc = run(["sweep", "--spec", tmp_path / "sweep.json", "--out", tmp_path / "sw"])
    capsys.readouterr()
    assert rc == 1
    header, rows = read_csv_rows(tmp_path / "sw" / "sweep.csv")
    assert header[:6] == ["config_hash", "r", "lambda_reg", "lambda_up", "tau", "seed"]
    assert len(rows) == 4
    ok = [r for r in rows if r["status"] == "ok"]
    bad = [r for r in rows if r["status"].startswith("error")]
    assert len(ok) == 2 and len(bad) == 2
    for row in ok:
        assert float(row["conflict_acc"]) >= 0.0
    selection = json.loads((tmp_path / "sw" / "selection.json").read_text())
    assert selection["selected"] is not None


def test_sweep_all_ok_exits_0(tmp_path, capsys):
    spec = {
        "family": "erm", "n": 240, "classes": 4, "test_n": 240,
        "r": [0.9], "lambda_reg": [0.0], "seed": [0],
        "config": {"epochs": 2, "warmup_epochs": 0, "batch_size": 64,
                   "latent_dim": 8, "hidden_dims": [16, 16]},
    }
    (tmp_path / "sweep.json").write_text(json.dumps(spec))
    rc = run(["sweep", "--spec", tmp_path / "sweep.json", "--out", tmp_path / "sw"])
    capsys.readouterr()
    assert rc == 0


def test_sweep_missing_spec_exits_2(tmp_path, capsys):
    rc = run(["sweep", "--spec", tmp_path / "none.json", "--out", tmp_path / "sw"])
    assert rc == 2
    assert "none.json" in capsys.readouterr().err


# ------------------------------------------------- config file and env var


def test_config_file_and_flag_precedence(ws, tmp_path):
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({
        "epochs": 2, "warmup_epochs": 0, "batch_size": 64, "latent_dim": 8,
        "hidden_dims": [16, 16], "proj_hidden": 16, "proj_dim": 8, "seed": 9,
    }))
    rc = run(["pretrain", "--data", ws / "ds", "--role", "biased",
              "--config", cfg_file, "--epochs", 4, "--out", tmp_path / "p"])
    assert rc == 0
    manifest = json.loads((tmp_path / "p" / "manifest.json").read_text())
    assert manifest["config"]["epochs"] == 4          # flag wins
    assert manifest["config"]["latent_dim"] == 8      # file wins over default
    assert manifest["config"]["seed"] == 9
    _, rows = read_csv_rows(tmp_path / "p" / "train_log.csv")
    assert len(rows) == 4


def test_config_file_unknown_field_exits_2(ws, tmp_path, capsys):
    cfg_file = tmp_path / "bad.json"
    cfg_file.write_text(json.dumps({"learning_rate": 0.1}))
    rc = run(["pretrain", "--data", ws / "ds", "--role", "main",
              "--config", cfg_file, "--out", tmp_path / "p"])
    assert rc == 2
    assert "learning_rate" in capsys.readouterr().err


def test_output_root_env_var(ws, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("RANKDEBIAS_OUT", str(tmp_path))
    rc = run(["spectrum", "--ckpt", ws / "pre_b" / "encoder.ckpt",
              "--data", ws / "ds", "--out", "rooted"])
    capsys.readouterr()
    assert rc == 0
    assert (tmp_path / "rooted" / "report.json").exists()


def test_absolute_out_ignores_env_var(ws, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("RANKDEBIAS_OUT", str(tmp_path / "elsewhere"))
    rc = run(["spectrum", "--ckpt", ws / "pre_b" / "encoder.ckpt",
              "--data", ws / "ds", "--out", tmp_path / "direct"])
    capsys.readouterr()
    assert rc == 0
    assert (tmp_path / "direct" / "report.json").exists()
    assert not (tmp_path / "elsewhere").exists()
