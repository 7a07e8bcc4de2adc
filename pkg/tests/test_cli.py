import json
import os
import subprocess
import sys
from datetime import timedelta

import numpy as np
import pytest

from motcast import __version__
from motcast.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, LOCK_NAME, main
from motcast.data import format_timestamp, ingest_raw

SMALL = {
    "grid": {"n_lat": 8, "n_lon": 16, "depth_levels": [0.0, 100.0], "variables": ["T", "S"]},
    "data": {"n_steps": 120},
    "recipe": {"seed": 3},
    "net": {"latent_dim": 8, "patch": 2, "depth": 1, "window": 2, "heads": 2, "mlp_ratio": 2},
    "train": {"iterations": 4, "peak_lr": 1e-3},
    "finetune": {"iterations": 2, "horizon": 2},
    "eval": {"steps": 4, "max_inits": 4, "buoys_per_step": 10},
    "ablate": {"seeds": [0], "steps": 2},
}


def _write(path, cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = _write(d / "cfg.json", SMALL)
    assert main(["gen-data", "--config", cfg, "--out", str(d / "data")]) == EXIT_OK
    assert main(["train", "--config", cfg, "--data", str(d / "data"), "--out", str(d / "pt")]) == EXIT_OK
    return d, cfg


def test_gen_data_contract(workdir):
    d, _ = workdir
    meta = json.loads((d / "data" / "grid.json").read_text())
    files = sorted(p for p in os.listdir(d / "data") if p.startswith("state_"))
    assert len(files) == 120 == len(meta["timestamps"])
    assert all(os.path.getsize(d / "data" / f) == 5 * 8 * 16 * 4 for f in files)
    assert meta["recipe"]["seed"] == 3 and len(meta["config_sha256"]) == 64


def test_missing_seed_is_config_error(tmp_path, capsys):
    cfg = _write(tmp_path / "c.json", {**SMALL, "recipe": {"noise": 0.05}})
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "missing required field(s) ['seed']" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_unknown_key_is_config_error(tmp_path, capsys):
    cfg = _write(tmp_path / "c.json", {**SMALL, "net": {"latent_dims": 8}})
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "unknown keys ['latent_dims']" in capsys.readouterr().err


def test_seed_flag_overrides_config(workdir, tmp_path):
    _, cfg = workdir
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "o"), "--seed", "7", "--steps", "10"]) == 0
    assert json.loads((tmp_path / "o" / "grid.json").read_text())["recipe"]["seed"] == 7


def test_non_empty_dir_without_force(workdir, tmp_path):
    d, cfg = workdir
    out = tmp_path / "data"
    assert main(["gen-data", "--config", cfg, "--out", str(out), "--steps", "10"]) == EXIT_OK
    before = {p: (out / p).read_bytes() for p in os.listdir(out)}
    assert main(["gen-data", "--config", cfg, "--out", str(out), "--steps", "12"]) == EXIT_IO
    assert {p: (out / p).read_bytes() for p in os.listdir(out)} == before
    assert main(["gen-data", "--config", cfg, "--out", str(out), "--steps", "12", "--force"]) == EXIT_OK
    assert len(ingest_raw(out)) == 12
    assert not (out / LOCK_NAME).exists()


def test_locked_dir_refused(workdir, tmp_path):
    d, cfg = workdir
    out = tmp_path / "busy"
    out.mkdir()
    (out / LOCK_NAME).write_text("123")
    assert main(["gen-data", "--config", cfg, "--out", str(out), "--force", "--steps", "10"]) == EXIT_IO


def test_missing_inputs_are_io_errors(workdir, tmp_path):
    d, cfg = workdir
    assert main(["train", "--config", cfg, "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == EXIT_IO
    assert main(["gen-data", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path / "o")]) == EXIT_IO
    assert main(["predict", "--from", str(tmp_path / "x.bin"), "--data", str(d / "data"),
                 "--init", "2006-01-05T00:00:00Z", "--steps", "2", "--out", str(tmp_path / "p")]) == EXIT_IO


def test_train_outputs(workdir):
    d, _ = workdir
    names = set(os.listdir(d / "pt"))
    assert {"ckpt_pretrain.bin", "manifest.json", "train_log.csv", "norm_stats.json", "config.json",
            "selection_matrix.csv"} <= names
    assert len((d / "pt" / "train_log.csv").read_text().splitlines()) == 5


def test_finetune_predict_40_steps(workdir):
    d, cfg = workdir
    assert main(["finetune", "--config", cfg, "--from", str(d / "pt" / "ckpt_pretrain.bin"),
                 "--data", str(d / "data"), "--out", str(d / "ft")]) == EXIT_OK
    data = ingest_raw(d / "data")
    init = data.timestamps[50]
    assert main(["predict", "--from", str(d / "ft" / "ckpt_finetune.bin"), "--data", str(d / "data"),
                 "--init", format_timestamp(init), "--steps", "40", "--out", str(d / "pred")]) == EXIT_OK
    pred = ingest_raw(d / "pred")
    assert len(pred) == 40
    assert pred.timestamps == [init + timedelta(hours=6 * (k + 1)) for k in range(40)]
    assert np.isfinite(pred.values).all()
    meta = json.loads((d / "pred" / "grid.json").read_text())
    assert meta["init_time"] == format_timestamp(init) and meta["provenance"]["stage"] == "finetune"


def test_predict_bad_init(workdir, tmp_path):
    d, _ = workdir
    ckpt = str(d / "pt" / "ckpt_pretrain.bin")
    args = ["predict", "--from", ckpt, "--data", str(d / "data"), "--steps", "2"]
    assert main(args + ["--init", "1999-01-01T00:00:00Z", "--out", str(tmp_path / "a")]) == EXIT_CONFIG
    assert main(args + ["--init", "yesterday", "--out", str(tmp_path / "b")]) == EXIT_CONFIG


def test_evaluate_byte_identical(workdir, tmp_path):
    d, cfg = workdir
    ckpt = str(d / "pt" / "ckpt_pretrain.bin")
    for run in ("a", "b"):
        assert main(["evaluate", "--config", cfg, "--from", ckpt, "--data", str(d / "data"),
                     "--out", str(tmp_path), "--run-id", run]) == EXIT_OK
    a, b = tmp_path / "a", tmp_path / "b"
    csvs = sorted(p for p in os.listdir(a) if p.endswith(".csv"))
    assert {"rmse.csv", "rmse_by_depth.csv", "obs_eval.csv", "rmse_daily.csv"} <= set(csvs)
    for name in sorted(os.listdir(a)):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_finetune_horizon_one_rejected(workdir, tmp_path):
    d, _ = workdir
    cfg = _write(tmp_path / "c.json", {**SMALL, "finetune": {"iterations": 1, "horizon": 1}})
    assert main(["finetune", "--config", cfg, "--from", str(d / "pt" / "ckpt_pretrain.bin"),
                 "--data", str(d / "data"), "--out", str(tmp_path / "ft")]) == EXIT_CONFIG


def test_ablate(workdir, tmp_path):
    d, cfg = workdir
    assert main(["ablate", "--config", cfg, "--data", str(d / "data"), "--iterations", "2",
                 "--variants", "full,woMoT", "--out", str(tmp_path)]) == EXIT_OK
    rows = (tmp_path / "ablation" / "ablation_compare.csv").read_text().splitlines()
    assert rows[0] == "variant,seed,variable,depth_m,lead_hours,rmse,n_inits"
    assert len(rows) == 1 + 2 * 5 * 2
    assert main(["ablate", "--config", cfg, "--data", str(d / "data"), "--variants", "full,woPrior",
                 "--out", str(tmp_path), "--run-id", "x"]) == EXIT_CONFIG


def test_version_and_entry_point():
    out = subprocess.run([sys.executable, "-m", "motcast.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip() == f"motcast {__version__} (checkpoint format 1)"


def test_workers_env(workdir, tmp_path, monkeypatch):
    d, cfg = workdir
    monkeypatch.setenv("MOTCAST_WORKERS", "1")
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "w"), "--steps", "8"]) == EXIT_OK
