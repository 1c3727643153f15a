import json
import subprocess
import sys

import pytest

from dicom_ssl.cli import main

from .conftest import TINY


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_soc_subcommand(tmp_path, capsys):
    curve = tmp_path / "curve.csv"
    curve.write_text("epoch,AUPR\n1,0\n2,1\n3,1\n")
    code, out, _ = _run(capsys, "soc", "--curve", curve, "--out", tmp_path / "soc.json")
    assert code == 0
    assert json.loads(out)["soc"] == 0.75
    assert json.loads((tmp_path / "soc.json").read_text())["epochs"] == 3


def test_soc_missing_column_is_data_error(tmp_path, capsys):
    curve = tmp_path / "curve.csv"
    curve.write_text("epoch,acc\n1,0.5\n")
    code, _, err = _run(capsys, "soc", "--curve", curve)
    assert code == 1
    assert "AUPR" in json.loads(err)["message"]


def test_unknown_subcommand_exits_2():
    res = subprocess.run([sys.executable, "-m", "dicom_ssl.cli", "frobnicate"],
                         capture_output=True, text=True)
    assert res.returncode == 2


def test_version_flag():
    res = subprocess.run([sys.executable, "-m", "dicom_ssl.cli", "--version"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("dicom-ssl ")


def test_bad_config_exits_1_with_violations(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"mask": {"ratio": 1.3}}))
    code, _, err = _run(capsys, "pretrain", "--config", cfg, "--out", tmp_path / "run",
                        "--data", tmp_path / "none.csv")
    assert code == 1
    record = json.loads(err)
    assert any("mask.ratio" in v for v in record["violations"])


def test_pretrain_then_probe_and_cluster(tmp_path, capsys):
    cfg = dict(TINY)
    cfg["probe"] = {"epochs": 2}
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps(cfg))
    code, out, _ = _run(capsys, "gen-synth", "--per-class", 8, "--size", "8x8",
                        "--out", tmp_path / "data")
    assert code == 0 and json.loads(out)["images"] == 16
    manifest = tmp_path / "data" / "manifest.csv"
    code, out, _ = _run(capsys, "pretrain", "--config", cfg_path, "--data", manifest,
                        "--out", tmp_path / "run", "--max-steps", 2)
    assert code == 0 and json.loads(out)["step"] == 2
    assert (tmp_path / "run" / "config.resolved.json").is_file()
    code, out, _ = _run(capsys, "probe", "--config", cfg_path, "--ckpt", tmp_path / "run" / "checkpoint",
                        "--data", manifest, "--out", tmp_path / "probe.json")
    assert code == 0
    report = json.loads((tmp_path / "probe.json").read_text())
    assert len(report["epochs"]) == 2
    code, out, _ = _run(capsys, "cluster-eval", "--ckpt", tmp_path / "run" / "checkpoint",
                        "--data", manifest, "--split", "all", "--out", tmp_path / "cl.json",
                        "--embeddings", tmp_path / "emb.csv")
    assert code == 0
    assert 0 <= json.loads(out)["rand_index"] <= 1
    assert len((tmp_path / "emb.csv").read_text().splitlines()) == 17


def test_missing_manifest_is_error(tmp_path, capsys):
    code, _, err = _run(capsys, "probe", "--data", tmp_path / "nope.csv", "--out", tmp_path / "r.json")
    assert code == 1 and "error" in json.loads(err)
