import json

import numpy as np
import pytest
import torch

from dicom_ssl.checkpoint import read_tensors, write_tensors
from dicom_ssl.data import load_dataset
from dicom_ssl.errors import CheckpointError, ShapeMismatchError
from dicom_ssl.pretrain import (init_state, load_checkpoint, load_student_backbone, pretrain,
                                save_checkpoint, train_step)

from .test_pretrain import _batch


def _files(path):
    return (path / "tensors.bin").read_bytes(), (path / "manifest.json").read_bytes()


@pytest.fixture
def trained(tiny_cfg):
    state = init_state(tiny_cfg, 4)
    for k in range(2):
        train_step(_batch(seed=k), state)
    return state


def test_round_trip_byte_identical(trained, tmp_path):
    save_checkpoint(trained, tmp_path / "a")
    again = load_checkpoint(tmp_path / "a")
    save_checkpoint(again, tmp_path / "b")
    assert _files(tmp_path / "a") == _files(tmp_path / "b")
    assert again.step == trained.step
    for k, v in trained.student.state_dict().items():
        assert torch.equal(v, again.student.state_dict()[k])


def test_manifest_records(trained, tmp_path):
    save_checkpoint(trained, tmp_path / "c")
    m = json.loads((tmp_path / "c" / "manifest.json").read_text())
    rec = m["tensors"][0]
    assert set(rec) == {"name", "shape", "dtype", "offset", "nbytes", "sha256"}
    assert rec["dtype"] == "float32"
    assert m["counters"]["step"] == 2
    total = sum(r["nbytes"] for r in m["tensors"])
    assert total == (tmp_path / "c" / "tensors.bin").stat().st_size


def test_truncated_blob_names_tensor(trained, tmp_path):
    path = tmp_path / "t"
    save_checkpoint(trained, path)
    blob = (path / "tensors.bin").read_bytes()
    (path / "tensors.bin").write_bytes(blob[:len(blob) // 2])
    with pytest.raises(CheckpointError, match=r"tensor '[\w.]+'.*truncated"):
        load_checkpoint(path)


def test_hash_mismatch(tmp_path):
    write_tensors(tmp_path, {"w": torch.ones(4)}, {})
    raw = bytearray((tmp_path / "tensors.bin").read_bytes())
    raw[0] ^= 0xFF
    (tmp_path / "tensors.bin").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="'w'.*hash"):
        read_tensors(tmp_path)


def test_missing_manifest(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)


def test_shape_mismatch_lists_everything(trained, tmp_path):
    save_checkpoint(trained, tmp_path / "s")
    other = trained.config.replace(**{"backbone.embed_dim": 32})
    with pytest.raises(ShapeMismatchError) as info:
        load_checkpoint(tmp_path / "s", other)
    assert len(info.value.mismatches) > 5
    assert any("pos_embed" in m for m in info.value.mismatches)
    with pytest.raises(ShapeMismatchError):
        load_student_backbone(tmp_path / "s", other)


def test_student_backbone_loads_without_decoder(trained, tmp_path):
    save_checkpoint(trained, tmp_path / "d")
    model, _ = load_student_backbone(tmp_path / "d")
    assert torch.equal(model.pos_embed, trained.student.backbone.pos_embed)


def test_resume_bit_identical(tiny_cfg, synth_dir, tmp_path):
    ds = load_dataset(synth_dir / "manifest.csv", (8, 8), 4)
    cfg = tiny_cfg.replace(**{"data.batch_size": 4, "train.epochs": 3})
    full = pretrain(ds, cfg, tmp_path / "full")
    assert full.step == 3 * (len(ds.split("train")) // 4)
    part = tmp_path / "part"
    pretrain(ds, cfg, part, max_steps=5)          # stops mid-epoch
    save_checkpoint(load_checkpoint(part / "checkpoint"), tmp_path / "mid")
    resumed = pretrain(ds, cfg, part, resume=part / "checkpoint")
    assert resumed.step == full.step
    assert _files(tmp_path / "full" / "checkpoint") == _files(part / "checkpoint")
    assert (tmp_path / "full" / "loss_curve.csv").read_text() == (part / "loss_curve.csv").read_text()
    assert (tmp_path / "full" / "checkpoints" / "epoch_0001" / "tensors.bin").is_file()
