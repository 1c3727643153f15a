import numpy as np
import pytest
import torch

from dicom_ssl.config import parse_config
from dicom_ssl.data import generate_synthetic, load_dataset

TINY = {
    "data": {"image_size": [8, 8], "batch_size": 2},
    "backbone": {"patch_size": 4, "embed_dim": 16, "depth": 2, "heads": 2, "mlp_ratio": 2.0},
    "head": {"K": 8, "hidden": 32, "bottleneck": 16},
    "decoder": {"hidden": 32, "bottleneck": 16},
    "train": {"epochs": 2, "checkpoint_every": 1},
    "optim": {"warmup_epochs": 1},
    "temp": {"warmup_epochs": 1},
}

SMALL = {
    "data": {"image_size": [32, 32], "batch_size": 8},
    "backbone": {"patch_size": 8, "embed_dim": 32, "depth": 2, "heads": 2, "mlp_ratio": 2.0},
    "head": {"K": 16, "hidden": 64, "bottleneck": 32},
    "decoder": {"hidden": 64, "bottleneck": 32},
    "train": {"epochs": 2, "checkpoint_every": 1},
    "optim": {"warmup_epochs": 1},
    "temp": {"warmup_epochs": 1},
    "probe": {"epochs": 30},
    "finetune": {"epochs": 2},
    "seg": {"epochs": 2, "channels": [8, 8]},
}


@pytest.fixture
def tiny_cfg():
    return parse_config(TINY)


@pytest.fixture
def small_cfg():
    return parse_config(SMALL)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    generate_synthetic(out, 10, 2, (32, 32), seed=3)
    return out


@pytest.fixture(scope="session")
def synth_small(synth_dir):
    return load_dataset(synth_dir / "manifest.csv", (32, 32), 8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def record_criterion(number, ok, detail):
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
