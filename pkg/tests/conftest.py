import pytest

from distileval.config import build_config
from distileval.datastore import synthetic_dataset

SHAPE = (3, 8, 8)


@pytest.fixture(scope="session")
def tiny_data():
    train = synthetic_dataset(4, n_classes=3, shape=SHAPE, seed=0)
    test = synthetic_dataset(6, n_classes=3, shape=SHAPE, seed=1)
    return train, test


def tiny_doc(out_dir, preset="full", **extra):
    doc = {
        "output_dir": str(out_dir),
        "preset": preset,
        "seed": 0,
        "batch_size": 6,
        "eval_every": 3,
        "student": {"family": "resnet8", "width_profile": [4, 8, 8], "input_shape": list(SHAPE), "num_classes": 3},
        "teacher": {"arch": {"family": "cnn3", "width_profile": [4, 8, 8], "input_shape": list(SHAPE), "num_classes": 3}},
        "keep_rate": {"T": 2, "W": 1, "S": 5, "N": 6},
        "lr": {"lr_max": 1e-3, "T": 2, "S": 5, "T_max": 4, "T_warm": 1},
    }
    doc.update(extra)
    return doc


@pytest.fixture
def tiny_cfg(tmp_path):
    def make(preset="full", **extra):
        return build_config(tiny_doc(tmp_path / preset, preset, **extra))

    return make


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
