import os
from pathlib import Path

import numpy as np
import pytest

from gradmark.data import make_synthetic, split
from gradmark.nn import TrainConfig, build_model, mlp_config, train
from gradmark.watermark import generate_key_random


def desk_dir() -> Path:
    """Where the desk IDX archive lives; built once and reused across sessions."""
    return Path(os.environ.get("GRADMARK_DESK_DIR", Path(__file__).resolve().parent.parent / ".desk-data"))


@pytest.fixture(scope="session")
def blobs():
    """(train, test) of a 4-class 6x6 synthetic problem."""
    full = make_synthetic(4, 80, dims=(6, 6, 1), seed=2)
    return tuple(split(full, [0.75, 0.25], seed=2))


@pytest.fixture(scope="session")
def blob_key():
    return generate_key_random(16, 24, 36, 4, seed=5)


@pytest.fixture(scope="session")
def blob_cfg():
    return TrainConfig(epochs=6, batch_size=32, learning_rate=0.05, wm_batch_size=16, seed=1)


@pytest.fixture(scope="session")
def blob_models(blobs, blob_key, blob_cfg):
    """(unmarked, marked) small MLPs trained on the synthetic blobs."""
    train_set, _ = blobs
    init = build_model(mlp_config((6, 6, 1), (16,), 4, seed=3))
    plain, _ = train(init, train_set, blob_cfg)
    marked, _ = train(init, train_set, TrainConfig(**{**blob_cfg.to_dict(), "lam": 0.1}), blob_key)
    return plain, marked


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_acceptance: dict[str, tuple[str, float]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _acceptance[name] = (report.outcome, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, (outcome, duration) in sorted(_acceptance.items()):
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{verdict}  {name}  ({duration:.1f} s)")
