"""Shared desk models. Session scoped: each is trained once per test run."""

import time

import numpy as np
import pytest

from rfa.adapter import RfaModule
from rfa.attacks import AttackSpec
from rfa.backbone import ref_net_d
from rfa.datasets import synth_blobs
from rfa.trainer import TrainConfig, train_fb, train_standard

ACCEPTANCE_LINES: list[str] = []
BUILD_SECONDS: dict[str, float] = {}   # wall time spent constructing session fixtures


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def blobs():
    """Radial blobs, 3 classes in 16 dims, 300 train / 300 test."""
    return synth_blobs(7, 200, 3, 16, 0.05).split(300)


@pytest.fixture(scope="session")
def blob_net(blobs):
    train, _ = blobs
    net = ref_net_d(16, 3, seed=1)
    train_standard(net, train, TrainConfig(mode="standard", epochs=20))
    return net


@pytest.fixture(scope="session")
def split_data():
    """Split-center blobs in 512 dims: 16 strongly separated coordinates plus
    496 weakly shifted ones that a standard net exploits."""
    return synth_blobs(1, 400, 3, 512, 0.05, layout="split").split(900)


@pytest.fixture(scope="session")
def split_backbone(split_data):
    train, _ = split_data
    t0 = time.perf_counter()
    net = ref_net_d(512, 3, seed=1)
    train_standard(net, train, TrainConfig(mode="standard", epochs=20))
    BUILD_SECONDS["split_backbone"] = time.perf_counter() - t0
    return net


@pytest.fixture(scope="session")
def split_fb(split_backbone, split_data):
    """RFA-FB with input-space inner attacks (the FB-AE variant) on the split backbone."""
    train, _ = split_data
    t0 = time.perf_counter()
    rfa = RfaModule(split_backbone, 4, seed=3)
    cfg = TrainConfig(mode="fb", attack=AttackSpec(space="input"), epochs=15)
    rfa, record = train_fb(split_backbone, rfa, train, cfg)
    BUILD_SECONDS["split_fb"] = time.perf_counter() - t0
    return rfa, record


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8))
