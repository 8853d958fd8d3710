import copy

import numpy as np
import pytest

from twostage.model import DualEncoder, ModelConfig, PretrainConfig, pretrain
from twostage.synthdata import make_task, make_universe


@pytest.fixture(scope="session")
def small_universe():
    # 12 source classes for pretraining, 8 shifted target classes for tasks
    return make_universe(seed=3, n_classes=20, samples_per_class=24, n_shifted=8, shift=0.5,
                         gain_jitter=0.2)


@pytest.fixture(scope="session")
def pretrained(small_universe):
    cfg = PretrainConfig(steps=120, batch=12, lr=3e-3, holdout_per_class=4,
                         model=ModelConfig(n_classes=20, grid=small_universe.grid))
    model, report = pretrain(small_universe, cfg)
    return model, report


@pytest.fixture
def model(pretrained):
    return copy.deepcopy(pretrained[0])


@pytest.fixture(scope="session")
def small_task(small_universe):
    return make_task(small_universe, small_universe.target_classes(), k=2, eval_per_class=10, seed=7)


@pytest.fixture(scope="session")
def a2a_task(small_universe):
    return make_task(small_universe, small_universe.target_classes(), k=2, eval_per_class=10, seed=7,
                     mode="all-to-all")


@pytest.fixture
def fresh_model():
    return DualEncoder(ModelConfig(n_classes=10, grid=(2, 2, 12), seed=1))


def random_images(n, grid=(2, 2, 12), seed=0):
    return np.random.default_rng(seed).normal(size=(n, *grid))


# -- acceptance summary -----------------------------------------------------------
# test_acceptance records one verdict per criterion here; the summary prints
# them after the run regardless of output capturing.
ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {title}: {detail}")
