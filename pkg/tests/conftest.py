"""Shared fixtures: a small world and fast configs for unit-level tests."""

import numpy as np
import pytest

from dmia.attack import DetectConfig, TrainConfig
from dmia.experiment import ExperimentConfig
from dmia.worldsim import WorldSpec, build_world

SMALL_WORLD = dict(n_member=800, n_teacher_gen=800, n_student_gen=800, n_nonmember=1600,
                   n_nonmember_heldout=800, n_holdout=400)


def small_experiment(seed=0, **kw) -> ExperimentConfig:
    base = dict(
        world=WorldSpec(**SMALL_WORLD),
        train=TrainConfig(epochs=40, batch_size=32, n_generated=400, hidden=20, out_dim=10),
        detect=DetectConfig(trials=20, batch_size=32),
        h=2, rounds=2, candidate_size=200, nonmember_train=400, nonmember_detect=800,
        calibration_size=200, calibration_rounds=3, baseline_queries=200, seed=seed,
    )
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="session")
def reference_world():
    return build_world(WorldSpec(seed=0))


@pytest.fixture(scope="session")
def small_world():
    return build_world(WorldSpec(seed=0, **SMALL_WORLD))


@pytest.fixture
def gen():
    return np.random.default_rng(12345)


# One summary line per acceptance criterion, printed at the end of the run
# whatever the capture mode.
ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion_line():
    def record(number: int, passed: bool, detail: str):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
