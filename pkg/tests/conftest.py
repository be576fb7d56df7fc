import numpy as np
import pytest

from stageprune.calib import StagePartition, build_all_stage_calibrations
from stageprune.prune import build_stage_trajectories
from stageprune.routedb import build_db
from stageprune.toydiff import DenoiserModel, ModelConfig, build_schedule, make_dataset, train


@pytest.fixture(scope="session")
def sched():
    return build_schedule()


@pytest.fixture(scope="session")
def data():
    return make_dataset(n=2000, seed=0)


@pytest.fixture(scope="session")
def trained(data, sched):
    model, losses = train(DenoiserModel(ModelConfig(), seed=0), data, sched, epochs=30, seed=0)
    model.eval()
    return model, losses


@pytest.fixture(scope="session")
def model(trained):
    return trained[0]


@pytest.fixture(scope="session")
def partition10():
    return StagePartition(10, 1000)


@pytest.fixture(scope="session")
def calibs10(data, partition10, sched):
    return build_all_stage_calibrations(data, partition10, sched, size=256, seed=0)


@pytest.fixture(scope="session")
def obs_db(model, calibs10, partition10):
    trajs = build_stage_trajectories(model, "obs", calibs10, 16)
    return build_db(trajs, l_max=16, partition=partition10, backbone=model)


@pytest.fixture(scope="session")
def wanda_db(model, calibs10, partition10):
    trajs = build_stage_trajectories(model, "wanda", calibs10, 16)
    return build_db(trajs, l_max=16, partition=partition10, backbone=model)


@pytest.fixture(scope="session")
def layerdrop_db(model, calibs10, partition10):
    trajs = build_stage_trajectories(model, "layerdrop", calibs10, 4)
    return build_db(trajs, l_max=4, partition=partition10, backbone=model)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for an acceptance criterion, then assert it."""
    recorded = []

    def record(name: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} | {name} | {detail}"
        recorded.append(line)
        _ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    yield record
    if not recorded:
        _ACCEPTANCE_LINES.append(f"FAIL | {request.node.name} | raised before reaching its check")


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
