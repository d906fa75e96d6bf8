import numpy as np
import pytest

from robustgen.data import DatasetSpec, synth_dataset
from robustgen.models import ModelSpec, build_model
from robustgen.training import TrainConfig, train

# Desk scale shared by the trend checks: 16x16 inputs, 10 classes, 64 samples per class.
DESK_DATA = DatasetSpec(image_size=16, samples_per_class=64)
DESK_MODELS = {
    "CNN": ModelSpec(family="CNN", widths=[8, 16, 32, 64], input_shape=(3, 16, 16)),
    "Hybrid": ModelSpec(family="Hybrid", stages="CTTT", widths=[8, 16, 32, 64], input_shape=(3, 16, 16)),
}


class DeskRuns:
    """Trains each (family, method, seed, l1_lambda) combination once per session."""

    def __init__(self):
        self._data = {}
        self._models = {}

    def data(self, seed):
        if seed not in self._data:
            self._data[seed] = synth_dataset(DESK_DATA, seed)
        return self._data[seed]

    def model(self, family="CNN", method="sat", seed=0, l1_lambda=0.0, epochs=30):
        key = (family, method, seed, l1_lambda, epochs)
        if key not in self._models:
            d = self.data(seed)
            model = build_model(DESK_MODELS[family], seed)
            cfg = TrainConfig(method=method, epochs=epochs, seed=seed, l1_lambda=l1_lambda, eval_every=0)
            train(model, d.x_train, d.y_train, cfg)
            self._models[key] = model
        return self._models[key]


@pytest.fixture(scope="session")
def desk():
    return DeskRuns()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# One pass/fail line per acceptance criterion, printed after the run.
CRITERIA: dict[int, dict] = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_") or (report.when == "setup" and report.passed):
        return
    if report.when == "teardown" and report.passed:
        return
    number = int(name.split("_")[2])
    entry = CRITERIA.setdefault(number, {"name": name, "passed": True, "detail": ""})
    entry["passed"] = entry["passed"] and report.passed
    for key, value in report.user_properties:
        if key == "detail":
            entry["detail"] = value


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        e = CRITERIA[number]
        status = "PASS" if e["passed"] else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {status}  {e['name']}  {e['detail']}")
