import time

import numpy as np
import pytest
import torch

from fedkf.config import ClientConfig, DatasetConfig, ExperimentConfig, ModelConfig
from fedkf.data import PartitionSpec, make_synthetic, partition_dirichlet

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion checked by this test")


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def blobs():
    return make_synthetic(num_classes=4, samples_per_class=40, shape=6, separation=4.0, seed=3)


@pytest.fixture(scope="session")
def shards(blobs):
    return partition_dirichlet(blobs, PartitionSpec(num_clients=4, alpha=0.5, seed=1))


def tiny_config(**changes) -> ExperimentConfig:
    """Seconds-scale synthetic experiment used across tests."""
    base = ExperimentConfig(
        name="tiny",
        dataset=DatasetConfig(name="synthetic", num_classes=4, samples_per_class=30, shape=(6,), separation=3.0),
        partition=PartitionSpec(num_clients=5, alpha=0.3, seed=0),
        model=ModelConfig(classifier="tiny_mlp", hidden=8, generator="tiny_gen", noise_dim=4, gen_hidden=8),
        client=ClientConfig(epochs=2, batch_size=8, lr=0.1),
        rounds=3,
        tau=0.4,
        seeds=(0,),
    )
    return base.replace(**changes) if changes else base


@pytest.fixture
def config():
    return tiny_config()


# -- acceptance reporting ---------------------------------------------------


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_call(item):
    start = time.perf_counter()
    yield
    item.user_properties.append(("elapsed", time.perf_counter() - start))


def pytest_runtest_logreport(report):
    marker = getattr(report, "_criterion", None)
    if marker is None or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    number, text = marker
    elapsed = dict(report.user_properties).get("elapsed", 0.0)
    _CRITERIA[number] = {"text": text, "passed": report.passed, "elapsed": elapsed}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result()._criterion = marker.args


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        c = _CRITERIA[number]
        status = "PASS" if c["passed"] else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d}: {status}  ({c['elapsed']:.1f} s)  {c['text']}")
