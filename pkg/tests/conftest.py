import numpy as np
import pytest
import torch

from vqapipe.datagen import LadderSpec, build_corpus, generate_groups, make_source

torch.set_num_threads(1)


def pytest_addoption(parser):
    parser.addoption("--run-desk", action="store_true", default=False,
                     help="run the desk-scale learning protocol (many CPU hours)")
    parser.addoption("--desk-root", default=None, help="working directory for the desk protocol (reused when resuming)")


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def report_criterion(request):
    """Record one PASS/FAIL line for the acceptance summary."""
    def record(number: int, title: str, passed: bool, detail: str = ""):
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")
        request.config.acceptance_lines.append(line)
        print(line)
    return record


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-desk"):
        return
    skip = pytest.mark.skip(reason="desk-scale protocol; enable with --run-desk")
    for item in items:
        if "desk" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Three 256x256x12 sources, two operators at two severities each."""
    root = tmp_path_factory.mktemp("corpus")
    sources = [make_source(s, 256, 256, 12) for s in range(3)]
    spec = LadderSpec(scales=(1.0,), operators=("blur", "noise"), severities=2)
    return build_corpus(sources, root, spec, seed=0)


@pytest.fixture(scope="session")
def small_groups(small_corpus):
    return generate_groups(small_corpus, total=10, seed=0, thr_ss=0.0, thr_ds=0.0).retained


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
