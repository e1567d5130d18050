import pytest

from pict.config import RunConfig
from pict.datagen import make_dataset

TINY = dict(image_size=32, patch_size=4, embed_dim=8, depths=(1, 1), heads=(1, 2), window=4, num_stages=2,
            epochs=1, batch_size=4, train_counts=(4, 4), test_counts=(3, 3), area_min=0.05, area_max=0.15)


@pytest.fixture
def tiny_cfg():
    return RunConfig(**TINY)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_data")
    return root, make_dataset(RunConfig(**TINY).data, root)


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def report(request, capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def emit(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.acceptance_lines.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
