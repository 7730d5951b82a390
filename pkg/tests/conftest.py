import numpy as np
import pytest
import torch

from affgan.data import build_dataset, synth_fixture


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_fixture(tmp_path_factory):
    """40 synthetic 32x32 images and their manifest."""
    out = tmp_path_factory.mktemp("fixture")
    manifest = synth_fixture(40, seed=3, out_dir=out, image_size=32)
    return manifest


@pytest.fixture(scope="session")
def small_dataset(small_fixture):
    return build_dataset([small_fixture])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
