import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

MNIST_DIR = Path(os.environ.get("DPN_MNIST_DIR", "/root/data/mnist"))

# criterion id -> (description, outcome), filled by test_acceptance.py
ACCEPTANCE = {}


def mnist_available():
    return (MNIST_DIR / "train-images-idx3-ubyte").exists() or \
        (MNIST_DIR / "train-images-idx3-ubyte.gz").exists()


@pytest.fixture(scope="session")
def mnist_dir():
    if not mnist_available():
        pytest.skip(f"MNIST files not found in {MNIST_DIR} (set DPN_MNIST_DIR)")
    return MNIST_DIR


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    num, desc = marker.args
    ok = call.excinfo is None
    prev = ACCEPTANCE.get(num)
    ACCEPTANCE[num] = (desc, ok and (prev is None or prev[1]))


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(num, desc): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        desc, ok = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {desc}")
