import os
from pathlib import Path

import numpy as np
import pytest

from vaelab.datasets import load_mnist_dir

ROOT = Path(__file__).resolve().parents[1]
MNIST_DIR = Path(os.environ.get("VAE_LAB_MNIST_DIR", ROOT / "data" / "mnist"))


def mnist_available() -> bool:
    return any(MNIST_DIR.glob("train-images-idx3-ubyte*"))


@pytest.fixture(scope="session")
def mnist_train():
    if not mnist_available():
        pytest.skip(f"MNIST IDX files not found in {MNIST_DIR}")
    return load_mnist_dir(MNIST_DIR, "train")


@pytest.fixture
def toy_batch():
    rng = np.random.default_rng(0)
    return rng.uniform(0, 1, (5, 4))


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_report(request):
    """``report(n, ok, detail)`` records one summary line per acceptance criterion."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def report(n, ok, detail):
        lines.append((n, bool(ok), detail))
        return ok

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(lines, key=lambda t: t[0]):
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
