import os
from pathlib import Path

import numpy as np
import pytest
import torch

REPO = Path(__file__).resolve().parents[1]
MNIST_ROOT = Path(os.environ.get("MNIST_ROOT", REPO / "data" / "mnist"))


@pytest.fixture(scope="session")
def mnist_root() -> Path:
    if not (MNIST_ROOT / "t10k-labels-idx1-ubyte").exists() and not (MNIST_ROOT / "t10k-labels-idx1-ubyte.gz").exists():
        pytest.skip(f"MNIST IDX files not found under {MNIST_ROOT} (set MNIST_ROOT)")
    return MNIST_ROOT


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


_CRITERIA: dict[int, tuple[str, str]] = {}


@pytest.fixture
def record_criterion():
    """Record one acceptance line: ``record_criterion(num, status, detail)``."""

    def record(num: int, status: str, detail: str) -> None:
        _CRITERIA[num] = (status, detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        status, detail = _CRITERIA[num]
        terminalreporter.write_line(f"criterion {num}: {status}  {detail}")
