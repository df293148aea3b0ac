import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cac.banks import Banks, topk_neighbors  # noqa: E402
from cac.core import softmax  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


def random_banks(rng, n, d, c, k, sharp=1.0):
    """Banks over ``n`` random unit features with neighbors from exact top-k."""
    f = rng.standard_normal((n, d))
    f /= np.linalg.norm(f, axis=1, keepdims=True)
    p = softmax(sharp * rng.standard_normal((n, c)))
    banks = Banks.from_arrays(f, p, np.zeros((n, k), dtype=np.int64))
    banks.neighbors = topk_neighbors(banks, f, k, np.arange(n))
    return banks


def random_neighbor_rows(rng, n, k):
    """Arbitrary valid N: k distinct non-self indices per row."""
    rows = []
    for i in range(n):
        choices = np.delete(np.arange(n), i)
        rows.append(rng.choice(choices, size=k, replace=False))
    return np.array(rows)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
