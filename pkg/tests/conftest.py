"""Shared fixtures and the acceptance-summary hook."""
import math
from array import array
from typing import List, Tuple

import pytest

from vaemix.rng import CounterRng
from vaemix.tensor import Tensor

# (number, description, passed, detail) rows appended by test_acceptance.py
ACCEPTANCE_RESULTS: List[Tuple[int, str, bool, str]] = []


def record_acceptance(number: int, description: str, passed: bool,
                      detail: str = "") -> None:
    ACCEPTANCE_RESULTS.append((number, description, passed, detail))
    assert passed, f"criterion {number} ({description}): {detail}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number, description, passed, detail in sorted(ACCEPTANCE_RESULTS):
        verdict = "PASS" if passed else "FAIL"
        line = f"[{verdict}] {number:2d}. {description}"
        if detail:
            line += f" ({detail})"
        tr.write_line(line)


def tensor_from_rows(rows) -> Tensor:
    n = len(rows)
    d = len(rows[0])
    t = Tensor((n, d))
    for i, row in enumerate(rows):
        for j, v in enumerate(row):
            t.data[i * d + j] = float(v)
    return t


def tensor_randn(shape, rng: CounterRng, scale: float = 1.0) -> Tensor:
    t = Tensor(shape)
    rng.fill_normal(t.data, t.size)
    if scale != 1.0:
        for i in range(t.size):
            t.data[i] *= scale
    return t


@pytest.fixture
def rng():
    return CounterRng(12345, 0)


def labels_array(values) -> array:
    return array("q", values)


def l2_rows(x: Tensor, recon: Tensor) -> List[float]:
    n, d = x.shape
    out = []
    for i in range(n):
        s = 0.0
        off = i * d
        for j in range(d):
            diff = x.data[off + j] - recon.data[off + j]
            s += diff * diff
        out.append(math.sqrt(s))
    return out
