import os
import sys

# runtime criteria are stated for a single thread; pin BLAS before numpy loads
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from opera.numerics import Rng


@pytest.fixture
def rng():
    return Rng(12345)


def triple_loop_matmul(a, b):
    out = [[0.0] * len(b[0]) for _ in range(len(a))]
    for i in range(len(a)):
        for j in range(len(b[0])):
            acc = 0.0
            for t in range(len(b)):
                acc += a[i][t] * b[t][j]
            out[i][j] = acc
    return np.array(out)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
