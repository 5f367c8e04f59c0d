import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from adaptconv import kernels  # noqa: E402


@pytest.fixture(params=sorted(kernels.available_backends()))
def backend(request):
    """Each importable kernel backend (compiled and pure numpy) in turn."""
    return kernels.available_backends()[request.param]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def randomize_norm_stats(module, rng):
    """Give every batch norm non-trivial running statistics and affine terms."""
    for name, t in module.param_store().items():
        if name.endswith("running_mean"):
            t.data = rng.normal(0.0, 0.3, t.shape)
        elif name.endswith("running_var"):
            t.data = rng.uniform(0.5, 2.0, t.shape)
        elif name.endswith("norm.scale"):
            t.data = rng.uniform(0.5, 1.5, t.shape)
        elif name.endswith("norm.shift") and t.requires_grad:
            t.data = rng.normal(0.0, 0.2, t.shape)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
