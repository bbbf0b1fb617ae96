import numpy as np
import pytest

from kvstream.tensors import HeadTensor


def random_head_tensor(rng, heads, tokens, channels, scale=1.0):
    return HeadTensor((rng.standard_normal((heads, tokens, channels)) * scale).astype(np.float32))


def rel_l2(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
