import functools
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from learngene.data import synthetic_dataset  # noqa: E402
from learngene.netspec import build_spec  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec():
    return build_spec("tiny", [4, 6, 6], pool_after=(1,), input_shape=(2, 6, 6), head_classes=3)


@pytest.fixture
def tiny_res_spec():
    return build_spec("tiny-res", [4, 6, 6, 8], pool_after=(1, 3), skips=[(2, 3)], input_shape=(2, 8, 8),
                      head_classes=3)


@functools.lru_cache(maxsize=None)
def _synthetic(n_classes, per_class, size, seed):
    return synthetic_dataset(n_classes=n_classes, per_class=per_class, size=size, seed=seed)


@pytest.fixture
def synth():
    return _synthetic(10, 12, 8, 0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
