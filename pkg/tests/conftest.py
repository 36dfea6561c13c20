import sys

import numpy as np
import pytest

from regionvqa.data import SyntheticSpec, answer_vocab, generate
from regionvqa.numerics import precision


@pytest.fixture
def f64():
    with precision("float64"):
        yield


@pytest.fixture(scope="session")
def small_dataset():
    spec = SyntheticSpec(num_train_images=8, num_val_images=6, questions_per_image=3, seed=5)
    scenes, splits = generate(spec)
    return spec, scenes, splits, answer_vocab(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in module.summary_lines():
        terminalreporter.write_line(line)
