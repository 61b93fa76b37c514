import numpy as np
import pytest

from neuroencode import encoder as enc
from neuroencode import finetune as ft
from neuroencode import synthdata as sd

from _util import ACCEPTANCE, TINY_DATA, TINY_ENCODER


@pytest.fixture(scope="session")
def tiny_base():
    return enc.init_encoder(TINY_ENCODER)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_base):
    return sd.generate(TINY_DATA, tiny_base)


@pytest.fixture(scope="session")
def tiny_prepared(tiny_dataset):
    return tiny_dataset.prepare()


@pytest.fixture
def tiny_study(tiny_dataset, tiny_prepared):
    s = tiny_dataset.split
    return ft.StudyData(tiny_prepared, tiny_dataset.responses["S01"], s["train"], s["val"], s["test"])


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
