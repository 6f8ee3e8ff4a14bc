import numpy as np
import pytest

from stilt_bench.core import DeterministicRng
from stilt_bench.data import SyntheticSpec, generate_synthetic
from stilt_bench.model import ModalityInput, ModelConfig, init_model

_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_line():
    """Record a one-line PASS/FAIL verdict for the terminal summary."""

    def record(criterion, passed, detail):
        _ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return DeterministicRng(1234)


@pytest.fixture
def small_model():
    return init_model(ModelConfig(dim=8, fused_dim=8, dropout=0.0), DeterministicRng(5))


@pytest.fixture
def small_batch():
    r = DeterministicRng(99)
    return ModalityInput(r.normal(size=(6, 8)), r.normal(size=(6, 8))), np.array([0, 1, 2, 0, 1, 2])


def tiny_spec(**overrides):
    base = dict(
        seed=3,
        dimension=4,
        meme_counts={"train": [20, 20, 20], "val": [4, 4, 4], "test": [5, 5, 5]},
        image_only_counts=(10, 10, 10),
        text_only_counts=(10, 10, 10),
        image_signal=1.0,
        text_signal=2.0,
        noise_scale=0.5,
        domain_shift=0.2,
    )
    base.update(overrides)
    return SyntheticSpec(**base)


@pytest.fixture
def tiny_data():
    return generate_synthetic(tiny_spec())
