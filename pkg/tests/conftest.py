import numpy as np
import pytest

from gbt.config import TrainConfig
from gbt.data import SplitSpec, build_dataset, synthetic_series


def small_config(**changes) -> TrainConfig:
    base = dict(input_len=16, horizon=8, d_model1=8, heads1=2, n_blocks=2, n_pyramids=2,
                d_model2=16, heads2=2, n_decoder_layers=1, dropout=0.0, batch_size=16,
                lr=1e-3, max_epochs=2, patience=3, seed=7)
    base.update(changes)
    return TrainConfig(**base)


@pytest.fixture
def tiny_dataset():
    return build_dataset(synthetic_series(400, 2, seed=11, shift_every=100), SplitSpec(), "univariate")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
