import pytest

from spurscope.data import SpuriousDatasetSpec, generate_dataset
from spurscope.models import SmallCnnConfig, build_model
from spurscope.train import TrainConfig, train


@pytest.fixture(scope="session")
def rho05_cnn():
    """Small CNN trained 30 epochs on uncorrelated data (about 20 s)."""
    ds = generate_dataset(SpuriousDatasetSpec(n_per_class=200, rho=0.5, seed=21))
    model = build_model(SmallCnnConfig(), seed=0)
    train(model, ds, TrainConfig(epochs=30, lr=0.1, batch_size=16))
    return model, ds


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS):
            terminalreporter.write_line(line)
