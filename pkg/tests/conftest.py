import numpy as np
import pytest

from atvardiff import tensor as T


@pytest.fixture(autouse=True)
def float64():
    """Tests run in the 64-bit profile unless they switch explicitly."""
    with T.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    from atvardiff.data import build_dataset

    out = tmp_path_factory.mktemp("tiny_ds")
    build_dataset(None, out, 24, crop=16, seed=0, procedural=8)
    return out


@pytest.fixture
def tiny_config(tmp_path, tiny_dataset_dir):
    from atvardiff.config import TrainConfig

    return TrainConfig(epochs=2, iters_per_epoch=5, batch_size=2, crop_size=16, T=10, base_width=8, time_dim=16,
                       log_every=1, dataset=str(tiny_dataset_dir), checkpoint_dir=str(tmp_path / "run"))


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
