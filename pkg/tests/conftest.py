import pytest
import torch

from mrdf.config import tiny_config
from mrdf.dataio import SynthSpec, generate_synthetic


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """10 identities x 8 clips per category, tiny shapes; shared read-only."""
    out = tmp_path_factory.mktemp("synth")
    spec = SynthSpec(n_identities=10, clips_per_category=8, frames=6, seed=3)
    return generate_synthetic(spec, out)


@pytest.fixture
def tiny_cfg():
    return tiny_config(**{"train.epochs": 2, "train.batch_size": 8, "train.val_fraction": 0.2})


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
