import pytest
import torch

from braintalker.dataio import load_manifest, split_corpus
from braintalker.synthdata import SynthConfig, generate_corpus
from braintalker.training import tiny_config

torch.set_num_threads(1)

TINY_SYNTH = SynthConfig(n_words=3, trials_per_word=3, duration_s=0.2, channels=2)


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    return generate_corpus(TINY_SYNTH, tmp_path_factory.mktemp("tiny_corpus"))


@pytest.fixture(scope="session")
def tiny_split(tiny_manifest):
    return split_corpus(load_manifest(tiny_manifest), "w02", 0)


@pytest.fixture
def tiny_train_config(tmp_path):
    return tiny_config(epochs=2, lr0=1e-3, out_dir=str(tmp_path / "run"), checkpoint_every=1)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = next((m for name, m in list(sys.modules.items()) if name.endswith("test_acceptance")), None)
    lines = getattr(module, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
