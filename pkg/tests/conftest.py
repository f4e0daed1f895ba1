import os

import pytest
import torch

from flocode import synthdata as sd
from flocode import trainer as tr

os.environ.setdefault("FLOCODE_THREADS", "1")
torch.set_num_threads(int(os.environ["FLOCODE_THREADS"]))


def small_train_config(**overrides) -> tr.TrainConfig:
    """A few-second model: small label space, narrow transformers."""
    base = dict(
        task="SGCLS",
        epochs=2,
        num_object_classes=6,
        num_predicates=6,
        tenc=dict(layers=1, heads=2, model_dim=8, ffn_dim=16),
        relrep=dict(model_dim=12, heads=2, ffn_dim=16),
    )
    base.update(overrides)
    return tr.config_from_dict(base)


def small_data_config(**overrides) -> sd.GeneratorConfig:
    base = dict(labels=sd.LabelSpace(6, 6, 1.5), videos=12, frames=4, objects=2, channels=4)
    base.update(overrides)
    return sd.GeneratorConfig(**base)


@pytest.fixture(scope="session")
def small_videos():
    return sd.generate(small_data_config())


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
