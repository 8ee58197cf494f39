import numpy as np
import pytest

from stylevar.data import generate_dataset
from stylevar.model import ModelConfig, StyleVAR
from stylevar.tokenizer import TOY_SCHEDULE, MultiScaleTokenizer, ScaleSchedule


@pytest.fixture(scope="session")
def triplets():
    return generate_dataset(40, seed=3)


@pytest.fixture(scope="session")
def tokenizer(triplets):
    imgs = np.stack([t.target for t in triplets] + [t.style for t in triplets] + [t.content for t in triplets])
    return MultiScaleTokenizer.fit(imgs, ScaleSchedule(TOY_SCHEDULE), dim=16, vocab=64, seed=0)


def small_config(**kw) -> ModelConfig:
    base = dict(embed_dim=32, num_heads=2, num_layers=2, encoder_channels=(8, 8), seed=0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def small_model():
    return StyleVAR(small_config())


# acceptance criteria report one line each; printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
