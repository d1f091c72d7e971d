import numpy as np
import pytest

from tsgraph.data import SynthSpec
from tsgraph.model import ModelConfig
from tsgraph.train import TrainConfig


def tiny_config(epochs=2, seed=3, **model_kw) -> TrainConfig:
    """A model and cohort small enough to train in about a second."""
    model = ModelConfig(gin_hidden=8, latent=4, head_widths=[16], **model_kw)
    return TrainConfig(model=model, batch_size=32, epochs=epochs, importance_samples=32, seed=seed,
                       synth=SynthSpec(n=120, seed=seed))


@pytest.fixture
def tiny():
    return tiny_config()


# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record(criterion: str, passed: bool, detail: str) -> bool:
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"{criterion} {'PASS' if passed else 'FAIL'}: {detail}")
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {'PASS' if passed else 'FAIL'}: {detail}")
