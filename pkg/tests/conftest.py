import numpy as np
import pytest

from jamflow import numerics as nm


@pytest.fixture
def f64():
    """Run the test in float64 (gradient checks need the precision)."""
    with nm.dtype_scope(np.float64):
        yield


@pytest.fixture
def tiny_cfg():
    """Smallest config the data law allows; fast enough for loops."""
    from jamflow.dit import ModelConfig

    return ModelConfig(
        n_layers=2, n_joint=1, hidden=16, heads=2, head_dim=8,
        audio_channels=4, motion_channels=3, rest_channels=2,
        text_vocab=8, text_embed=4, frame_ratio=4.0, window=2, ff_mult=2,
    )


# One line per acceptance criterion, echoed after the test summary so
# the verdicts survive output capturing.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
