import numpy as np
import pytest

from surfelcontact.synth import SynthSpec, generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_synth():
    """A small gripper scene: 3 views, 4 frames, 24x24 pixels."""
    spec = SynthSpec(n_frames=4, n_views=3, width=24, height=24, n_seed=400, gt_spacing=0.003)
    return generate(spec)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
