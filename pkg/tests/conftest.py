import numpy as np
import pytest

from trnet import model as M
from trnet.sampling import VolumeSequence


def tiny_config(**kw):
    base = dict(cube_side=16, max_seq_len=3, num_encoders=2, num_heads=1, dtype="float64",
                input_scale=1.0)
    base.update(kw)
    return M.ModelConfig(**base)


def random_sequence(rng, length, side, source_id="s", positive_rate=0.5):
    cubes = rng.normal(size=(length, side, side, side)).astype(np.float32)
    centers = list(range(0, 5 * length, 5))
    labels = [int(v) for v in rng.random(length) < positive_rate]
    return VolumeSequence(cubes, centers, labels, source_id)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
