import numpy as np
import pytest

from soclm.encoder import EncoderConfig, init_params
from soclm.graph import WorldConfig, generate_synthetic_world


@pytest.fixture(scope="session")
def world():
    return generate_synthetic_world(WorldConfig(), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_cfg():
    return EncoderConfig(vocab_size=20, d_model=8, n_layers=2, n_heads=2, d_ff=16, max_len=12,
                         proj_dims=(8, 8))


@pytest.fixture
def tiny_params(tiny_cfg):
    # perturb so that no parameter sits at an exactly symmetric point
    p = init_params(tiny_cfg, seed=5)
    r = np.random.default_rng(9)
    return {k: v + r.normal(0, 0.1, v.shape) for k, v in p.items()}


# one line per acceptance criterion, repeated at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
