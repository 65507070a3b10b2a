import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bamoe import counters
from bamoe.config import BoundaryConfig, DecoderConfig, EncoderConfig, ModelConfig
from bamoe.data import SynthConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _reset_counters():
    counters.reset()
    yield
    counters.reset()


@pytest.fixture
def tiny_cfg():
    return ModelConfig(
        encoder=EncoderConfig(num_layers=2, d_model=8, d_ff=16, num_heads=2, d_adapter=4),
        decoder=DecoderConfig(num_layers=1, d_model=8, d_ff=16, num_heads=2),
        boundary=BoundaryConfig(d_a=8, d_r=4),
        n_cn=3,
        n_en=3,
    )


@pytest.fixture
def tiny_data_cfg(tiny_cfg):
    return SynthConfig(
        n_cn=tiny_cfg.n_cn,
        n_en=tiny_cfg.n_en,
        frames_per_token=(2, 3),
        tokens_per_utt=(3, 5),
        max_switches=2,
        feature_dim=tiny_cfg.encoder.d_model,
        seed=7,
    )


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance")
        for line in sorted(lines, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
