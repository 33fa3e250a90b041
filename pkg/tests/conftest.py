import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from anchors import build_anchor_grid
from harness import TrainConfig


@pytest.fixture
def grid():
    return build_anchor_grid(30.0, 30.0, 16, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return TrainConfig(batch_size=8, epochs=3, warmup_epochs=1, num_negatives=8, context_length=3,
                       token_dim=4, feature_dim=8, input_dim=32, hidden_dim=8, n_source=32, n_target=16,
                       yaw_step=30.0, pitch_step=30.0)
