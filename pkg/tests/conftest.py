import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from federation import ParamSnapshot  # noqa: E402
from neural import Architecture, QNetParams  # noqa: E402

TINY_ARCH = Architecture(obs_dim=3, fc_dim=4, gru_dim=5, n_actions=3)


def constant_action_snapshot(action: int, agent_id: str = "const") -> ParamSnapshot:
    """Zero weights, fc2 bias favouring one power index: the network always picks `action`."""
    params = QNetParams.zeros()
    params.fc2_b[action] = 1.0
    return ParamSnapshot.from_params(params, agent_id=agent_id)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
