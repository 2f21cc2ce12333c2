import os
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))
os.environ.setdefault("KEDRL_THREADS", "1")

settings.register_profile("kedrl", max_examples=50, deadline=None)
settings.load_profile("kedrl")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
