import os

import pytest
from hypothesis import HealthCheck, settings

from helpers import TOKENS
from sdv_ota.store import ArtifactStore

settings.register_profile("ci", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))


@pytest.fixture
def store():
    return ArtifactStore(None, TOKENS)


@pytest.fixture
def disk_store(tmp_path):
    return ArtifactStore(tmp_path / "store", TOKENS)
