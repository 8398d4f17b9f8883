import os

from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=500)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

import pytest


@pytest.fixture(scope="session")
def green_ref():
    from siltlab.potential import green_truncated

    return green_truncated(5, 30, 2000)


@pytest.fixture(scope="session")
def green_big():
    from siltlab.potential import green_truncated

    return green_truncated(5, 40, 4000)
