import pytest

from dhash.reclaim import ReclaimDomain


@pytest.fixture
def domain():
    """Fresh reclamation domain with the test's main thread registered."""
    dom = ReclaimDomain()
    dom.register()
    yield dom
    if dom.in_critical_section():
        raise AssertionError("test left a critical section open")
    dom.unregister()
