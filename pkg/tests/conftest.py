import pytest

from cdrecon import autodiff as ad


@pytest.fixture(autouse=True)
def _test_precision():
    """All tests run in 64-bit test mode unless they switch explicitly."""
    ad.set_precision("test")
    yield
    ad.set_precision("test")
