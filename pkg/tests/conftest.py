import pytest

from dsanet import kernels


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    """Run a test once per available kernel backend."""
    prev = kernels.get_backend()
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(prev)
