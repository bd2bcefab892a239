import os
from pathlib import Path

import pytest

KERNEL_CACHE = Path(os.environ.get("DOKC_KERNEL_CACHE", Path(__file__).resolve().parent.parent / ".kernel_cache"))


@pytest.fixture(scope="session")
def kernel_cache():
    """Persistent cache of compressed kernels shared by the slow tests."""
    KERNEL_CACHE.mkdir(parents=True, exist_ok=True)
    return KERNEL_CACHE
