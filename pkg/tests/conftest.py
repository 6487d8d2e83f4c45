import numpy as np
import pytest

from ruladapt.perf import keep_malloc_heap

keep_malloc_heap()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
