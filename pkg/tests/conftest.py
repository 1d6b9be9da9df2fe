"""Pin BLAS threading before numpy loads so repeated runs reduce in the
same order (the determinism criterion compares byte-level outputs)."""

import os

for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np  # noqa: E402  (import after the env pinning)
import pytest  # noqa: E402


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(12345))
