import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from ahl import synthdata


def assert_grad_close(analytic, numeric, rtol=1e-5, atol=1e-8, what=""):
    """Check |analytic - numeric| <= atol + rtol * |numeric| per coordinate."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    assert analytic.shape == numeric.shape
    gap = np.abs(analytic - numeric) - (atol + rtol * np.abs(numeric))
    worst = float(gap.max())
    assert worst <= 0.0, f"gradient mismatch{what and f' ({what})'}: excess {worst:.3e}"


@pytest.fixture(scope="session")
def tiny_dataset():
    """40 samples, 32x32, 3 landmarks: enough to train for a few epochs."""
    return synthdata.gen_dataset(40, 32, 32, 3, seed=7)


@pytest.fixture(scope="session")
def small_dataset():
    """100 samples, 32x32, 3 landmarks."""
    return synthdata.gen_dataset(100, 32, 32, 3, seed=11)
