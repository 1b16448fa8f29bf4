import numpy as np
import pytest

from imilia.ingest import synth_dataset


@pytest.fixture(scope="session")
def small_cohort(tmp_path_factory):
    """40 separable slides of 20-80 tiles, d=8."""
    out = tmp_path_factory.mktemp("cohort")
    records, truth = synth_dataset(40, (20, 80), 8, 6.0, seed=3, out_dir=out)
    return out, records, truth


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
