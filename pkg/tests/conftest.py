import numpy as np
import pytest
from hypothesis import settings

from tara.chsh import Dataset

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def dataset_from_rows(rows, label=None):
    """Build a Dataset from (x, z, a, b) tuples with consecutive trial indices."""
    arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
    return Dataset(np.arange(len(arr)), arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], label=label)


@pytest.fixture
def rows_to_dataset():
    return dataset_from_rows
