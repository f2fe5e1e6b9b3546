import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

import helpers  # noqa: E402


@pytest.fixture(scope="session")
def digit_data_dir(tmp_path_factory):
    """Session-wide IDX digit corpus (rendered stand-in, standard file names)."""
    root = tmp_path_factory.mktemp("digits")
    return helpers.write_digit_idx(root, n_train=12000, n_test=2000, seed=20240601)
