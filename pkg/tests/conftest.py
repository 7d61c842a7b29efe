import pytest

from hcl.task_stream import build_split_stream


@pytest.fixture(scope="session")
def digits_stream():
    return build_split_stream("digits", 2, 5, seed=0)


@pytest.fixture(scope="session")
def blob_stream():
    return build_split_stream(
        "blobs", 2, 2, seed=1, max_train_per_class=80, max_test_per_class=25
    )
