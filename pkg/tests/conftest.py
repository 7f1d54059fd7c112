import pytest

from boxquery.synth import SceneSpec, generate_dataset

TINY = SceneSpec(height=48, width=48, classes=4, shapes_per_image=(2, 4), radius_range=(6.0, 16.0), seed=3)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """A 12-image pool and 4-image validation split of 48x48 scenes."""
    root = tmp_path_factory.mktemp("tiny")
    generate_dataset(TINY, 12, 4, root)
    return root
