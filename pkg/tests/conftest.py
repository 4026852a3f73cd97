import pytest

from tests.helpers import make_vision_episode


@pytest.fixture
def episode_factory(tmp_path):
    counter = [0]

    def build(**kwargs):
        counter[0] += 1
        return make_vision_episode(tmp_path / f"ep{counter[0]}.rdm", **kwargs)

    return build
