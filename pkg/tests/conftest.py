import pytest

from scenedistill.anchor import AnchorOccupancy, synth_anchor


@pytest.fixture
def capsule_anchor() -> AnchorOccupancy:
    return synth_anchor("capsule-person", 24)


@pytest.fixture
def sphere_anchor() -> AnchorOccupancy:
    return synth_anchor("sphere", 16)
