import numpy as np
import pytest

from shapepose.shapes import capped_cylinder


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def creature():
    from shapepose.evalbench.oracle import CapsuleCreature
    return CapsuleCreature()


@pytest.fixture(scope="session")
def creature_hierarchy(creature):
    from shapepose.multires import build_hierarchy
    return build_hierarchy(creature.template)


def toy_template():
    """20-vertex closed tube used for end-to-end gradient checks."""
    return capped_cylinder(rings=3, segments=6, length=2.0, radius=0.6)
