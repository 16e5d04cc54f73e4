import numpy as np
import pytest

from voiplace.phantom import PhantomSpec, cube_phantom_spec, generate_phantom
from voiplace.volume import Label, LabelVolume, skull_distance_map


@pytest.fixture(scope="session")
def cube():
    v = generate_phantom(cube_phantom_spec())
    return v, skull_distance_map(v)


@pytest.fixture(scope="session")
def small_tumor():
    """64^3 phantom with core and periphery: quick to search."""
    spec = PhantomSpec(brain_radius=56.0, tumor_center=(4.0, -2.0, 6.0), tumor_radii=(14.0, 10.0, 9.0),
                       tumor_angles=(0.4, 0.1, -0.2), core_radii=(6.0, 4.0, 4.0), shell_mm=4.0,
                       dims=(64, 64, 64))
    v = generate_phantom(spec)
    return v, skull_distance_map(v)


def make_volume(shape=(12, 10, 8), spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), fill=Label.NORMAL_BRAIN):
    labels = np.full(shape, int(fill), dtype=np.uint8)
    return LabelVolume(labels, spacing, origin)


@pytest.fixture(scope="session")
def suite_volumes():
    """The 20-case seeded random phantom suite with distance maps (built once)."""
    from voiplace.phantom import random_suite

    out = []
    for spec in random_suite():
        v = generate_phantom(spec)
        out.append((spec, v, skull_distance_map(v)))
    return out
