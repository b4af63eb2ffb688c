import numpy as np
import pytest

from scanqa.scene import InstanceAnnotation, Scene


def random_scene(rng, n=None, with_instances=True, dtype=np.float64, scene_id="rand"):
    n = n or int(rng.integers(1, 200))
    xyz = (rng.normal(size=(n, 3)) * rng.uniform(0.1, 10)).astype(dtype)
    rgb = rng.integers(0, 256, size=(n, 3)).astype(np.uint8)
    instances = None
    if with_instances and n >= 2:
        labels = rng.integers(-1, 3, size=n)
        instances = tuple(
            InstanceAnnotation(int(i), f"class {i}", np.flatnonzero(labels == i))
            for i in np.unique(labels) if i >= 0
        )
    return Scene(scene_id, xyz, rgb, instances)


def box_points(lo, hi, n, rng):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    pts = lo + rng.random((n, 3)) * (hi - lo)
    # pin the extremes so the point AABB equals the box
    pts[0], pts[1] = lo, hi
    return pts


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
