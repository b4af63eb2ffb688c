import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scanqa.scene import (EXTENT_EPS, InstanceAnnotation, PlyParseError, Scene, SceneValidationError,
                          compute_extents, export_ply, load_ply, strip_color)

from conftest import random_scene

TRIANGLE = """ply
format ascii 1.0
comment unit triangle
element vertex 3
property float x
property float y
property float z
property uchar red
property uchar green
property uchar blue
element face 1
property list uchar int vertex_indices
end_header
0 0 0 255 0 0
1 0 0.25 0 255 0
0 1 0 0 0 255
3 0 1 2
"""


def write(tmp_path, text, name="s.ply"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_ascii_triangle(tmp_path):
    s = load_ply(write(tmp_path, TRIANGLE))
    assert s.n_points == 3
    assert (s.extents.X, s.extents.Y, s.extents.Z) == (1.0, 1.0, 0.25)
    assert s.extents.origin == (0.0, 0.0, 0.0)
    assert s.rgb.tolist() == [[255, 0, 0], [0, 255, 0], [0, 0, 255]]
    assert s.scene_id == "s"


def test_empty_vertex_element_rejected(tmp_path):
    text = TRIANGLE.replace("element vertex 3", "element vertex 0").split("end_header")[0] + "end_header\n"
    with pytest.raises(SceneValidationError):
        load_ply(write(tmp_path, text))


@pytest.mark.parametrize("bad, lineno", [
    ("property float x\n", "property floaty x\n"),
    ("element vertex 3\n", "element vertex three\n"),
    ("format ascii 1.0\n", "format binary_big_endian 1.0\n"),
])
def test_malformed_header_names_line(tmp_path, bad, lineno):
    text = TRIANGLE.replace(bad, lineno)
    with pytest.raises(PlyParseError, match=r"line \d+"):
        load_ply(write(tmp_path, text))


def test_nan_coordinate_reports_index(tmp_path):
    text = TRIANGLE.replace("0 1 0 0 0 255", "0 nan 0 0 0 255")
    with pytest.raises(SceneValidationError, match="index 2"):
        load_ply(write(tmp_path, text))


def test_missing_colors_default_to_zero(tmp_path):
    text = "ply\nformat ascii 1.0\nelement vertex 2\nproperty double x\nproperty double y\nproperty double z\nend_header\n0 0 0\n1 2 3\n"
    s = load_ply(write(tmp_path, text))
    assert s.colors_missing
    assert not s.rgb.any()
    assert s.xyz.dtype == np.float64


def test_binary_faces_after_vertices_are_ignored(tmp_path, rng):
    scene = random_scene(rng, 20, with_instances=False, scene_id="faces")
    p = tmp_path / "f.ply"
    export_ply(scene, p)
    raw = p.read_bytes()
    head, body = raw.split(b"end_header\n", 1)
    head += b"element face 2\nproperty list uchar int vertex_indices\nend_header\n"
    faces = bytes([3]) + np.array([0, 1, 2], "<i4").tobytes() + bytes([3]) + np.array([2, 3, 4], "<i4").tobytes()
    p.write_bytes(head + body + faces)
    assert load_ply(p) == scene


def test_single_point_round_trip(tmp_path):
    s = Scene("one", [[1.5, -2.0, 3.25]], [[1, 2, 3]])
    export_ply(s, tmp_path / "one.ply")
    back = load_ply(tmp_path / "one.ply")
    assert back == s
    assert back.extents.degenerate == (True, True, True)


def test_round_trip_100_random_scenes(tmp_path, rng):
    for k in range(100):
        dtype = np.float64 if k % 2 else np.float32
        s = random_scene(rng, dtype=dtype, scene_id=f"scene{k}")
        p = tmp_path / f"{k}.ply"
        export_ply(s, p)
        back = load_ply(p)
        assert back == s
        assert back.xyz.tobytes() == s.xyz.tobytes()


def test_round_trip_10k_points(tmp_path, rng):
    s = random_scene(rng, 10_000, scene_id="big")
    export_ply(s, tmp_path / "big.ply")
    assert load_ply(tmp_path / "big.ply") == s


def test_normalized_colors_are_quantized(tmp_path, rng):
    c = rng.random((50, 3))
    s = Scene("norm", rng.normal(size=(50, 3)), c, colors_normalized=True)
    p = tmp_path / "n.ply"
    export_ply(s, p)
    assert b"comment colors_normalized" in p.read_bytes().split(b"end_header")[0]
    back = load_ply(p)
    expected = np.array([[round(255 * v) for v in row] for row in c])
    assert np.array_equal(back.rgb, expected)


def test_unwritable_path(tmp_path, rng):
    with pytest.raises(OSError):
        export_ply(random_scene(rng, 3), tmp_path / "missing" / "dir" / "x.ply")


def test_strip_color(rng):
    s = Scene("t", [[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[9, 9, 9]] * 3)
    assert strip_color(s).tolist() == [[0, 0, 0], [1, 0, 0], [0, 1, 0]]
    s = random_scene(rng, 300)
    out = strip_color(s)
    assert len(out) == s.n_points
    for coords, point in zip(out, s.xyz):
        assert tuple(coords) == tuple(point)


def test_extents_examples():
    e = compute_extents([(0, 0, 0), (2, 4, 6)])
    assert (e.X, e.Y, e.Z, e.origin) == (2, 4, 6, (0, 0, 0))
    e = compute_extents([(1, 2, 3)])
    assert (e.X, e.Y, e.Z) == (EXTENT_EPS,) * 3
    assert e.degenerate == (True, True, True)


def test_extents_match_linear_scan(rng):
    pts = rng.normal(size=(1000, 3)) * 5
    lo = [float("inf")] * 3
    hi = [float("-inf")] * 3
    for p in pts.tolist():
        for a in range(3):
            lo[a] = min(lo[a], p[a])
            hi[a] = max(hi[a], p[a])
    e = compute_extents(pts)
    assert e.origin == tuple(lo)
    assert (e.X, e.Y, e.Z) == tuple(h - l for h, l in zip(hi, lo))


def test_instance_validation():
    with pytest.raises(SceneValidationError):
        InstanceAnnotation(0, "x", [])
    with pytest.raises(SceneValidationError):
        Scene("bad", [[0, 0, 0]], [[0, 0, 0]], (InstanceAnnotation(0, "x", [3]),))


def test_color_range_validated():
    with pytest.raises(SceneValidationError):
        Scene("bad", [[0, 0, 0]], [[256, 0, 0]])
    with pytest.raises(SceneValidationError):
        Scene("bad", [[0, 0, 0]], [[1.5, 0, 0]], colors_normalized=True)


finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(finite, finite, finite, st.integers(0, 255), st.integers(0, 255), st.integers(0, 255)),
                min_size=1, max_size=30))
def test_round_trip_property(tmp_path_factory, rows):
    arr = np.array(rows, dtype=np.float64)
    s = Scene("prop", arr[:, :3], arr[:, 3:].astype(np.uint8))
    p = tmp_path_factory.mktemp("ply") / "p.ply"
    export_ply(s, p)
    assert load_ply(p) == s
    e = s.extents
    assert e.origin == tuple(arr[:, :3].min(axis=0))
