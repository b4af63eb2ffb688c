"""Colored point-cloud scenes, instance annotations and PLY I/O."""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

EXTENT_EPS = 1e-6

_PLY_DTYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}
_DTYPE_NAMES = {"f4": "float", "f8": "double", "u1": "uchar", "i4": "int"}


class PlyParseError(ValueError):
    """Malformed PLY header or body."""


class SceneValidationError(ValueError):
    """Scene content violates an invariant (empty, non-finite, bad indices)."""


@dataclass(frozen=True)
class SceneExtents:
    X: float
    Y: float
    Z: float
    origin: tuple[float, float, float]
    degenerate: tuple[bool, bool, bool] = (False, False, False)

    @property
    def spans(self) -> np.ndarray:
        return np.array([self.X, self.Y, self.Z], dtype=np.float64)


@dataclass(frozen=True)
class InstanceAnnotation:
    instance_id: int
    class_name: str
    point_indices: np.ndarray

    def __post_init__(self):
        idx = np.unique(np.asarray(self.point_indices, dtype=np.int64))
        if idx.size == 0:
            raise SceneValidationError(f"instance {self.instance_id} has no points")
        object.__setattr__(self, "point_indices", idx)

    def __eq__(self, other):
        if not isinstance(other, InstanceAnnotation):
            return NotImplemented
        return (self.instance_id == other.instance_id
                and self.class_name == other.class_name
                and np.array_equal(self.point_indices, other.point_indices))


@dataclass(frozen=True, eq=False)
class Scene:
    """An immutable colored point cloud.

    ``xyz`` is (N, 3) float; ``rgb`` is (N, 3) uint8, or float in [0, 1] when
    ``colors_normalized`` is set. ``colors_missing`` records that the source
    file had no color properties and colors were filled with zeros.
    """

    scene_id: str
    xyz: np.ndarray
    rgb: np.ndarray
    instances: tuple[InstanceAnnotation, ...] | None = None
    colors_normalized: bool = False
    colors_missing: bool = False
    extents: SceneExtents = field(init=False)

    def __post_init__(self):
        xyz = np.asarray(self.xyz)
        if xyz.dtype not in (np.float32, np.float64):
            xyz = xyz.astype(np.float64)
        if xyz.ndim != 2 or xyz.shape[1] != 3:
            raise SceneValidationError(f"xyz must be (N, 3), got {xyz.shape}")
        n = xyz.shape[0]
        if n < 1:
            raise SceneValidationError("scene must contain at least one point")
        bad = np.flatnonzero(~np.isfinite(xyz).all(axis=1))
        if bad.size:
            raise SceneValidationError(f"non-finite coordinate at point index {bad[0]}")

        rgb = np.asarray(self.rgb)
        if rgb.shape != (n, 3):
            raise SceneValidationError(f"rgb must be ({n}, 3), got {rgb.shape}")
        if self.colors_normalized:
            rgb = rgb.astype(np.float64)
            if not ((rgb >= 0) & (rgb <= 1)).all():
                raise SceneValidationError("normalized colors must lie in [0, 1]")
        else:
            if rgb.dtype != np.uint8:
                if not np.array_equal(rgb, np.round(rgb)) or rgb.min() < 0 or rgb.max() > 255:
                    raise SceneValidationError("integer colors must lie in [0, 255]")
                rgb = rgb.astype(np.uint8)

        instances = self.instances
        if instances is not None:
            instances = tuple(instances)
            for inst in instances:
                if inst.point_indices[0] < 0 or inst.point_indices[-1] >= n:
                    raise SceneValidationError(
                        f"instance {inst.instance_id} indexes outside [0, {n})")

        xyz.setflags(write=False)
        rgb.setflags(write=False)
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "instances", instances)
        object.__setattr__(self, "extents", compute_extents(xyz))

    @property
    def n_points(self) -> int:
        return self.xyz.shape[0]

    def normalized_rgb(self) -> np.ndarray:
        """Colors as float64 in [0, 1]."""
        if self.colors_normalized:
            return np.asarray(self.rgb, dtype=np.float64)
        return self.rgb.astype(np.float64) / 255.0

    def instance(self, instance_id: int) -> InstanceAnnotation:
        for inst in self.instances or ():
            if inst.instance_id == instance_id:
                return inst
        raise KeyError(instance_id)

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (self.scene_id == other.scene_id
                and self.colors_normalized == other.colors_normalized
                and self.xyz.dtype == other.xyz.dtype
                and np.array_equal(self.xyz, other.xyz)
                and np.array_equal(self.rgb, other.rgb)
                and self.instances == other.instances)

    __hash__ = None


def compute_extents(points) -> SceneExtents:
    """Per-axis minimum as origin and per-axis span; zero spans become EXTENT_EPS."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise SceneValidationError("cannot compute extents of an empty point set")
    lo = pts.min(axis=0)
    span = pts.max(axis=0) - lo
    degenerate = span <= 0
    span = np.where(degenerate, EXTENT_EPS, span)
    return SceneExtents(
        X=float(span[0]), Y=float(span[1]), Z=float(span[2]),
        origin=(float(lo[0]), float(lo[1]), float(lo[2])),
        degenerate=tuple(bool(d) for d in degenerate),
    )


def strip_color(scene: Scene) -> np.ndarray:
    """Coordinate-only (N, 3) view of the scene, in point order."""
    return scene.xyz


# ---------------------------------------------------------------------------
# PLY

def _parse_header(fh) -> tuple[str, list[tuple[str, int, list]], dict]:
    first = fh.readline()
    if first.strip() != b"ply":
        raise PlyParseError("line 1: expected 'ply' magic")
    fmt = None
    elements: list[tuple[str, int, list]] = []
    comments: dict = {"instances": [], "scene_id": None, "colors_normalized": False}
    lineno = 1
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise PlyParseError(f"line {lineno}: unexpected end of file before end_header")
        line = raw.decode("ascii", errors="replace").strip()
        if not line:
            continue
        words = line.split()
        key = words[0]
        if key == "end_header":
            break
        if key == "format":
            if len(words) != 3 or words[1] not in ("ascii", "binary_little_endian"):
                raise PlyParseError(f"line {lineno}: unsupported format {line!r}")
            fmt = words[1]
        elif key == "comment" or key == "obj_info":
            _parse_comment(words[1:], line, comments, lineno)
        elif key == "element":
            if len(words) != 3:
                raise PlyParseError(f"line {lineno}: bad element line {line!r}")
            try:
                count = int(words[2])
            except ValueError:
                raise PlyParseError(f"line {lineno}: bad element count {line!r}") from None
            elements.append((words[1], count, []))
        elif key == "property":
            if not elements:
                raise PlyParseError(f"line {lineno}: property before any element")
            if len(words) == 5 and words[1] == "list":
                if words[2] not in _PLY_DTYPES or words[3] not in _PLY_DTYPES:
                    raise PlyParseError(f"line {lineno}: unknown list type {line!r}")
                elements[-1][2].append((words[4], ("list", _PLY_DTYPES[words[2]], _PLY_DTYPES[words[3]])))
            elif len(words) == 3:
                if words[1] not in _PLY_DTYPES:
                    raise PlyParseError(f"line {lineno}: unknown property type {line!r}")
                elements[-1][2].append((words[2], _PLY_DTYPES[words[1]]))
            else:
                raise PlyParseError(f"line {lineno}: bad property line {line!r}")
        else:
            raise PlyParseError(f"line {lineno}: unexpected header keyword {key!r}")
    if fmt is None:
        raise PlyParseError(f"line {lineno}: missing format line")
    return fmt, elements, comments


def _parse_comment(words, line, comments, lineno):
    if not words:
        return
    if words[0] == "scene_id" and len(words) >= 2:
        comments["scene_id"] = " ".join(words[1:])
    elif words[0] == "colors_normalized":
        comments["colors_normalized"] = True
    elif words[0] == "instance":
        try:
            rest = line.split(None, 2)[2]
            iid_str, name_json = rest.split(None, 1)
            comments["instances"].append((int(iid_str), json.loads(name_json)))
        except (IndexError, ValueError):
            raise PlyParseError(f"line {lineno}: bad instance comment {line!r}") from None


def _skip_element_binary(fh, count, props):
    if all(not isinstance(p[1], tuple) for p in props):
        size = sum(np.dtype(p[1]).itemsize for p in props)
        fh.seek(size * count, 1)
        return
    for _ in range(count):
        for _, t in props:
            if isinstance(t, tuple):
                n = int(np.frombuffer(fh.read(np.dtype(t[1]).itemsize), "<" + t[1])[0])
                fh.seek(n * np.dtype(t[2]).itemsize, 1)
            else:
                fh.seek(np.dtype(t).itemsize, 1)


def load_ply(path) -> Scene:
    """Read the vertex element of an ASCII or binary little-endian PLY file.

    Other elements (faces, edges) are skipped. A per-vertex ``instance``
    property together with ``comment instance <id> <json name>`` header
    lines is decoded into instance annotations.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        fmt, elements, comments = _parse_header(fh)
        vertex = None
        for name, count, props in elements:
            if name == "vertex":
                if any(isinstance(t, tuple) for _, t in props):
                    raise PlyParseError("list properties on the vertex element are not supported")
                dtype = np.dtype([(p, "<" + t) for p, t in props])
                if fmt == "ascii":
                    rows = []
                    for i in range(count):
                        vals = fh.readline().split()
                        if len(vals) < len(props):
                            raise PlyParseError(
                                f"vertex {i}: expected {len(props)} values, got {len(vals)}")
                        rows.append([v.decode() for v in vals[: len(props)]])
                    vertex = np.empty(count, dtype=dtype)
                    for j, (p, t) in enumerate(props):
                        try:
                            vertex[p] = np.array([row[j] for row in rows], dtype=np.float64 if t[0] == "f" else np.int64)
                        except ValueError as exc:
                            raise PlyParseError(f"vertex property {p}: {exc}") from None
                else:
                    buf = fh.read(dtype.itemsize * count)
                    if len(buf) != dtype.itemsize * count:
                        raise PlyParseError("file truncated inside vertex data")
                    vertex = np.frombuffer(buf, dtype=dtype, count=count)
                break
            if fmt == "ascii":
                for _ in range(count):
                    fh.readline()
            else:
                _skip_element_binary(fh, count, props)
    if vertex is None:
        raise PlyParseError("no vertex element in header")
    names = vertex.dtype.names
    for axis in "xyz":
        if axis not in names:
            raise PlyParseError(f"vertex element lacks property {axis!r}")
    if len(vertex) == 0:
        raise SceneValidationError("scene must contain at least one point")

    xdt = np.result_type(*(vertex[a].dtype for a in "xyz"))
    xyz = np.stack([vertex[a] for a in "xyz"], axis=1).astype(xdt)
    colors_missing = not all(c in names for c in ("red", "green", "blue"))
    if colors_missing:
        log.warning("%s: no color properties, filling with 0", path)
        rgb = np.zeros((len(vertex), 3), dtype=np.uint8)
    else:
        rgb = np.stack([vertex[c] for c in ("red", "green", "blue")], axis=1)
        if rgb.dtype.kind == "f":
            rgb = np.clip(np.round(rgb * 255.0 if rgb.max() <= 1.0 else rgb), 0, 255)
        rgb = rgb.astype(np.uint8)

    instances = None
    if "instance" in names:
        labels = np.asarray(vertex["instance"], dtype=np.int64)
        class_of = dict(comments["instances"])
        instances = []
        for iid in sorted(class_of):
            idx = np.flatnonzero(labels == iid)
            instances.append(InstanceAnnotation(iid, class_of[iid], idx))
        instances = tuple(instances)

    return Scene(
        scene_id=comments["scene_id"] or path.stem,
        xyz=xyz, rgb=rgb, instances=instances,
        colors_missing=colors_missing,
    )


def export_ply(scene: Scene, path) -> None:
    """Write ``scene`` as binary little-endian PLY.

    Normalized colors are quantized as round(255 c) and flagged with a
    ``comment colors_normalized`` header line.
    """
    n = scene.n_points
    xt = "f8" if scene.xyz.dtype == np.float64 else "f4"
    fields = [("x", "<" + xt), ("y", "<" + xt), ("z", "<" + xt),
              ("red", "u1"), ("green", "u1"), ("blue", "u1")]
    labels = None
    if scene.instances is not None:
        labels = np.full(n, -1, dtype=np.int32)
        for inst in scene.instances:
            labels[inst.point_indices] = inst.instance_id
        fields.append(("instance", "<i4"))
    arr = np.empty(n, dtype=np.dtype(fields))
    for j, a in enumerate("xyz"):
        arr[a] = scene.xyz[:, j]
    if scene.colors_normalized:
        rgb = np.round(np.asarray(scene.rgb) * 255.0).astype(np.uint8)
    else:
        rgb = scene.rgb
    for j, c in enumerate(("red", "green", "blue")):
        arr[c] = rgb[:, j]
    if labels is not None:
        arr["instance"] = labels

    header = ["ply", "format binary_little_endian 1.0", f"comment scene_id {scene.scene_id}"]
    if scene.colors_normalized:
        header.append("comment colors_normalized quantized as round(255*c)")
    for inst in scene.instances or ():
        header.append(f"comment instance {inst.instance_id} {json.dumps(inst.class_name)}")
    header.append(f"element vertex {n}")
    for name, dt in fields:
        header.append(f"property {_DTYPE_NAMES[dt.lstrip('<')]} {name}")
    header.append("end_header")
    data = arr.tobytes() if sys.byteorder == "little" else arr.astype(arr.dtype.newbyteorder("<")).tobytes()
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data)
