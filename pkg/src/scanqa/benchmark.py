"""Synthetic rooms of colored primitives with analytically answered questions."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .appearance import COLOR_NAMES, CSS21_COLORS
from .dataset import AnswerSubmission, QARecord, write_jsonl
from .scene import InstanceAnnotation, Scene, export_ply


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ObjectClass:
    name: str
    primitive: str              # "box" rests on the floor, "slab" is a thin raised plate
    footprint: tuple[float, float]
    height: tuple[float, float]  # box: height range; slab: top-surface range
    weight: float = 1.0


# footprints far enough apart that a handful of examples per class suffice
DEFAULT_CLASSES = (
    ObjectClass("chair", "box", (0.5, 0.5), (0.3, 2.0)),
    ObjectClass("bed", "box", (2.0, 1.5), (0.3, 2.0)),
    ObjectClass("lamp", "box", (0.25, 0.25), (0.3, 2.0)),
    ObjectClass("bookshelf", "box", (1.2, 0.3), (0.3, 2.0)),
    ObjectClass("table", "slab", (1.4, 0.9), (0.6, 0.9)),
)
EXTRA_CLASSES = (
    ObjectClass("cabinet", "box", (1.0, 0.5), (0.3, 2.0)),
    ObjectClass("sofa", "box", (2.0, 0.8), (0.3, 2.0)),
    ObjectClass("desk", "slab", (1.0, 0.6), (0.6, 0.9)),
)
SLAB_THICKNESS = 0.05


@dataclass
class SyntheticSceneSpec:
    room_x: tuple[float, float] = (4.0, 6.0)
    room_y: tuple[float, float] = (4.0, 6.0)
    n_objects: tuple[int, int] = (3, 4)
    classes: tuple[ObjectClass, ...] = DEFAULT_CLASSES
    colors: tuple[str, ...] = COLOR_NAMES
    size_jitter: float = 0.1
    footprint_swap: float = 0.5   # probability of turning an object by 90 degrees
    color_jitter: int = 10
    points_per_object: int = 96
    floor_points: int = 128
    floor_rgb: tuple[int, int, int] = (150, 140, 130)
    margin: float = 0.1
    max_retries: int = 200
    min_height_gap: float = 0.15
    color_questions: int = 3
    taller_pairs: int = 3
    n_annotators: int = 5
    split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    seed: int = 7


@dataclass(frozen=True)
class SyntheticObject:
    instance_id: int
    class_name: str
    primitive: str
    color: str
    center: tuple[float, float]
    size: tuple[float, float, float]
    z_min: float

    @property
    def height(self) -> float:
        return self.size[2]


@dataclass
class Benchmark:
    scenes: list[Scene]
    records: list[QARecord]
    objects: dict[str, list[SyntheticObject]] = field(default_factory=dict)

    def scene_map(self) -> dict[str, Scene]:
        return {s.scene_id: s for s in self.scenes}

    def save(self, directory) -> None:
        directory = Path(directory)
        (directory / "scenes").mkdir(parents=True, exist_ok=True)
        for s in self.scenes:
            export_ply(s, directory / "scenes" / f"{s.scene_id}.ply")
        write_jsonl(self.records, directory / "qa.jsonl")
        with open(directory / "objects.jsonl", "w") as fh:
            for sid in sorted(self.objects):
                fh.write(json.dumps({"scene_id": sid, "objects": [asdict(o) for o in self.objects[sid]]}) + "\n")


def _surface_points(rng, lo, hi, n) -> np.ndarray:
    size = hi - lo
    areas = np.array([size[1] * size[2], size[1] * size[2], size[0] * size[2],
                      size[0] * size[2], size[0] * size[1], size[0] * size[1]])
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    pts = lo + rng.random((n, 3)) * size
    axis = faces // 2
    side = faces % 2
    pts[np.arange(n), axis] = np.where(side == 1, hi[axis], lo[axis])
    return pts


def _place_objects(rng, spec: SyntheticSceneSpec, room) -> list[SyntheticObject]:
    """Draw a layout; whole layouts are redrawn up to ``max_retries`` times before giving up."""
    for _ in range(spec.max_retries):
        objs = _try_layout(rng, spec, room)
        if objs is not None:
            return objs
    raise GenerationError(f"no non-overlapping layout found in a {room[0]:.2f} x {room[1]:.2f} room "
                          f"after {spec.max_retries} attempts")


def _try_layout(rng, spec: SyntheticSceneSpec, room) -> list[SyntheticObject] | None:
    weights = np.array([c.weight for c in spec.classes])
    n = int(rng.integers(spec.n_objects[0], spec.n_objects[1] + 1))
    placed: list[SyntheticObject] = []
    for iid in range(n):
        cls = spec.classes[int(rng.choice(len(spec.classes), p=weights / weights.sum()))]
        jit = 1 + spec.size_jitter * (2 * rng.random(2) - 1)
        fx, fy = cls.footprint[0] * jit[0], cls.footprint[1] * jit[1]
        if rng.random() < spec.footprint_swap:
            fx, fy = fy, fx
        if cls.primitive == "box":
            dz = float(rng.uniform(*cls.height))
            z_min = 0.0
        else:
            top = float(rng.uniform(*cls.height))
            dz = SLAB_THICKNESS
            z_min = top - dz
        color = spec.colors[int(rng.integers(len(spec.colors)))]
        if fx + 2 * spec.margin > room[0] or fy + 2 * spec.margin > room[1]:
            return None
        for _ in range(spec.max_retries):
            cx = rng.uniform(spec.margin + fx / 2, room[0] - spec.margin - fx / 2)
            cy = rng.uniform(spec.margin + fy / 2, room[1] - spec.margin - fy / 2)
            if all(abs(cx - o.center[0]) >= (fx + o.size[0]) / 2 + spec.margin
                   or abs(cy - o.center[1]) >= (fy + o.size[1]) / 2 + spec.margin for o in placed):
                break
        else:
            return None
        placed.append(SyntheticObject(iid, cls.name, cls.primitive, color,
                                      (float(cx), float(cy)), (float(fx), float(fy), dz), z_min))
    return placed


def _render(rng, spec: SyntheticSceneSpec, scene_id: str, room, objects) -> Scene:
    xyz, rgb, instances = [], [], []
    start = 0
    for o in objects:
        lo = np.array([o.center[0] - o.size[0] / 2, o.center[1] - o.size[1] / 2, o.z_min])
        hi = lo + np.array(o.size)
        pts = _surface_points(rng, lo, hi, spec.points_per_object)
        base = np.array(CSS21_COLORS[o.color])
        col = np.clip(base + rng.integers(-spec.color_jitter, spec.color_jitter + 1, (len(pts), 3)), 0, 255)
        xyz.append(pts); rgb.append(col)
        instances.append(InstanceAnnotation(o.instance_id, o.class_name, np.arange(start, start + len(pts))))
        start += len(pts)
    floor = np.column_stack([rng.uniform(0, room[0], spec.floor_points),
                             rng.uniform(0, room[1], spec.floor_points),
                             np.zeros(spec.floor_points)])
    fcol = np.clip(np.array(spec.floor_rgb) + rng.integers(-spec.color_jitter, spec.color_jitter + 1,
                                                           (spec.floor_points, 3)), 0, 255)
    xyz.append(floor); rgb.append(fcol)
    instances.append(InstanceAnnotation(len(objects), "floor", np.arange(start, start + spec.floor_points)))
    return Scene(scene_id, np.concatenate(xyz), np.concatenate(rgb).astype(np.uint8), tuple(instances))


def _qa(qid, scene_id, question, answer, n_annotators, split) -> QARecord:
    return QARecord(qid, scene_id, question,
                    [AnswerSubmission(answer, "yes", f"sim-{a}") for a in range(n_annotators)], split)


def _questions(rng, spec: SyntheticSceneSpec, scene_id: str, objects, split) -> list[QARecord]:
    counts = Counter(o.class_name for o in objects)
    unique = [o for o in objects if counts[o.class_name] == 1]
    out: list[tuple[str, str]] = []

    for k in rng.permutation(len(unique))[: spec.color_questions]:
        o = unique[int(k)]
        out.append((f"what color is the {o.class_name}", o.color))

    # well-separated pairs, each asked in both orders
    boxes = [o for o in unique if o.primitive == "box"]
    pairs = [(a, b) for i, a in enumerate(boxes) for b in boxes[i + 1:]
             if abs(a.height - b.height) >= spec.min_height_gap]
    for k in rng.permutation(len(pairs))[: spec.taller_pairs]:
        a, b = pairs[int(k)]
        for x, y in ((a, b), (b, a)):
            out.append((f"is the {x.class_name} taller than the {y.class_name}",
                        "yes" if x.height > y.height else "no"))

    present = sorted(counts)
    cname = present[int(rng.integers(len(present)))]
    out.append((f"how many {cname}", str(counts[cname])))

    absent = [c.name for c in spec.classes if c.name not in counts]
    if absent and rng.random() < 0.5:
        out.append((f"is there a {absent[int(rng.integers(len(absent)))]}", "no"))
    else:
        out.append((f"is there a {present[int(rng.integers(len(present)))]}", "yes"))

    return [_qa(f"{scene_id}-q{k}", scene_id, q, a, spec.n_annotators, split) for k, (q, a) in enumerate(out)]


def assign_splits(n_scenes: int, fractions, rng) -> list[str]:
    order = rng.permutation(n_scenes)
    n_train = int(round(fractions[0] * n_scenes))
    n_val = int(round(fractions[1] * n_scenes))
    splits = ["test"] * n_scenes
    for rank, i in enumerate(order):
        splits[int(i)] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return splits


def generate_synthetic_benchmark(spec: SyntheticSceneSpec, n_scenes: int) -> Benchmark:
    """Scenes plus color, taller-than, counting and existence questions with known answers."""
    rng = np.random.default_rng(spec.seed)
    splits = assign_splits(n_scenes, spec.split_fractions, rng)
    scenes, records, objects = [], [], {}
    for i in range(n_scenes):
        scene_id = f"synth{spec.seed:04d}_{i:04d}"
        room = (float(rng.uniform(*spec.room_x)), float(rng.uniform(*spec.room_y)))
        objs = _place_objects(rng, spec, room)
        scenes.append(_render(rng, spec, scene_id, room, objs))
        records.extend(_questions(rng, spec, scene_id, objs, splits[i]))
        objects[scene_id] = objs
    return Benchmark(scenes, records, objects)
