"""Appearance features and the synthetic color question corpus."""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .scene import InstanceAnnotation, Scene

# CSS 2.1 named colors.
CSS21_COLORS: dict[str, tuple[int, int, int]] = {
    "aqua": (0, 255, 255),
    "black": (0, 0, 0),
    "blue": (0, 0, 255),
    "fuchsia": (255, 0, 255),
    "gray": (128, 128, 128),
    "green": (0, 128, 0),
    "lime": (0, 255, 0),
    "maroon": (128, 0, 0),
    "navy": (0, 0, 128),
    "olive": (128, 128, 0),
    "orange": (255, 165, 0),
    "purple": (128, 0, 128),
    "red": (255, 0, 0),
    "silver": (192, 192, 192),
    "teal": (0, 128, 128),
    "white": (255, 255, 255),
    "yellow": (255, 255, 0),
}
COLOR_NAMES: tuple[str, ...] = tuple(sorted(CSS21_COLORS))
_COLOR_TABLE = np.array([CSS21_COLORS[n] for n in COLOR_NAMES], dtype=np.float64)

EXCLUDED_CLASSES = frozenset({"wall", "floor", "ceiling"})
RUNNER_UP_FRACTION = 0.3
SYNTHETIC_ANNOTATOR = "synthetic-color"


@dataclass(frozen=True)
class NamedColor:
    name: str
    rgb: tuple[int, int, int]


@dataclass
class AppearanceFeature:
    per_object: np.ndarray
    global_feature: np.ndarray


@dataclass(frozen=True)
class ColorQARecord:
    scene_id: str
    question: str
    answer: str
    instance_ids: tuple[int, ...]


def nearest_color_indices(rgb) -> np.ndarray:
    """Index into COLOR_NAMES of the closest reference color for each row of ``rgb``.

    COLOR_NAMES is alphabetical and argmin returns the first minimum, so
    distance ties resolve alphabetically.
    """
    rgb = np.asarray(rgb, dtype=np.float64).reshape(-1, 3)
    d2 = ((rgb[:, None, :] - _COLOR_TABLE[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def nearest_named_color(rgb) -> NamedColor:
    name = COLOR_NAMES[int(nearest_color_indices(rgb)[0])]
    return NamedColor(name, CSS21_COLORS[name])


def color_histogram(rgb) -> Counter:
    idx = nearest_color_indices(rgb)
    return Counter({COLOR_NAMES[i]: int(c) for i, c in zip(*np.unique(idx, return_counts=True))})


def _top_colors(hist: Counter, limit: int = 2) -> list[str]:
    ranked = sorted(hist.items(), key=lambda kv: (-kv[1], kv[0]))
    names = [ranked[0][0]]
    if limit > 1 and len(ranked) > 1 and ranked[1][1] >= RUNNER_UP_FRACTION * ranked[0][1]:
        names.append(ranked[1][0])
    return names


def vote_object_colors(scene: Scene, instance: InstanceAnnotation) -> list[str]:
    """One or two color names for an instance, most voted first, ties alphabetical.

    The runner-up is kept when it collects at least 30% of the winner's votes.
    """
    rgb = scene.rgb[instance.point_indices]
    if scene.colors_normalized:
        rgb = np.round(np.asarray(rgb) * 255.0)
    return _top_colors(color_histogram(rgb))


def join_colors(names: Sequence[str]) -> str:
    return " and ".join(names)


def generate_color_qa(scene: Scene) -> list[ColorQARecord]:
    if not scene.instances:
        return []
    by_class: dict[str, list[InstanceAnnotation]] = defaultdict(list)
    for inst in scene.instances:
        if inst.class_name.strip().lower() in EXCLUDED_CLASSES:
            continue
        by_class[inst.class_name].append(inst)

    records = []
    for cls in sorted(by_class):
        insts = by_class[cls]
        if len(insts) == 1:
            answer = vote_object_colors(scene, insts[0])
            question = f"What color is the {cls}?"
        else:
            combined: Counter = Counter()
            voted: set[str] = set()
            for inst in insts:
                rgb = scene.rgb[inst.point_indices]
                if scene.colors_normalized:
                    rgb = np.round(np.asarray(rgb) * 255.0)
                hist = color_histogram(rgb)
                combined.update(hist)
                voted.update(_top_colors(hist))
            answer = sorted(voted, key=lambda n: (-combined[n], n))[:2]
            question = f"What color are the {cls}?"
        records.append(ColorQARecord(scene.scene_id, question, join_colors(answer),
                                     tuple(i.instance_id for i in insts)))
    return records


def color_qa_to_records(color_qa: Sequence[ColorQARecord], n_annotators: int = 2, split: str = "train"):
    """Wrap color questions as dataset records answered by synthetic annotators."""
    from .dataset import AnswerSubmission, QARecord

    out = []
    for k, rec in enumerate(color_qa):
        answers = [AnswerSubmission(rec.answer, "yes", f"{SYNTHETIC_ANNOTATOR}-{a}")
                   for a in range(n_annotators)]
        out.append(QARecord(f"{rec.scene_id}-color-{k:03d}", rec.scene_id, rec.question, answers, split))
    return out


def appearance_point_inputs(scene: Scene) -> np.ndarray:
    """(N, 6) encoder input: raw coordinates followed by colors in [0, 1]."""
    return np.concatenate([np.asarray(scene.xyz, dtype=np.float64), scene.normalized_rgb()], axis=1)


def object_point_inputs(scene: Scene, indices) -> np.ndarray:
    """Like ``appearance_point_inputs`` for one object, with coordinates centered on its centroid.

    Centering keeps the object's shape next to its colors, so a pooled feature
    says what the object looks like rather than where it sits in the room.
    """
    idx = np.asarray(indices)
    xyz = np.asarray(scene.xyz, dtype=np.float64)[idx]
    return np.concatenate([xyz - xyz.mean(axis=0), scene.normalized_rgb()[idx]], axis=1)


def appearance_features(scene: Scene, proposals, encoder) -> AppearanceFeature:
    """Per-object max pool over centered trace-back points, global mean over every raw point."""
    dtype = next(encoder.parameters()).dtype
    with torch.no_grad():
        glob = encoder.point_features(torch.as_tensor(appearance_point_inputs(scene), dtype=dtype)).mean(dim=0)
        per_object = [encoder(torch.as_tensor(object_point_inputs(scene, p.point_indices), dtype=dtype))
                      for p in proposals]
    width = glob.shape[0]
    per = torch.stack(per_object).numpy() if per_object else np.zeros((0, width))
    return AppearanceFeature(per_object=per.astype(np.float64), global_feature=glob.numpy().astype(np.float64))
