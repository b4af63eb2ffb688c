"""Object proposals, box kernels (IoU, NMS, FPS) and spatial embeddings."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .scene import Scene, SceneExtents


class ProposalConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AABB:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    z_min: float
    z_max: float

    def __post_init__(self):
        if not (self.x_min <= self.x_max and self.y_min <= self.y_max and self.z_min <= self.z_max):
            raise ValueError(f"invalid box bounds: {self}")

    @classmethod
    def from_points(cls, pts) -> "AABB":
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        return cls(float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1]), float(lo[2]), float(hi[2]))

    @property
    def lo(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.z_min])

    @property
    def hi(self) -> np.ndarray:
        return np.array([self.x_max, self.y_max, self.z_max])

    @property
    def center(self) -> np.ndarray:
        return (self.lo + self.hi) / 2

    @property
    def size(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    def as_tuple(self) -> tuple[float, ...]:
        return (self.x_min, self.x_max, self.y_min, self.y_max, self.z_min, self.z_max)


@dataclass
class ObjectProposal:
    box: AABB
    point_indices: np.ndarray
    score: float = 1.0
    instance_id: int | None = None
    class_name: str | None = None
    geometry_feature: np.ndarray | None = None
    spatial_embedding: np.ndarray | None = None

    def to_record(self, scene_id: str) -> dict:
        rec = {
            "scene_id": scene_id,
            "box": list(self.box.as_tuple()),
            "score": self.score,
            "indices": [int(i) for i in self.point_indices],
        }
        if self.instance_id is not None:
            rec["instance_id"] = self.instance_id
            rec["class_name"] = self.class_name
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "ObjectProposal":
        return cls(
            box=AABB(*rec["box"]),
            point_indices=np.asarray(rec["indices"], dtype=np.int64),
            score=float(rec["score"]),
            instance_id=rec.get("instance_id"),
            class_name=rec.get("class_name"),
        )


def dump_proposals(scene_id: str, proposals: Iterable[ObjectProposal]) -> str:
    return "".join(json.dumps(p.to_record(scene_id)) + "\n" for p in proposals)


def load_proposals(text: str) -> list[ObjectProposal]:
    return [ObjectProposal.from_record(json.loads(line)) for line in text.splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# kernels

def iou_3d(a: AABB, b: AABB) -> float:
    overlap = np.minimum(a.hi, b.hi) - np.maximum(a.lo, b.lo)
    if (overlap <= 0).any():
        return 0.0
    inter = float(np.prod(overlap))
    union = a.volume + b.volume - inter
    if union <= 0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def _proposal_order_key(p: ObjectProposal):
    c = p.box.center
    return (-p.score, -p.box.volume, float(c[0]), float(c[1]), float(c[2]))


def sort_proposals(proposals: Sequence[ObjectProposal]) -> list[ObjectProposal]:
    """Score descending, then volume descending, then lexicographic center."""
    return sorted(proposals, key=_proposal_order_key)


def nms_3d(proposals: Sequence[ObjectProposal], iou_threshold: float = 0.25) -> list[ObjectProposal]:
    """Greedy suppression: a proposal is dropped if its IoU with any kept one exceeds the threshold."""
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in [0, 1], got {iou_threshold}")
    kept: list[ObjectProposal] = []
    for p in sort_proposals(proposals):
        if all(iou_3d(p.box, k.box) <= iou_threshold for k in kept):
            kept.append(p)
    return kept


def fps(points, m: int, seed: int | None = None) -> np.ndarray:
    """Farthest point sampling.

    Without a seed the first pick is the lexicographically smallest point;
    with a seed it is drawn uniformly. Ties go to the lowest index.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = pts.shape[0]
    if m > n or m < 0:
        raise ValueError(f"cannot sample {m} of {n} points")
    if m == 0:
        return np.empty(0, dtype=np.int64)
    if seed is None:
        first = int(np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))[0])
    else:
        first = int(np.random.default_rng(seed).integers(n))
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = first
    d2 = ((pts - pts[first]) ** 2).sum(axis=1)
    for k in range(1, m):
        nxt = int(np.argmax(d2))
        chosen[k] = nxt
        d2 = np.minimum(d2, ((pts - pts[nxt]) ** 2).sum(axis=1))
    return chosen


# ---------------------------------------------------------------------------
# proposals

def propose_objects(
    scene: Scene,
    mode: str = "ground_truth",
    max_k: int = 32,
    radius: float = 0.3,
    iou_threshold: float = 0.25,
    n_seeds: int | None = None,
) -> list[ObjectProposal]:
    if mode in ("ground_truth", "gt"):
        if scene.instances is None:
            raise ProposalConfigError("ground_truth proposals need instance annotations")
        props = [
            ObjectProposal(
                box=AABB.from_points(scene.xyz[inst.point_indices]),
                point_indices=inst.point_indices,
                score=1.0,
                instance_id=inst.instance_id,
                class_name=inst.class_name,
            )
            for inst in scene.instances
        ]
        return sort_proposals(props)[:max_k]
    if mode not in ("heuristic", "heur"):
        raise ProposalConfigError(f"unknown proposal mode {mode!r}")

    xyz = np.asarray(scene.xyz, dtype=np.float64)
    if n_seeds is None:
        n_seeds = 4 * max_k
    seeds = fps(xyz, min(n_seeds, len(xyz)))
    groups = []
    for s in seeds:
        idx = np.flatnonzero(((xyz - xyz[s]) ** 2).sum(axis=1) <= radius * radius)
        groups.append(idx)
    biggest = max(len(g) for g in groups)
    props = [
        ObjectProposal(box=AABB.from_points(xyz[g]), point_indices=g, score=len(g) / biggest)
        for g in groups
    ]
    return nms_3d(props, iou_threshold)[:max_k]


# ---------------------------------------------------------------------------
# spatial embedding

def spatial_vector(box: AABB, extents: SceneExtents) -> np.ndarray:
    """12-d box descriptor: center, size and bounds, each over the scene span of its axis.

    Coordinates are shifted by the scene origin first.
    """
    o = np.asarray(extents.origin, dtype=np.float64)
    s = extents.spans
    lo = (box.lo - o) / s
    hi = (box.hi - o) / s
    c = (lo + hi) / 2
    d = box.size / s
    return np.array([c[0], c[1], c[2], d[0], d[1], d[2],
                     lo[0], hi[0], lo[1], hi[1], lo[2], hi[2]])


@dataclass(frozen=True)
class PECodebook:
    d_model: int = 16
    base: float = 1000.0

    def __post_init__(self):
        if self.d_model <= 0 or self.d_model % 2:
            raise ValueError(f"d_model must be a positive even integer, got {self.d_model}")

    @property
    def divisors(self) -> np.ndarray:
        i = np.arange(self.d_model // 2, dtype=np.float64)
        return self.base ** (2 * i / self.d_model)


def positional_encode(v, codebook: PECodebook = PECodebook()) -> np.ndarray:
    """Sinusoidal encoding of every component, flattened component-major.

    Accepts (..., C) input and returns (..., C * d_model); slot ``2i`` of a
    component holds the sine term and ``2i + 1`` the cosine.
    """
    v = np.asarray(v, dtype=np.float64)
    arg = v[..., None] / codebook.divisors
    out = np.empty(v.shape + (codebook.d_model,))
    out[..., 0::2] = np.sin(arg)
    out[..., 1::2] = np.cos(arg)
    return out.reshape(v.shape[:-1] + (v.shape[-1] * codebook.d_model,))


def geometry_features(points, encoder) -> np.ndarray:
    """Encode one proposal's coordinates with a point-set encoder after centering on the centroid."""
    import torch

    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    centered = pts - pts.mean(axis=0)
    dtype = next(encoder.parameters()).dtype
    with torch.no_grad():
        feat = encoder(torch.as_tensor(centered, dtype=dtype))
    return feat.cpu().numpy().astype(np.float64)
