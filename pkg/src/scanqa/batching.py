"""Per-scene tensor preparation and batch collation for the fusion model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .appearance import appearance_point_inputs
from .geometry import PECodebook, fps, positional_encode, propose_objects, spatial_vector
from .linguistic import TokenizedQuestion, TokenVocabulary
from .scene import Scene


@dataclass
class SceneTensors:
    """Fixed-size numpy inputs derived once from a scene and its proposals.

    Object point sets are resampled to exactly ``points_per_object`` entries:
    farthest point sampling when larger, cyclic repetition when smaller (max
    pooling is unaffected by repeats).
    """

    scene_id: str
    scene_points: np.ndarray    # (N_s, 6) xyz + rgb in [0, 1]
    scene_xyz: np.ndarray       # (N_s, 3) centered on the scene centroid
    object_points: np.ndarray   # (K, P, 6) centered xyz + rgb
    object_xyz: np.ndarray      # (K, P, 3) centered on each object's centroid
    spatial: np.ndarray         # (K, 12 * d_model)
    proposals: list

    @property
    def n_objects(self) -> int:
        return self.object_points.shape[0]


def _resample(idx: np.ndarray, xyz: np.ndarray, p: int) -> np.ndarray:
    if len(idx) <= p:
        return np.resize(idx, p)
    return idx[fps(xyz[idx], p)]


def prepare_scene(scene: Scene, codebook: PECodebook, proposals=None, mode: str = "ground_truth",
                  max_k: int = 32, points_per_object: int = 64, scene_points: int = 512) -> SceneTensors:
    if proposals is None:
        proposals = propose_objects(scene, mode=mode, max_k=max_k)
    xyz = np.asarray(scene.xyz, dtype=np.float64)
    feats6 = appearance_point_inputs(scene)
    n = len(xyz)
    keep = np.arange(n) if n <= scene_points else np.sort(fps(xyz, scene_points))

    obj_pts, obj_xyz, spatial = [], [], []
    for p in proposals:
        sel = _resample(np.asarray(p.point_indices), xyz, points_per_object)
        centered = xyz[sel] - xyz[p.point_indices].mean(axis=0)
        obj_pts.append(np.concatenate([centered, feats6[sel, 3:]], axis=1))
        obj_xyz.append(centered)
        spatial.append(positional_encode(spatial_vector(p.box, scene.extents), codebook))
    k = len(proposals)
    sw = 12 * codebook.d_model
    return SceneTensors(
        scene_id=scene.scene_id,
        scene_points=feats6[keep],
        scene_xyz=xyz[keep] - xyz.mean(axis=0),
        object_points=np.stack(obj_pts) if k else np.zeros((0, points_per_object, 6)),
        object_xyz=np.stack(obj_xyz) if k else np.zeros((0, points_per_object, 3)),
        spatial=np.stack(spatial) if k else np.zeros((0, sw)),
        proposals=list(proposals),
    )


@dataclass
class SceneBatch:
    scene_points: torch.Tensor       # (B, N, 6)
    scene_xyz: torch.Tensor          # (B, N, 3)
    scene_point_mask: torch.Tensor   # (B, N)
    object_points: torch.Tensor      # (B, K, P, 6)
    object_xyz: torch.Tensor         # (B, K, P, 3)
    object_point_mask: torch.Tensor  # (B, K, P)
    object_mask: torch.Tensor        # (B, K)
    spatial: torch.Tensor            # (B, K, 12 * d_model)


def collate_scenes(items: Sequence[SceneTensors], dtype=torch.float32) -> SceneBatch:
    b = len(items)
    n = max(len(s.scene_points) for s in items)
    k = max(s.n_objects for s in items)
    p = max((s.object_points.shape[1] for s in items), default=1)
    sw = items[0].spatial.shape[1]
    sp = np.zeros((b, n, 6)); sx = np.zeros((b, n, 3)); sm = np.zeros((b, n), bool)
    op = np.zeros((b, k, p, 6)); ox = np.zeros((b, k, p, 3)); opm = np.zeros((b, k, p), bool)
    om = np.zeros((b, k), bool); spa = np.zeros((b, k, sw))
    for i, s in enumerate(items):
        m = len(s.scene_points)
        sp[i, :m] = s.scene_points; sx[i, :m] = s.scene_xyz; sm[i, :m] = True
        kk = s.n_objects
        if kk:
            op[i, :kk] = s.object_points; ox[i, :kk] = s.object_xyz
            opm[i, :kk] = True; om[i, :kk] = True; spa[i, :kk] = s.spatial
    # padded objects keep one live point so masked max-pools stay finite
    opm[:, :, 0] = True
    t = lambda a: torch.as_tensor(a, dtype=dtype)
    return SceneBatch(t(sp), t(sx), torch.as_tensor(sm), t(op), t(ox), torch.as_tensor(opm),
                      torch.as_tensor(om), t(spa))


@dataclass
class QuestionBatch:
    token_ids: torch.Tensor  # (B, T)
    lengths: torch.Tensor    # (B,)
    vocab_ids: dict


def vocab_ids(vocab: TokenVocabulary) -> dict:
    return {"cls": vocab.cls_id, "sep": vocab.sep_id, "pad": vocab.pad_id,
            "app": vocab.app_id, "geo": vocab.geo_id}


def collate_questions(items: Sequence[TokenizedQuestion], vocab: TokenVocabulary) -> QuestionBatch:
    t = max(len(q) for q in items)
    ids = np.full((len(items), t), vocab.pad_id, dtype=np.int64)
    for i, q in enumerate(items):
        ids[i, : len(q)] = q.token_ids
    return QuestionBatch(torch.as_tensor(ids), torch.as_tensor([len(q) for q in items]), vocab_ids(vocab))
