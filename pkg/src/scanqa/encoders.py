"""Small trainable point-set encoder shared by the geometry and appearance branches."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class PointSetEncoder(nn.Module):
    """Per-point two-layer map followed by max pooling.

    ``point_features`` works on (..., P, in_dim) and returns (..., P, width);
    calling the module pools over the point axis. An optional boolean ``mask``
    of shape (..., P) excludes padded points from the pool.
    """

    def __init__(self, in_dim: int, width: int = 64, hidden: int | None = None):
        super().__init__()
        hidden = hidden or width
        self.in_dim = in_dim
        self.width = width
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, width)

    def point_features(self, x: torch.Tensor) -> torch.Tensor:
        return F.gelu(self.fc2(F.gelu(self.fc1(x))))

    def pool(self, feats: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        if mask is not None:
            feats = feats.masked_fill(~mask[..., None], float("-inf"))
        return feats.max(dim=-2).values

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        return self.pool(self.point_features(x), mask)
