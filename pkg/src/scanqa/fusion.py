"""Multi-modal element assembly, transformer encoder and answer classifier."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import PointSetEncoder

ELEMENT_KINDS = ("linguistic", "appearance", "geometry", "auxiliary")
EMBEDDING_TYPES = ("pcf", "token", "position")
LINGUISTIC, APPEARANCE, GEOMETRY, AUXILIARY = range(4)
ABLATIONS = ("full", "qonly", "geo_q", "app_q", "no_spa_embedding", "one_element_for_all")
ABLATION_ALIASES = {"no_spa": "no_spa_embedding", "one_element": "one_element_for_all"}
N_SPATIAL = 12


class ShapeError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    n_answers: int
    d_hidden: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 128
    geo_width: int = 64
    app_width: int = 64
    pe_d_model: int = 16
    pe_base: float = 1000.0
    max_positions: int = 128
    dropout: float = 0.0
    ablation: str = "full"
    init_std: float = 0.02
    embedding_norm: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        self.ablation = ABLATION_ALIASES.get(self.ablation, self.ablation)
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")
        if self.d_hidden % self.n_heads:
            raise ValueError("d_hidden must be divisible by n_heads")
        if self.pe_d_model % 2:
            raise ValueError("pe_d_model must be even")

    @property
    def torch_dtype(self) -> torch.dtype:
        return getattr(torch, self.dtype)

    @property
    def spatial_width(self) -> int:
        return N_SPATIAL * self.pe_d_model

    @property
    def uses_appearance_elements(self) -> bool:
        return self.ablation in ("full", "app_q", "no_spa_embedding")

    @property
    def uses_geometry_elements(self) -> bool:
        return self.ablation in ("full", "geo_q", "no_spa_embedding", "one_element_for_all")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class ElementFeatures:
    """Scene-side inputs for a batch: B scenes, up to K objects each."""

    geometry: torch.Tensor         # (B, K, F_g)
    spatial: torch.Tensor          # (B, K, 12 * pe_d_model)
    appearance: torch.Tensor       # (B, K, F_a)
    object_mask: torch.Tensor      # (B, K) bool
    global_appearance: torch.Tensor  # (B, F_a)
    global_geometry: torch.Tensor    # (B, F_g)


@dataclass
class ElementSequence:
    pcf: torch.Tensor           # (B, S, d)
    token: torch.Tensor         # (B, S, d)
    position: torch.Tensor      # (B, S, d)
    kinds: torch.Tensor         # (B, S) long, index into ELEMENT_KINDS
    token_ids: torch.Tensor     # (B, S)
    position_ids: torch.Tensor  # (B, S)
    mask: torch.Tensor          # (B, S) bool, True = real element

    @property
    def lengths(self) -> torch.Tensor:
        return self.mask.sum(dim=1)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d // n_heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)
        self.dropout = nn.Dropout(dropout)
        self.last_attention: torch.Tensor | None = None

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        b, s, d = x.shape
        q, k, v = self.qkv(x).view(b, s, 3, self.n_heads, self.d_head).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        self.last_attention = attn
        ctx = (self.dropout(attn) @ v).transpose(1, 2).reshape(b, s, d)
        return self.out(ctx)


class EncoderLayer(nn.Module):
    """Post-norm block: attention, add & norm, feed-forward, add & norm."""

    def __init__(self, d: int, n_heads: int, d_ff: int, dropout: float = 0.0):
        super().__init__()
        self.attention = MultiHeadSelfAttention(d, n_heads, dropout)
        self.norm1 = nn.LayerNorm(d, eps=1e-12)
        self.ff1 = nn.Linear(d, d_ff)
        self.ff2 = nn.Linear(d_ff, d)
        self.norm2 = nn.LayerNorm(d, eps=1e-12)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask):
        x = self.norm1(x + self.dropout(self.attention(x, mask)))
        return self.norm2(x + self.dropout(self.ff2(F.gelu(self.ff1(x)))))


class FusionModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = c = config
        d = c.d_hidden
        self.geo_encoder = PointSetEncoder(3, c.geo_width)
        self.app_encoder = PointSetEncoder(6, c.app_width)
        self.token_embedding = nn.Embedding(c.vocab_size, d)
        self.position_embedding = nn.Embedding(c.max_positions, d)
        self.geo_proj = nn.Linear(c.geo_width + c.spatial_width, d)
        self.app_proj = nn.Linear(c.app_width, d)
        self.global_proj = nn.Linear(c.app_width + c.geo_width, d)
        if c.ablation == "one_element_for_all":
            self.combined_proj = nn.Linear(c.geo_width + c.spatial_width + c.app_width, d)
        self.scales = nn.Parameter(torch.ones(len(ELEMENT_KINDS), len(EMBEDDING_TYPES)))
        self.embedding_norm = nn.LayerNorm(d, eps=1e-12) if c.embedding_norm else nn.Identity()
        self.layers = nn.ModuleList(EncoderLayer(d, c.n_heads, c.d_ff, c.dropout) for _ in range(c.n_layers))
        self.classifier = nn.Linear(d, c.n_answers)
        self._init_weights()
        self.to(c.torch_dtype)
        # qonly zeroes every point-cloud feature embedding; kept out of the parameters so it stays zero
        self.register_buffer("pcf_gate", torch.tensor(0.0 if c.ablation == "qonly" else 1.0,
                                                      dtype=c.torch_dtype))

    def _init_weights(self):
        std = self.config.init_std
        encoders = {id(m) for enc in (self.geo_encoder, self.app_encoder) for m in enc.modules()}
        for m in self.modules():
            if id(m) in encoders:
                continue
            if isinstance(m, nn.Linear):
                nn.init.normal_(m.weight, 0.0, std)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Embedding):
                nn.init.normal_(m.weight, 0.0, std)

    @property
    def dtype(self) -> torch.dtype:
        return self.config.torch_dtype

    # -- scene side ---------------------------------------------------------

    def encode_scenes(self, batch) -> ElementFeatures:
        """Run both point encoders over a collated scene batch (see ``batching.SceneBatch``)."""
        c = self.config
        geo = self.geo_encoder(batch.object_xyz, batch.object_point_mask)
        app = self.app_encoder(batch.object_points, batch.object_point_mask)
        geo = geo.masked_fill(~batch.object_mask[..., None], 0.0)
        app = app.masked_fill(~batch.object_mask[..., None], 0.0)

        w = batch.scene_point_mask.to(self.dtype)[..., None]
        denom = w.sum(dim=1).clamp_min(1.0)
        g_app = (self.app_encoder.point_features(batch.scene_points) * w).sum(dim=1) / denom
        g_geo = (self.geo_encoder.point_features(batch.scene_xyz) * w).sum(dim=1) / denom

        spatial = batch.spatial
        if c.ablation == "no_spa_embedding":
            spatial = torch.zeros_like(spatial)
        if c.ablation == "geo_q":
            g_app = torch.zeros_like(g_app)
        if c.ablation == "app_q":
            g_geo = torch.zeros_like(g_geo)
        return ElementFeatures(geo, spatial, app, batch.object_mask, g_app, g_geo)

    # -- element assembly --------------------------------------------------

    def _check(self, name: str, tensor: torch.Tensor, expected: int):
        if tensor.shape[-1] != expected:
            raise ShapeError(f"{name}: expected feature width {expected}, got {tensor.shape[-1]}")

    def assemble(self, token_ids: torch.Tensor, lengths: torch.Tensor,
                 feats: ElementFeatures | None, vocab_ids: dict) -> ElementSequence:
        """Lay out [CLS] q_1..q_T [SEP] app_1..app_K [SEP] geo_1..geo_K [SEP] per sample.

        Blocks are padded to the batch maxima; padded slots are masked. Position
        ids count each object block as a single position.
        """
        c = self.config
        dev = token_ids.device
        b, t_max = token_ids.shape
        use_app = feats is not None and c.uses_appearance_elements
        use_geo = feats is not None and c.uses_geometry_elements
        k_max = feats.object_mask.shape[1] if feats is not None else 0
        k_app = k_max if use_app else 0
        k_geo = k_max if use_geo else 0
        s = t_max + k_app + k_geo + 4
        d = c.d_hidden

        ar_t = torch.arange(t_max, device=dev)
        q_mask = ar_t[None, :] < lengths[:, None]
        T = lengths[:, None]
        zeros_b1 = torch.zeros(b, 1, dtype=torch.long, device=dev)
        ones_mask = torch.ones(b, 1, dtype=torch.bool, device=dev)

        tok_parts = [zeros_b1 + vocab_ids["cls"], token_ids.masked_fill(~q_mask, vocab_ids["pad"]),
                     zeros_b1 + vocab_ids["sep"]]
        pos_parts = [zeros_b1, (ar_t[None, :] + 1).expand(b, -1).masked_fill(~q_mask, 0), T + 1]
        kind_parts = [zeros_b1 + AUXILIARY, torch.full((b, t_max), LINGUISTIC, device=dev), zeros_b1 + AUXILIARY]
        mask_parts = [ones_mask, q_mask, ones_mask]

        if feats is not None:
            self._check("global-projection", torch.cat([feats.global_appearance, feats.global_geometry], -1),
                        c.app_width + c.geo_width)
            glob = self.global_proj(torch.cat([feats.global_appearance, feats.global_geometry], -1))
        else:
            glob = torch.zeros(b, d, dtype=self.dtype, device=dev)
        pcf_parts = [glob[:, None, :].expand(b, t_max + 2, d)]

        def object_block(kind, tok_id, pos_offset, pcf, n):
            om = feats.object_mask
            tok_parts.append((zeros_b1 + tok_id).expand(b, n))
            pos_parts.append((T + pos_offset).expand(b, n))
            kind_parts.append(torch.full((b, n), kind, device=dev))
            mask_parts.append(om)
            pcf_parts.append(pcf)

        def separator(pos_offset):
            tok_parts.append(zeros_b1 + vocab_ids["sep"])
            pos_parts.append(T + pos_offset)
            kind_parts.append(zeros_b1 + AUXILIARY)
            mask_parts.append(ones_mask)
            pcf_parts.append(glob[:, None, :])

        if use_app:
            self._check("appearance-projection", feats.appearance, c.app_width)
            object_block(APPEARANCE, vocab_ids["app"], 2, self.app_proj(feats.appearance), k_app)
        separator(3)
        if use_geo:
            self._check("geometry-projection", feats.geometry, c.geo_width)
            self._check("geometry-projection", feats.spatial, c.spatial_width)
            if c.ablation == "one_element_for_all":
                pcf = self.combined_proj(torch.cat([feats.geometry, feats.spatial, feats.appearance], -1))
            else:
                pcf = self.geo_proj(torch.cat([feats.geometry, feats.spatial], -1))
            object_block(GEOMETRY, vocab_ids["geo"], 4, pcf, k_geo)
        separator(5)

        token_ids_all = torch.cat(tok_parts, 1)
        position_ids = torch.cat(pos_parts, 1)
        if int(position_ids.max()) >= c.max_positions:
            raise ShapeError(f"sequence needs position {int(position_ids.max())} >= max_positions {c.max_positions}")
        seq = ElementSequence(
            pcf=torch.cat(pcf_parts, 1),
            token=self.token_embedding(token_ids_all),
            position=self.position_embedding(position_ids),
            kinds=torch.cat(kind_parts, 1),
            token_ids=token_ids_all,
            position_ids=position_ids,
            mask=torch.cat(mask_parts, 1),
        )
        assert seq.pcf.shape[1] == s
        return seq

    # -- encoder -----------------------------------------------------------

    def element_inputs(self, seq: ElementSequence) -> torch.Tensor:
        sc = self.scales[seq.kinds]  # (B, S, 3)
        return (sc[..., 0:1] * self.pcf_gate * seq.pcf
                + sc[..., 1:2] * seq.token
                + sc[..., 2:3] * seq.position)

    def encode(self, seq: ElementSequence) -> torch.Tensor:
        x = self.embedding_norm(self.element_inputs(seq))
        for layer in self.layers:
            x = layer(x, seq.mask)
        return x

    def forward_sequence(self, seq: ElementSequence) -> torch.Tensor:
        return self.classifier(self.encode(seq)[:, 0])

    def forward(self, questions, scenes=None) -> torch.Tensor:
        feats = None
        if scenes is not None and self.config.ablation != "qonly":
            feats = self.encode_scenes(scenes)
        seq = self.assemble(questions.token_ids, questions.lengths, feats, questions.vocab_ids)
        return self.forward_sequence(seq)


def assemble_elements(model: FusionModel, questions, features: ElementFeatures | None) -> ElementSequence:
    return model.assemble(questions.token_ids, questions.lengths, features, questions.vocab_ids)


def forward(seq: ElementSequence, model: FusionModel) -> torch.Tensor:
    return model.forward_sequence(seq)


def loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean soft-target cross-entropy, -sum(target * log_softmax(logits))."""
    if (target < 0).any():
        raise ValueError("target distribution has negative entries")
    sums = target.sum(dim=-1)
    if not torch.allclose(sums, torch.ones_like(sums), atol=1e-6):
        raise ValueError("target distribution must sum to 1")
    return -(target * F.log_softmax(logits, dim=-1)).sum(dim=-1).mean()


def backward(model: FusionModel, questions, scenes, target: torch.Tensor) -> dict[str, torch.Tensor]:
    """Gradients of the loss for every named parameter (zeros for parameters the loss does not touch)."""
    model.zero_grad(set_to_none=True)
    value = loss(model(questions, scenes), target)
    value.backward()
    return {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
            for n, p in model.named_parameters()}


# ---------------------------------------------------------------------------
# checkpoints: tensors.bin (little-endian float32, concatenated) + manifest.txt

MANIFEST = "manifest.txt"
TENSORS = "tensors.bin"
CONFIG = "config.json"


def save_checkpoint(model: FusionModel, directory, extra: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines, offset = [], 0
    with open(directory / TENSORS, "wb") as fh:
        for name, t in model.state_dict().items():
            arr = t.detach().cpu().numpy().astype("<f4")
            fh.write(arr.tobytes())
            shape = "x".join(str(s) for s in arr.shape) or "scalar"
            lines.append(f"{name} {shape} {offset}")
            offset += arr.nbytes
    (directory / MANIFEST).write_text("\n".join(lines) + "\n")
    meta = {"model": asdict(model.config)}
    if extra:
        meta.update(extra)
    (directory / CONFIG).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_checkpoint(directory) -> tuple[FusionModel, dict]:
    directory = Path(directory)
    meta = json.loads((directory / CONFIG).read_text())
    model = FusionModel(ModelConfig.from_dict(meta["model"]))
    raw = (directory / TENSORS).read_bytes()
    state = {}
    for line in (directory / MANIFEST).read_text().splitlines():
        name, shape, offset = line.split()
        dims = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=int(offset)).reshape(dims)
        state[name] = torch.from_numpy(arr.copy()).to(model.dtype)
    model.load_state_dict(state)
    return model, meta
