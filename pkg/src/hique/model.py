"""Question-aware multimodal attention network.

Data flow for one batch (``L`` slots, ``d`` = ``d_model``)::

    X_m (B, L, d_m) --conv stack--> U_m (B, L, d)            per modality
    U_m --self-attention + residual--> QA_m (B, L, d)        question-aware module
    (QA_m1, QA_m2) --bidirectional cross-attention--> U_m1m2, U_m2m1
    layer norm, concat per pair, mean over slots, sum over pairs -> fused (B, 2d)
    dropout -> linear -> softmax over {normal, depression}

Attention score maps (``L x L`` per head) are returned alongside the
prediction so they can be aggregated into per-question importance reports.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import DataValidationError
from .features import MODALITIES, MODALITY_DIMS

MODALITY_PAIRS = (("audio", "visual"), ("visual", "text"), ("text", "audio"))
LOSS_EPS = 1e-7


@dataclass
class ModelConfig:
    d_model: int = 4
    n_heads: int = 2
    # (kernel_size, out_channels); the last layer must output d_model channels.
    # None means two kernel-3 layers with 16 and d_model channels.
    conv_stack: Optional[tuple[tuple[int, int], ...]] = None
    dropout_rate: float = 0.5
    seq_len: int = 85
    modalities: tuple[str, ...] = MODALITIES
    qa_module: bool = True
    cm_attention: bool = True
    hierarchy_embedding: bool = True
    max_depth: int = 2
    key_mask: bool = False
    input_dims: dict = field(default_factory=lambda: dict(MODALITY_DIMS))

    def __post_init__(self):
        if self.conv_stack is None:
            self.conv_stack = ((3, 16), (3, self.d_model))
        self.conv_stack = tuple(tuple(int(v) for v in layer) for layer in self.conv_stack)
        self.modalities = tuple(m for m in MODALITIES if m in self.modalities)
        self.input_dims = {**MODALITY_DIMS, **dict(self.input_dims)}
        self.validate()

    def validate(self) -> None:
        if self.d_model <= 0 or self.n_heads <= 0 or self.d_model % self.n_heads:
            raise DataValidationError(f"n_heads ({self.n_heads}) must divide d_model ({self.d_model})")
        if not self.conv_stack or self.conv_stack[-1][1] != self.d_model:
            raise DataValidationError("last conv layer must output d_model channels")
        if any(k < 1 or k % 2 == 0 for k, _ in self.conv_stack):
            raise DataValidationError("conv kernel sizes must be odd (same padding)")
        if not 0 <= self.dropout_rate < 1:
            raise DataValidationError("dropout_rate must be in [0, 1)")
        if self.seq_len < 1:
            raise DataValidationError("seq_len must be positive")
        if not self.modalities:
            raise DataValidationError("at least one modality is required")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise DataValidationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["conv_stack"] = [list(x) for x in self.conv_stack]
        out["modalities"] = list(self.modalities)
        return out

    @property
    def pairs(self) -> tuple[tuple[str, str], ...]:
        return tuple((a, b) for a, b in MODALITY_PAIRS if a in self.modalities and b in self.modalities)

    @property
    def fused_width(self) -> int:
        if self.cm_attention and len(self.modalities) > 1:
            return 2 * self.d_model
        return len(self.modalities) * self.d_model


def _uniform_fan_in_(weight: Tensor, fan_in: int) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    nn.init.uniform_(weight, -bound, bound)


class ConvProjector(nn.Module):
    """1-D convolutions along the slot axis; absent slots are re-zeroed on output."""

    def __init__(self, in_dim: int, conv_stack: Sequence[tuple[int, int]]):
        super().__init__()
        layers = []
        c_in = in_dim
        for k, c_out in conv_stack:
            conv = nn.Conv1d(c_in, c_out, kernel_size=k, padding=k // 2)
            _uniform_fan_in_(conv.weight, c_in * k)
            nn.init.zeros_(conv.bias)
            layers.append(conv)
            c_in = c_out
        self.convs = nn.ModuleList(layers)
        self.in_dim = in_dim

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise DataValidationError(f"expected feature width {self.in_dim}, got {x.shape[-1]}")
        h = x.transpose(1, 2)
        for conv in self.convs:
            h = F.relu(conv(h))
        return h.transpose(1, 2) * mask.unsqueeze(-1).to(h.dtype)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with per-head Q/K/V projections and an output projection."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.d_model, self.n_heads = d_model, n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        for lin in (self.q_proj, self.k_proj, self.v_proj, self.out_proj):
            _uniform_fan_in_(lin.weight, d_model)
            nn.init.zeros_(lin.bias)

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.n_heads, self.d_head).transpose(1, 2)

    def forward(self, query: Tensor, key: Tensor, value: Tensor, key_mask: Optional[Tensor] = None):
        """Returns ``(output (B, Lq, d), maps (B, h, Lq, Lk))``."""
        for t in (query, key, value):
            if not torch.isfinite(t).all():
                raise DataValidationError("attention input contains NaN/Inf")
        q, k, v = self._split(self.q_proj(query)), self._split(self.k_proj(key)), self._split(self.v_proj(value))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        if key_mask is not None:
            # rows with no valid key fall back to attending everywhere
            valid = key_mask | ~key_mask.any(dim=-1, keepdim=True)
            scores = scores.masked_fill(~valid[:, None, None, :], float("-inf"))
        maps = torch.softmax(scores, dim=-1)
        heads = (maps @ v).transpose(1, 2).reshape(query.shape[0], query.shape[1], self.d_model)
        return self.out_proj(heads), maps


class HierarchyEmbedding(nn.Module):
    """Adds a learned vector for the governing topic slot and the follow-up chain depth."""

    def __init__(self, seq_len: int, d_model: int, max_depth: int):
        super().__init__()
        self.topic = nn.Embedding(seq_len, d_model)
        self.depth = nn.Embedding(max_depth + 1, d_model)
        self.max_depth = max_depth
        bound = 1.0 / math.sqrt(d_model)
        nn.init.uniform_(self.topic.weight, -bound, bound)
        nn.init.uniform_(self.depth.weight, -bound, bound)

    def forward(self, u: Tensor, topic: Tensor, depth: Tensor, mask: Tensor) -> Tensor:
        emb = self.topic(topic) + self.depth(depth.clamp(max=self.max_depth))
        return u + emb * mask.unsqueeze(-1).to(u.dtype)


def fuse(pair_outputs: Sequence[tuple[Tensor, Tensor]], norm: nn.Module) -> Tensor:
    """Layer-norm each direction, concatenate channels, average over slots, sum over pairs."""
    if not pair_outputs:
        raise DataValidationError("fusion needs at least one modality pair")
    pooled = []
    for u12, u21 in pair_outputs:
        if u12 is None or u21 is None:
            raise DataValidationError("missing direction in modality pair")
        pooled.append(torch.cat([norm(u12), norm(u21)], dim=-1).mean(dim=1))
    return torch.stack(pooled).sum(dim=0)


def bce_loss(p_depression: Tensor, labels: Tensor, eps: float = LOSS_EPS) -> Tensor:
    """Mean binary cross-entropy on the depression-class probability."""
    if p_depression.numel() == 0:
        raise DataValidationError("loss of an empty batch is undefined")
    p = p_depression.clamp(eps, 1 - eps)
    y = labels.to(p.dtype)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


class HiQuE(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        self.projectors = nn.ModuleDict({m: ConvProjector(c.input_dims[m], c.conv_stack) for m in c.modalities})
        self.hierarchy = HierarchyEmbedding(c.seq_len, c.d_model, c.max_depth) if c.hierarchy_embedding else None
        self.self_attn = (
            nn.ModuleDict({m: MultiHeadAttention(c.d_model, c.n_heads) for m in c.modalities}) if c.qa_module else None
        )
        cross = {}
        if c.cm_attention:
            for a, b in c.pairs:
                cross[f"{a}->{b}"] = MultiHeadAttention(c.d_model, c.n_heads)
                cross[f"{b}->{a}"] = MultiHeadAttention(c.d_model, c.n_heads)
        self.cross_attn = nn.ModuleDict(cross)
        self.norm = nn.LayerNorm(c.d_model)
        self.dropout = nn.Dropout(c.dropout_rate)
        self.head = nn.Linear(c.fused_width, 2)
        _uniform_fan_in_(self.head.weight, c.fused_width)
        nn.init.zeros_(self.head.bias)

    # -- stages ------------------------------------------------------------

    def project(self, modality: str, x: Tensor, mask: Tensor) -> Tensor:
        return self.projectors[modality](x, mask)

    def question_aware(self, modality: str, u: Tensor, key_mask: Optional[Tensor] = None):
        out, maps = self.self_attn[modality](u, u, u, key_mask)
        return out + u, maps

    def cross_modal(self, m1: str, m2: str, u1: Tensor, u2: Tensor, mask1=None, mask2=None):
        """Returns ``(U_m1m2, U_m2m1, maps_m1->m2, maps_m2->m1)``."""
        out12, maps12 = self.cross_attn[f"{m1}->{m2}"](u1, u2, u2, mask2)
        out21, maps21 = self.cross_attn[f"{m2}->{m1}"](u2, u1, u1, mask1)
        return out12 + u1, out21 + u2, maps12, maps21

    def predict(self, fused: Tensor) -> tuple[Tensor, Tensor]:
        logits = self.head(self.dropout(fused))
        return logits, torch.softmax(logits, dim=-1)

    # -- full pass ---------------------------------------------------------

    def forward(self, batch: dict) -> dict:
        c = self.config
        reps, self_maps, cross_maps, masks = {}, {}, {}, {}
        for m in c.modalities:
            x, mask = batch[m], batch[f"{m}_mask"]
            if x.shape[1] != c.seq_len:
                raise DataValidationError(f"{m}: expected {c.seq_len} slots, got {x.shape[1]}")
            u = self.project(m, x, mask)
            if self.hierarchy is not None:
                u = self.hierarchy(u, batch["topic"], batch["depth"], mask)
            masks[m] = mask if c.key_mask else None
            if self.self_attn is not None:
                u, self_maps[m] = self.question_aware(m, u, masks[m])
            reps[m] = u

        if c.cm_attention and len(c.modalities) > 1:
            pairs = []
            for a, b in c.pairs:
                uab, uba, mab, mba = self.cross_modal(a, b, reps[a], reps[b], masks[a], masks[b])
                cross_maps[f"{a}->{b}"], cross_maps[f"{b}->{a}"] = mab, mba
                pairs.append((uab, uba))
            fused = fuse(pairs, self.norm)
        else:
            fused = torch.cat([self.norm(reps[m]).mean(dim=1) for m in c.modalities], dim=-1)

        logits, probs = self.predict(fused)
        return {"logits": logits, "probs": probs, "fused": fused, "self_maps": self_maps, "cross_maps": cross_maps}


def batch_from_interviews(interviews, config: ModelConfig, dtype=torch.float32) -> dict:
    """Stack interviews into the tensor dict consumed by :meth:`HiQuE.forward`."""
    import numpy as np

    batch = {}
    for m in config.modalities:
        batch[m] = torch.as_tensor(np.stack([iv[m].matrix for iv in interviews]), dtype=dtype)
        batch[f"{m}_mask"] = torch.as_tensor(np.stack([iv[m].mask for iv in interviews]))
    topics, depths = zip(*(iv.hierarchy_arrays() for iv in interviews))
    batch["topic"] = torch.as_tensor(np.stack(topics))
    batch["depth"] = torch.as_tensor(np.stack(depths))
    labels = [iv.label.as_int if iv.label is not None else -1 for iv in interviews]
    batch["label"] = torch.as_tensor(labels, dtype=torch.long)
    return batch
