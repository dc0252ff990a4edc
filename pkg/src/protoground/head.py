"""Hadamard fusion and REG-token box regression."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .encoders import EncoderLayer, FeatureGrid, TokenFeatures, sine_table_1d, sine_table_2d

BOX_EPS = 1e-6
MIN_EXTENT = 1e-6


@dataclass(frozen=True)
class BBox:
    """Normalized box anchored at its top-left corner."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (0 <= self.x <= 1 and 0 <= self.y <= 1):
            raise ValueError(f"top-left corner ({self.x}, {self.y}) outside the unit square")
        if not (0 < self.w <= 1 and 0 < self.h <= 1):
            raise ValueError(f"extent ({self.w}, {self.h}) must lie in (0, 1]")
        if self.x + self.w > 1 + BOX_EPS or self.y + self.h > 1 + BOX_EPS:
            raise ValueError("box extends past the canvas")

    def as_tensor(self, dtype: torch.dtype = torch.float64) -> Tensor:
        return torch.tensor([self.x, self.y, self.w, self.h], dtype=dtype)

    @classmethod
    def from_tensor(cls, t: Tensor) -> BBox:
        x, y, w, h = (float(v) for v in t.reshape(4))
        return cls(x, y, w, h)


def hadamard_fuse(quantized: FeatureGrid, language: TokenFeatures, phi: Tensor) -> FeatureGrid:
    """tanh(visual) * tanh(pooled language), broadcast over every cell.

    The language side is pooled to one vector per query as the
    ``phi``-weighted sum of token features.
    """
    if quantized.channel_dim != language.channel_dim:
        raise ValueError(
            f"channel mismatch: visual {quantized.channel_dim}, language {language.channel_dim}"
        )
    pooled = (language.values * phi[:, None, :]).sum(-1)  # (B, C)
    return quantized.replace(torch.tanh(quantized.values) * torch.tanh(pooled)[:, :, None])


class RegToken(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.embedding = nn.Parameter(torch.randn(dim) * 0.02)


def _box_from_logits(logits: Tensor) -> Tensor:
    """Sigmoid outputs read as (x, y, w, h), with the corner scaled into the room left by the extent."""
    s = torch.sigmoid(logits)
    wh = s[..., 2:].clamp(min=MIN_EXTENT)
    xy = s[..., :2] * (1 - wh)
    return torch.cat((xy, wh), dim=-1)


class RegressionHead(nn.Module):
    """REG token + dropout-free transformer encoder + 3-layer MLP.

    With ``joint_language=True`` the encoder also receives the language tokens
    (the concatenated vision-language variant used for the fusion ablation).
    """

    def __init__(
        self,
        dim: int = 64,
        layers: int = 2,
        heads: int = 4,
        ff_dim: int = 128,
        max_len: int = 12,
        joint_language: bool = False,
    ):
        super().__init__()
        self.dim = dim
        self.reg = RegToken(dim)
        self.reg_pos = nn.Parameter(torch.randn(dim) * 0.02)
        self.layers = nn.ModuleList(EncoderLayer(dim, heads, ff_dim, dropout=0.0) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, 4)
        )
        self.joint_language = joint_language
        if joint_language:
            self.modality = nn.Parameter(torch.randn(2, dim) * 0.02)
            self.register_buffer("lang_pos", sine_table_1d(max_len, dim), persistent=False)
        self._pos_cache: dict[tuple, Tensor] = {}

    def dropout_probabilities(self) -> list[float]:
        probs = []
        for m in self.modules():
            if isinstance(m, nn.Dropout):
                probs.append(m.p)
            elif isinstance(m, nn.MultiheadAttention):
                probs.append(m.dropout)
        return probs

    def _grid_pos(self, fused: FeatureGrid, like: Tensor) -> Tensor:
        key = (fused.grid_h, fused.grid_w, like.dtype, like.device)
        if key not in self._pos_cache:
            self._pos_cache[key] = sine_table_2d(fused.grid_h, fused.grid_w, self.dim).to(like)
        return self._pos_cache[key]

    def forward(self, fused: FeatureGrid, language: TokenFeatures | None = None) -> Tensor:
        """Return boxes (B, 4) as normalized (x, y, w, h)."""
        cells = fused.tokens()
        if not torch.isfinite(cells).all():
            raise ValueError("non-finite values in fused features")
        b = cells.shape[0]
        reg = self.reg.embedding.expand(b, 1, -1)
        pos = torch.cat((self.reg_pos[None, :], self._grid_pos(fused, cells)), dim=0)
        seq = torch.cat((reg, cells), dim=1)
        pos = pos.expand(b, -1, -1)
        pad = None
        if self.joint_language:
            if language is None:
                raise ValueError("joint vision-language head needs language tokens")
            words = language.tokens()
            l = words.shape[1]
            seq = torch.cat((seq, words), dim=1)
            vis_pos = pos + self.modality[0]
            lang_pos = (self.lang_pos[:l].to(words) + self.modality[1]).expand(b, -1, -1)
            pos = torch.cat((vis_pos, lang_pos), dim=1)
            keep = torch.ones(b, seq.shape[1] - l, dtype=torch.bool, device=seq.device)
            pad = ~torch.cat((keep, language.mask), dim=1)
        # positions also enter the token content so the REG readout can see where it attended
        seq = seq + pos
        for layer in self.layers:
            seq = layer(seq, pos, key_padding_mask=pad)
        return _box_from_logits(self.mlp(self.norm(seq[:, 0])))


def regress_box(fused: FeatureGrid, head: RegressionHead) -> Tensor:
    return head(fused)
