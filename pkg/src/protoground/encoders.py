"""Two-branch feature extraction: a conv + transformer visual encoder and a
token-embedding transformer language encoder, both trained from scratch."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import torch
from torch import Tensor, nn


@dataclass
class FeatureGrid:
    """Channel-major spatial features, ``values`` shaped (B, C, H*W)."""

    values: Tensor
    grid_h: int
    grid_w: int

    def __post_init__(self):
        if self.values.dim() != 3 or self.values.shape[-1] != self.grid_h * self.grid_w:
            raise ValueError(
                f"expected values of shape (B, C, {self.grid_h * self.grid_w}), got {tuple(self.values.shape)}"
            )

    @property
    def channel_dim(self) -> int:
        return self.values.shape[1]

    def tokens(self) -> Tensor:
        """(B, H*W, C) view for sequence models."""
        return self.values.transpose(1, 2)

    def to_map(self) -> Tensor:
        b, c, _ = self.values.shape
        return self.values.reshape(b, c, self.grid_h, self.grid_w)

    @classmethod
    def from_map(cls, fmap: Tensor) -> FeatureGrid:
        b, c, h, w = fmap.shape
        return cls(fmap.reshape(b, c, h * w), h, w)

    @classmethod
    def from_tokens(cls, tokens: Tensor, grid_h: int, grid_w: int) -> FeatureGrid:
        return cls(tokens.transpose(1, 2), grid_h, grid_w)

    def replace(self, values: Tensor) -> FeatureGrid:
        return FeatureGrid(values, self.grid_h, self.grid_w)


@dataclass
class TokenFeatures:
    """Per-token features ``values`` (B, C, L) with validity ``mask`` (B, L)."""

    values: Tensor
    mask: Tensor

    def __post_init__(self):
        if self.values.dim() != 3 or self.mask.shape != (self.values.shape[0], self.values.shape[2]):
            raise ValueError(
                f"values {tuple(self.values.shape)} and mask {tuple(self.mask.shape)} disagree"
            )

    @property
    def channel_dim(self) -> int:
        return self.values.shape[1]

    def tokens(self) -> Tensor:
        return self.values.transpose(1, 2)

    @classmethod
    def from_tokens(cls, tokens: Tensor, mask: Tensor) -> TokenFeatures:
        return cls(tokens.transpose(1, 2), mask)


def sine_table_1d(length: int, dim: int, temperature: float = 10000.0) -> Tensor:
    """Standard transformer sinusoidal table, shape (length, dim)."""
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    idx = torch.arange(dim, dtype=torch.float64)
    freq = temperature ** (2 * torch.div(idx, 2, rounding_mode="floor") / dim)
    angles = pos / freq
    table = torch.where(idx % 2 == 0, angles.sin(), angles.cos())
    return table.float()


def sine_table_2d(grid_h: int, grid_w: int, dim: int, temperature: float = 10000.0) -> Tensor:
    """DETR-style normalized sine encoding, shape (H*W, dim); rows first half, cols second."""
    if dim % 4:
        raise ValueError("2D sine encoding needs dim divisible by 4")
    half = dim // 2
    scale = 2 * math.pi
    eps = 1e-6
    y = torch.arange(1, grid_h + 1, dtype=torch.float64) / (grid_h + eps) * scale
    x = torch.arange(1, grid_w + 1, dtype=torch.float64) / (grid_w + eps) * scale
    idx = torch.arange(half, dtype=torch.float64)
    freq = temperature ** (2 * torch.div(idx, 2, rounding_mode="floor") / half)

    def encode(v):
        a = v[:, None] / freq
        return torch.stack((a[:, 0::2].sin(), a[:, 1::2].cos()), dim=2).flatten(1)

    pos_y = encode(y)[:, None, :].expand(grid_h, grid_w, half)
    pos_x = encode(x)[None, :, :].expand(grid_h, grid_w, half)
    return torch.cat((pos_y, pos_x), dim=2).reshape(grid_h * grid_w, dim).float()


class EncoderLayer(nn.Module):
    """Pre-norm transformer layer; positions are added to queries and keys only.

    Stacks of these layers end with a LayerNorm owned by the caller.
    """

    def __init__(self, dim: int, heads: int, ff_dim: int, dropout: float = 0.0):
        super().__init__()
        self.dropout = dropout
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.ff = nn.Sequential(nn.Linear(dim, ff_dim), nn.ReLU(), nn.Dropout(dropout), nn.Linear(ff_dim, dim))
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.drop1 = nn.Dropout(dropout)
        self.drop2 = nn.Dropout(dropout)

    def forward(self, x: Tensor, pos: Tensor | None = None, key_padding_mask: Tensor | None = None) -> Tensor:
        y = self.norm1(x)
        qk = y if pos is None else y + pos
        attn, _ = self.attn(qk, qk, y, key_padding_mask=key_padding_mask, need_weights=False)
        x = x + self.drop1(attn)
        return x + self.drop2(self.ff(self.norm2(x)))


class _Encoder(nn.Module):
    def load_parameters(self, tensors: Mapping[str, Tensor], strict: bool = True) -> list[str]:
        """Copy externally supplied tensors (e.g. pretrained weights) into this encoder.

        Returns the names that were loaded. Shape mismatches always raise.
        """
        own = dict(self.named_parameters())
        loaded = []
        for name, value in tensors.items():
            if name not in own:
                if strict:
                    raise KeyError(f"unexpected parameter {name!r}")
                continue
            if tuple(own[name].shape) != tuple(value.shape):
                raise ValueError(f"{name}: expected shape {tuple(own[name].shape)}, got {tuple(value.shape)}")
            with torch.no_grad():
                own[name].copy_(value)
            loaded.append(name)
        if strict and set(loaded) != set(own):
            raise KeyError(f"missing parameters: {sorted(set(own) - set(loaded))}")
        return loaded


def _conv_block(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.GroupNorm(8, cout),
        nn.ReLU(inplace=True),
    )


class VisualEncoder(_Encoder):
    """Conv stem (stride 8) followed by transformer layers over the grid."""

    stride = 8

    def __init__(self, dim: int = 64, layers: int = 2, heads: int = 4, ff_dim: int = 128, dropout: float = 0.0):
        super().__init__()
        self.dim = dim
        self.conv = nn.Sequential(
            nn.Sequential(_conv_block(3, 32, 2), _conv_block(32, dim, 2)),
            nn.Sequential(_conv_block(dim, dim, 2), nn.Conv2d(dim, dim, 3, padding=1)),
        )
        self.layers = nn.ModuleList(EncoderLayer(dim, heads, ff_dim, dropout) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)
        self._pos_cache: dict[tuple, Tensor] = {}

    def position_table(self, grid_h: int, grid_w: int, like: Tensor) -> Tensor:
        key = (grid_h, grid_w, like.dtype, like.device)
        if key not in self._pos_cache:
            self._pos_cache[key] = sine_table_2d(grid_h, grid_w, self.dim).to(like)
        return self._pos_cache[key]

    def forward(self, image: Tensor) -> FeatureGrid:
        if image.dim() != 4 or image.shape[1] != 3:
            raise ValueError(f"expected images of shape (B, 3, H, W), got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ValueError(f"image size {h}x{w} is not divisible by the encoder stride {self.stride}")
        grid = FeatureGrid.from_map(self.conv(image))
        x = grid.tokens()
        pos = self.position_table(grid.grid_h, grid.grid_w, x)
        for layer in self.layers:
            x = layer(x, pos)
        return FeatureGrid.from_tokens(self.norm(x), grid.grid_h, grid.grid_w)


class LanguageEncoder(_Encoder):
    """Token embeddings plus fixed sinusoidal positions and masked self-attention."""

    def __init__(
        self,
        vocab_size: int,
        dim: int = 64,
        layers: int = 2,
        heads: int = 4,
        ff_dim: int = 128,
        max_len: int = 12,
        dropout: float = 0.0,
    ):
        super().__init__()
        self.vocab_size = vocab_size
        self.embed = nn.Embedding(vocab_size, dim, padding_idx=0)
        self.register_buffer("pos_table", sine_table_1d(max_len, dim), persistent=False)
        self.layers = nn.ModuleList(EncoderLayer(dim, heads, ff_dim, dropout) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)

    def forward(self, tokens: Tensor, mask: Tensor) -> TokenFeatures:
        if tokens.min() < 0 or tokens.max() >= self.vocab_size:
            raise ValueError(f"token ids must lie in [0, {self.vocab_size}); got range "
                             f"[{int(tokens.min())}, {int(tokens.max())}]")
        if tokens.shape[-1] > self.pos_table.shape[0]:
            raise ValueError(f"sequence length {tokens.shape[-1]} exceeds {self.pos_table.shape[0]}")
        if not mask.any(dim=-1).all():
            raise ValueError("every query needs at least one unmasked token")
        x = self.embed(tokens) + self.pos_table[: tokens.shape[-1]].to(self.embed.weight.dtype)
        pad = ~mask
        for layer in self.layers:
            x = layer(x, key_padding_mask=pad)
        return TokenFeatures.from_tokens(self.norm(x), mask)


def encode_image(image: Tensor, enc: VisualEncoder) -> FeatureGrid:
    return enc(image)


def encode_query(tokens: Tensor, mask: Tensor, enc: LanguageEncoder) -> TokenFeatures:
    return enc(tokens, mask)


def masked_mean(features: TokenFeatures) -> Tensor:
    """(B, C) average over unmasked tokens."""
    w = features.mask.to(features.values.dtype)
    return (features.values * w[:, None, :]).sum(-1) / w.sum(-1, keepdim=True)


__all__ = [
    "FeatureGrid",
    "TokenFeatures",
    "EncoderLayer",
    "VisualEncoder",
    "LanguageEncoder",
    "encode_image",
    "encode_query",
    "sine_table_1d",
    "sine_table_2d",
    "masked_mean",
]
