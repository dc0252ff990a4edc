"""Context disentangling for both branches.

Visual side: language-guided cross-attention produces per-cell semantics,
a Gaussian of the visual/semantic similarity gives one discrimination
coefficient per cell, and the visual grid is rescaled cell by cell.

Language side: a bidirectional GRU adapts the token features and a single
affine scorer yields a softmax weight per word.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .encoders import FeatureGrid, TokenFeatures


def _check_mask(mask: Tensor) -> None:
    if not mask.any(dim=-1).all():
        raise ValueError("query has no unmasked tokens")


def masked_softmax(scores: Tensor, mask: Tensor) -> Tensor:
    """Softmax over the last axis restricted to ``mask``; masked entries are exactly 0."""
    _check_mask(mask)
    scores = scores.masked_fill(~mask, float("-inf"))
    return torch.softmax(scores, dim=-1)


class CrossModalAttention(nn.Module):
    """Single-head attention with visual cells as queries and words as keys/values."""

    def __init__(self, dim: int):
        super().__init__()
        self.key_dim = dim
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)

    def forward(self, visual: FeatureGrid, language: TokenFeatures) -> FeatureGrid:
        if visual.channel_dim != language.channel_dim:
            raise ValueError(f"channel mismatch: visual {visual.channel_dim}, language {language.channel_dim}")
        q = self.w_q(visual.tokens())  # (B, HW, C)
        k = self.w_k(language.tokens())  # (B, L, C)
        v = self.w_v(language.tokens())
        logits = q @ k.transpose(1, 2) / math.sqrt(self.key_dim)
        attn = masked_softmax(logits, language.mask[:, None, :])
        return FeatureGrid.from_tokens(attn @ v, visual.grid_h, visual.grid_w)


def attend_semantics(visual: FeatureGrid, language: TokenFeatures, attn: CrossModalAttention) -> FeatureGrid:
    return attn(visual, language)


def gaussian_coefficients(similarity: Tensor, alpha: Tensor, delta: Tensor) -> Tensor:
    """alpha * exp(-(1 - s)^2 / (2 delta^2)), elementwise."""
    if torch.any(delta == 0):
        raise ValueError("delta must be non-zero")
    return alpha * torch.exp(-((1.0 - similarity) ** 2) / (2.0 * delta**2))


class DiscriminationField(nn.Module):
    """Learnable Gaussian over cosine similarity in a shared projected space.

    ``delta`` is stored as its logarithm so it stays positive under gradient
    descent.
    """

    def __init__(self, dim: int, alpha: float = 1.0, delta: float = 0.5):
        super().__init__()
        if delta <= 0:
            raise ValueError("delta must be positive")
        self.proj = nn.Linear(dim, dim, bias=False)
        self.alpha = nn.Parameter(torch.tensor(float(alpha)))
        self.log_delta = nn.Parameter(torch.tensor(math.log(delta)))

    @property
    def delta(self) -> Tensor:
        return self.log_delta.exp()

    def similarity(self, visual: FeatureGrid, semantics: FeatureGrid) -> Tensor:
        """Per-cell cosine similarity in [-1, 1], shape (B, HW)."""
        a = F.normalize(self.proj(visual.tokens()), dim=-1)
        b = F.normalize(self.proj(semantics.tokens()), dim=-1)
        return (a * b).sum(-1)

    def forward(self, visual: FeatureGrid, semantics: FeatureGrid) -> Tensor:
        return gaussian_coefficients(self.similarity(visual, semantics), self.alpha, self.delta)


def discrimination_coefficients(visual: FeatureGrid, semantics: FeatureGrid, field: DiscriminationField) -> Tensor:
    if visual.values.shape != semantics.values.shape:
        raise ValueError(
            f"visual grid {tuple(visual.values.shape)} and semantic grid {tuple(semantics.values.shape)} differ"
        )
    return field(visual, semantics)


def reweight_visual(visual: FeatureGrid, coeffs: Tensor) -> FeatureGrid:
    """Scale every cell's channel vector by that cell's coefficient."""
    b, _, hw = visual.values.shape
    if coeffs.shape != (b, hw):
        raise ValueError(f"expected coefficients of shape {(b, hw)}, got {tuple(coeffs.shape)}")
    return visual.replace(visual.values * coeffs[:, None, :])


class PhraseAttention(nn.Module):
    """Bi-GRU adapter (C/2 per direction) and a C -> 1 word scorer."""

    def __init__(self, dim: int):
        super().__init__()
        if dim % 2:
            raise ValueError(f"channel dim must be even for a bidirectional GRU, got {dim}")
        self.dim = dim
        self.gru = nn.GRU(dim, dim // 2, batch_first=True, bidirectional=True)
        self.scorer = nn.Linear(dim, 1)

    def adapt(self, language: TokenFeatures) -> TokenFeatures:
        mask = language.mask
        _check_mask(mask)
        lengths = mask.sum(-1)
        if not torch.equal(mask, torch.arange(mask.shape[-1], device=mask.device)[None, :] < lengths[:, None]):
            raise ValueError("token masks must be contiguous prefixes")
        x = language.tokens()
        packed = pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.gru(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=x.shape[1])
        return TokenFeatures.from_tokens(out, mask)

    def attend(self, adapted: TokenFeatures) -> tuple[TokenFeatures, Tensor]:
        scores = self.scorer(adapted.tokens()).squeeze(-1)
        phi = masked_softmax(scores, adapted.mask)
        return TokenFeatures(adapted.values * phi[:, None, :], adapted.mask), phi


def adapt_language(language: TokenFeatures, pa: PhraseAttention) -> TokenFeatures:
    return pa.adapt(language)


def phrase_attend(adapted: TokenFeatures, pa: PhraseAttention) -> tuple[TokenFeatures, Tensor]:
    return pa.attend(adapted)


def uniform_phrase_weights(mask: Tensor, dtype: torch.dtype = torch.float32) -> Tensor:
    _check_mask(mask)
    w = mask.to(dtype)
    return w / w.sum(-1, keepdim=True)
