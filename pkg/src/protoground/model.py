"""The full grounding network and its ablation routing."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .config import AblationFlags, RunConfig
from .disentangle import (
    CrossModalAttention,
    DiscriminationField,
    PhraseAttention,
    reweight_visual,
    uniform_phrase_weights,
)
from .encoders import FeatureGrid, LanguageEncoder, TokenFeatures, VisualEncoder
from .head import RegressionHead, hadamard_fuse
from .prototypes import AssignmentResult, PrototypeBank, assign, straight_through
from .scenes import MAX_QUERY_LEN, VocabTable


@dataclass
class GroundingOutput:
    boxes: Tensor  # (B, 4) normalized xywh
    coefficients: Tensor  # (B, HW)
    phi: Tensor  # (B, L)
    disentangled: FeatureGrid  # reweighted visual grid, pre-quantization
    assignment: AssignmentResult | None


class GroundingModel(nn.Module):
    def __init__(self, cfg: RunConfig, vocab_size: int | None = None):
        super().__init__()
        self.flags: AblationFlags = cfg.ablation
        vocab_size = vocab_size or len(VocabTable())
        d = cfg.dim
        self.visual = VisualEncoder(d, cfg.visual_layers, cfg.heads, cfg.ff_dim, cfg.encoder_dropout)
        self.language = LanguageEncoder(
            vocab_size, d, cfg.language_layers, cfg.heads, cfg.ff_dim, MAX_QUERY_LEN, cfg.encoder_dropout
        )
        if self.flags.use_vd:
            self.cross_attn = CrossModalAttention(d)
            self.field = DiscriminationField(d)
        if self.flags.use_ld:
            self.phrase = PhraseAttention(d)
        self.bank = PrototypeBank(cfg.bank_size, d, cfg.momentum) if self.flags.use_pt else None
        self.head = RegressionHead(
            d, cfg.reg_layers, cfg.heads, cfg.ff_dim, MAX_QUERY_LEN, joint_language=not self.flags.use_hadamard
        )
        self._init_weights()

    def _init_weights(self) -> None:
        for name, p in self.named_parameters():
            if p.dim() > 1 and "embed" not in name:
                nn.init.xavier_uniform_(p)

    def encoder_parameters(self) -> list[nn.Parameter]:
        return [*self.visual.parameters(), *self.language.parameters()]

    def other_parameters(self) -> list[nn.Parameter]:
        enc = {id(p) for p in self.encoder_parameters()}
        return [p for p in self.parameters() if id(p) not in enc]

    def forward(self, images: Tensor, tokens: Tensor, mask: Tensor, generator: torch.Generator | None = None) -> GroundingOutput:
        visual = self.visual(images)
        language = self.language(tokens, mask)
        b, _, hw = visual.values.shape

        if self.flags.use_vd:
            semantics = self.cross_attn(visual, language)
            coeffs = self.field(visual, semantics)
            disentangled = reweight_visual(visual, coeffs)
        else:
            coeffs = visual.values.new_ones(b, hw)
            disentangled = visual

        if self.flags.use_ld:
            adapted = self.phrase.adapt(language)
            weighted, phi = self.phrase.attend(adapted)
        else:
            adapted = language
            phi = uniform_phrase_weights(mask, language.values.dtype)
            weighted = TokenFeatures(language.values * phi[:, None, :], mask)

        assignment = None
        quantized = disentangled
        if self.bank is not None:
            if not bool(self.bank.initialized):
                if not self.training:
                    raise RuntimeError("prototype bank was never initialized; train first")
                self.bank.init_from_features(disentangled, generator)
            assignment = assign(disentangled, self.bank)
            quantized = straight_through(disentangled, assignment)

        if self.flags.use_hadamard:
            boxes = self.head(hadamard_fuse(quantized, adapted, phi))
        else:
            boxes = self.head(quantized, weighted)
        return GroundingOutput(boxes, coeffs, phi, disentangled, assignment)

    def state_for_checkpoint(self) -> dict[str, Tensor]:
        """Trainable state without the prototype bank (which has its own file)."""
        return {k: v for k, v in self.state_dict().items() if not k.startswith("bank.")}
