"""Prototype bank: nearest-prototype quantization with a straight-through
gradient and momentum-averaged prototype updates."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .encoders import FeatureGrid

TRAINING, FROZEN = "training", "frozen"

BANK_MAGIC = b"PGBANK\x00\x00"
BANK_VERSION = 1
# magic, version, k, C, momentum, mode, initialized
_HEADER = struct.Struct("<8sIIIdBB2x")


class BankFileError(ValueError):
    pass


@dataclass
class AssignmentResult:
    indices: Tensor  # (B, HW) int64
    quantized: FeatureGrid  # prototype values, no gradient
    distances: Tensor  # (B, HW) Euclidean distance to the chosen prototype


class PrototypeBank(nn.Module):
    """``k`` prototype vectors with EMA count/sum accumulators.

    Prototypes are buffers, never optimizer parameters: they move only
    through :func:`ema_update`.
    """

    def __init__(self, k: int, dim: int, momentum: float = 0.9):
        super().__init__()
        if k < 1:
            raise ValueError("prototype bank needs k >= 1")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        self.k = k
        self.dim = dim
        self.momentum = momentum
        self.mode = TRAINING
        self.register_buffer("prototypes", torch.zeros(k, dim))
        self.register_buffer("ema_counts", torch.zeros(k))
        self.register_buffer("ema_sums", torch.zeros(k, dim))
        self.register_buffer("initialized", torch.tensor(False))

    @property
    def frozen(self) -> bool:
        return self.mode == FROZEN

    def freeze(self) -> PrototypeBank:
        self.mode = FROZEN
        return self

    def unfreeze(self) -> PrototypeBank:
        self.mode = TRAINING
        return self

    @torch.no_grad()
    def init_from_features(self, features: FeatureGrid, generator: torch.Generator | None = None) -> None:
        """Seed prototypes with randomly chosen cells (without replacement)."""
        flat = features.tokens().reshape(-1, self.dim)
        if flat.shape[0] >= self.k:
            pick = torch.randperm(flat.shape[0], generator=generator)[: self.k]
        else:
            pick = torch.randint(flat.shape[0], (self.k,), generator=generator)
        self.prototypes.copy_(flat[pick].to(self.prototypes))
        self.initialized.fill_(True)

    def forward(self, features: FeatureGrid) -> AssignmentResult:
        return assign(features, self)


def assign(features: FeatureGrid, bank: PrototypeBank) -> AssignmentResult:
    """Nearest prototype per cell; ties go to the lowest index."""
    if bank.k == 0 or bank.prototypes.numel() == 0:
        raise ValueError("prototype bank is empty")
    if features.channel_dim != bank.dim:
        raise ValueError(f"feature dim {features.channel_dim} does not match bank dim {bank.dim}")
    b, c, hw = features.values.shape
    flat = features.tokens().detach().reshape(-1, c)
    protos = bank.prototypes.to(flat.dtype)
    # exact pairwise differences rather than the |x|^2 - 2xp + |p|^2 expansion,
    # so identical vectors give distance 0 and ties stay ties
    dist = torch.cdist(flat, protos, compute_mode="donot_use_mm_for_euclid_dist")
    best, idx = dist.min(dim=1)
    quantized = protos[idx].reshape(b, hw, c)
    return AssignmentResult(
        indices=idx.reshape(b, hw),
        quantized=FeatureGrid.from_tokens(quantized, features.grid_h, features.grid_w),
        distances=best.reshape(b, hw),
    )


def straight_through(features: FeatureGrid, assignment: AssignmentResult) -> FeatureGrid:
    """Prototype values forward, identity gradient backward."""
    q = assignment.quantized.values
    return features.replace(features.values + (q - features.values).detach())


@torch.no_grad()
def ema_update(bank: PrototypeBank, features: FeatureGrid, assignment: AssignmentResult) -> PrototypeBank:
    """Momentum-average each prototype toward the mean of its assigned cells.

    Only prototypes that received at least one cell in this batch are
    touched; the rest keep their vectors and accumulators as they are.
    """
    if bank.frozen:
        raise RuntimeError("ema_update called on a frozen prototype bank")
    m = bank.momentum
    flat = features.tokens().detach().reshape(-1, bank.dim).to(bank.ema_sums.dtype)
    idx = assignment.indices.reshape(-1)
    counts = torch.bincount(idx, minlength=bank.k).to(bank.ema_counts.dtype)
    sums = torch.zeros_like(bank.ema_sums).index_add_(0, idx, flat)
    active = counts > 0
    bank.ema_counts[active] = m * bank.ema_counts[active] + (1 - m) * counts[active]
    bank.ema_sums[active] = m * bank.ema_sums[active] + (1 - m) * sums[active]
    bank.prototypes[active] = bank.ema_sums[active] / bank.ema_counts[active, None]
    return bank


def freeze(bank: PrototypeBank) -> PrototypeBank:
    return bank.freeze()


def save_bank(bank: PrototypeBank, path: str | Path) -> None:
    header = _HEADER.pack(
        BANK_MAGIC,
        BANK_VERSION,
        bank.k,
        bank.dim,
        float(bank.momentum),
        1 if bank.frozen else 0,
        1 if bool(bank.initialized) else 0,
    )
    payload = b"".join(
        t.detach().cpu().numpy().astype("<f4", copy=False).tobytes()
        for t in (bank.prototypes, bank.ema_counts, bank.ema_sums)
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def load_bank(path: str | Path, expected_k: int | None = None, expected_dim: int | None = None) -> PrototypeBank:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise BankFileError(f"{path}: truncated header ({len(data)} bytes, need {_HEADER.size} at offset 0)")
    magic, version, k, dim, momentum, mode, initialized = _HEADER.unpack_from(data, 0)
    if magic != BANK_MAGIC:
        raise BankFileError(f"{path}: bad magic {magic!r} at offset 0")
    if version != BANK_VERSION:
        raise BankFileError(f"{path}: unsupported version {version} at offset 8")
    if expected_k is not None and k != expected_k:
        raise BankFileError(f"{path}: expected k={expected_k}, file has k={k} (offset 12)")
    if expected_dim is not None and dim != expected_dim:
        raise BankFileError(f"{path}: expected C={expected_dim}, file has C={dim} (offset 16)")
    if mode not in (0, 1):
        raise BankFileError(f"{path}: invalid mode byte {mode} at offset 28")
    n_floats = k * dim + k + k * dim
    expected_len = _HEADER.size + 4 * n_floats
    if len(data) != expected_len:
        raise BankFileError(
            f"{path}: payload starting at offset {_HEADER.size} should end at {expected_len}, file ends at {len(data)}"
        )
    arr = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).astype(np.float32)
    protos = arr[: k * dim].reshape(k, dim)
    counts = arr[k * dim : k * dim + k]
    sums = arr[k * dim + k :].reshape(k, dim)
    bank = PrototypeBank(k, dim, momentum)
    bank.prototypes.copy_(torch.from_numpy(protos.copy()))
    bank.ema_counts.copy_(torch.from_numpy(counts.copy()))
    bank.ema_sums.copy_(torch.from_numpy(sums.copy()))
    bank.initialized.fill_(bool(initialized))
    bank.mode = FROZEN if mode else TRAINING
    return bank
