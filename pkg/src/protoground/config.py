"""Run configuration. Defaults give the desk-scale reference run."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


@dataclass
class AblationFlags:
    use_hadamard: bool = True
    use_ld: bool = True
    use_vd: bool = True
    use_pt: bool = True

    @classmethod
    def none(cls) -> AblationFlags:
        return cls(False, False, False, False)


@dataclass
class RunConfig:
    seed: int = 0
    data_seed: int = 0
    # dataset
    n_train: int = 4096
    n_val: int = 512
    n_test: int = 512
    n_openvocab: int = 512
    # model
    dim: int = 64
    heads: int = 4
    ff_dim: int = 128
    visual_layers: int = 2
    language_layers: int = 2
    encoder_dropout: float = 0.0
    reg_layers: int = 2
    # prototype bank
    bank_size: int = 64
    momentum: float = 0.9
    # loss
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    # optimizer
    # both branches train from scratch, so the encoders share the main rate
    lr_main: float = 3e-4
    lr_encoder: float = 3e-4
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    batch_size: int = 32
    # schedule (epochs)
    epochs: int = 20
    freeze_epochs: int = 2
    decay_epoch: int = 12
    decay_factor: float = 10.0
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self):
        if isinstance(self.ablation, dict):
            self.ablation = AblationFlags(**self.ablation)
        if self.dim % 2:
            raise ValueError("dim must be even (bidirectional GRU halves it)")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if self.freeze_epochs > self.epochs or self.decay_epoch > self.epochs:
            raise ValueError("freeze/decay epochs must not exceed total epochs")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> RunConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> RunConfig:
        ablation = changes.pop("ablation", None)
        flag_changes = {k: changes.pop(k) for k in list(changes) if k in AblationFlags.__dataclass_fields__}
        cfg = dataclasses.replace(self, **changes)
        flags = ablation if ablation is not None else self.ablation
        cfg.ablation = dataclasses.replace(
            AblationFlags(**dataclasses.asdict(flags)) if isinstance(flags, AblationFlags) else AblationFlags(**flags),
            **flag_changes,
        )
        return cfg

    def save(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})


def scaled_schedule(epochs: int) -> dict[str, int]:
    """Freeze for the first 10% of epochs and decay at 60%, as in a 100-epoch run."""
    return {"epochs": epochs, "freeze_epochs": max(0, round(0.1 * epochs)), "decay_epoch": round(0.6 * epochs)}
