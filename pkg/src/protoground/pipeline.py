"""Training, evaluation, sweeps and artifact emission."""
from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .checkpoint import load_into, load_tensors, save_tensors
from .config import RunConfig
from .model import GroundingModel
from .objectives import LossConfig, accuracy_at_0p5, box_iou, total_loss
from .prototypes import ema_update, load_bank, save_bank
from .scenes import GroundingDataset, VocabTable, build_dataset

log = logging.getLogger(__name__)

CHECKPOINT_FILE = "checkpoint.bin"
BANK_FILE = "bank.bin"
CONFIG_FILE = "config.yaml"
REPORT_FILE = "report.json"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Datasets:
    train: GroundingDataset
    val: GroundingDataset
    tests: dict[str, GroundingDataset] = field(default_factory=dict)

    @classmethod
    def build(cls, cfg: RunConfig) -> Datasets:
        return cls(
            train=build_dataset("train", cfg.n_train, cfg.data_seed),
            val=build_dataset("val-standard", cfg.n_val, cfg.data_seed),
            tests={
                "test-standard": build_dataset("test-standard", cfg.n_test, cfg.data_seed),
                "test-openvocab": build_dataset("test-openvocab", cfg.n_openvocab, cfg.data_seed),
            },
        )

    def split(self, name: str) -> GroundingDataset:
        if name == "train":
            return self.train
        if name == "val-standard":
            return self.val
        if name in self.tests:
            return self.tests[name]
        raise KeyError(f"no dataset for split {name!r}")


@dataclass
class EvalResult:
    split: str
    n: int
    accuracy: float
    mean_iou: float
    predictions: np.ndarray  # (N, 4) float32
    ious: np.ndarray

    def metrics(self) -> dict:
        return {"split": self.split, "n": self.n, "accuracy": self.accuracy, "mean_iou": self.mean_iou}


@dataclass
class RunReport:
    config: dict
    train_loss: list[float] = field(default_factory=list)  # per-epoch mean
    step_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    lr_main: list[float] = field(default_factory=list)
    best_epoch: int = -1
    final: dict[str, dict] = field(default_factory=dict)
    wall_clock: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> RunReport:
        return cls(**json.loads(text))


def set_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def _batch(ds: GroundingDataset, idx: np.ndarray | slice, dtype=torch.float32):
    images = torch.from_numpy(ds.images[idx]).to(dtype) / 255.0
    return (
        images,
        torch.from_numpy(ds.tokens[idx]),
        torch.from_numpy(ds.masks[idx]),
        torch.from_numpy(ds.boxes[idx]).to(dtype),
    )


@torch.no_grad()
def predict(model: GroundingModel, ds: GroundingDataset, batch_size: int = 64) -> torch.Tensor:
    """Boxes for every sample, with the model in eval mode and the bank frozen."""
    was_training = model.training
    model.eval()
    if model.bank is not None:
        prev_mode = model.bank.mode
        model.bank.freeze()
    dtype = next(model.parameters()).dtype
    out = []
    for start in range(0, len(ds), batch_size):
        images, tokens, masks, _ = _batch(ds, slice(start, start + batch_size), dtype)
        out.append(model(images, tokens, masks).boxes)
    if model.bank is not None:
        model.bank.mode = prev_mode
    model.train(was_training)
    return torch.cat(out)


def score(ds: GroundingDataset, preds: torch.Tensor) -> EvalResult:
    gts = torch.from_numpy(ds.boxes).to(preds.dtype)
    ious = box_iou(preds, gts)
    return EvalResult(
        split=ds.split,
        n=len(ds),
        accuracy=accuracy_at_0p5(preds, gts),
        mean_iou=float(ious.mean()),
        predictions=preds.float().numpy(),
        ious=ious.double().numpy(),
    )


def evaluate(model: GroundingModel, ds: GroundingDataset, out_dir: str | Path | None = None) -> EvalResult:
    """Score a split with a frozen bank; optionally write the prediction dump and metric report."""
    if len(ds) == 0:
        raise ValueError(f"split {ds.split!r} is empty")
    if model.bank is not None:
        model.bank.freeze()
    result = score(ds, predict(model, ds))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_predictions(out / f"predictions_{ds.split}.jsonl", ds, result)
        (out / f"metrics_{ds.split}.json").write_text(json.dumps(result.metrics(), indent=2))
    return result


def write_predictions(path: Path, ds: GroundingDataset, result: EvalResult) -> None:
    with open(path, "w") as f:
        for seed, box, iou in zip(ds.seeds, result.predictions, result.ious):
            x, y, w, h = (float(v) for v in box)
            f.write(json.dumps({"sample_id": int(seed), "x": x, "y": y, "w": w, "h": h, "iou": float(iou)}) + "\n")


def read_predictions(path: str | Path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def random_box_baseline(ds: GroundingDataset, trials: int = 20, seed: int = 0) -> float:
    """Accuracy of guessing another sample's ground-truth box.

    Each trial pairs every sample with a different sample's box (a random
    derangement), so guesses follow the corpus's box distribution.
    """
    rng = np.random.default_rng(seed)
    gts = torch.from_numpy(ds.boxes).double()
    n = len(ds)
    if n < 2:
        raise ValueError("baseline needs at least two samples")
    rates = []
    for _ in range(trials):
        perm = rng.permutation(n)
        guess = torch.empty_like(gts)
        guess[perm] = gts[np.roll(perm, 1)]
        rates.append(accuracy_at_0p5(guess, gts))
    return float(np.mean(rates))


def _param_groups(model: GroundingModel, cfg: RunConfig) -> list[dict]:
    return [
        {"params": model.encoder_parameters(), "lr": cfg.lr_encoder, "name": "encoder"},
        {"params": model.other_parameters(), "lr": cfg.lr_main, "name": "main"},
    ]


@dataclass
class TrainedModel:
    model: GroundingModel
    config: RunConfig

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.config.save(out / CONFIG_FILE)
        save_tensors(self.model.state_for_checkpoint(), out / CHECKPOINT_FILE)
        if self.model.bank is not None:
            save_bank(self.model.bank, out / BANK_FILE)

    @classmethod
    def load(cls, out_dir: str | Path) -> TrainedModel:
        out = Path(out_dir)
        cfg = RunConfig.load(out / CONFIG_FILE)
        model = GroundingModel(cfg)
        load_into(model, load_tensors(out / CHECKPOINT_FILE), skip_prefix="bank.")
        if model.bank is not None:
            bank = load_bank(out / BANK_FILE, expected_k=cfg.bank_size, expected_dim=cfg.dim)
            model.bank = bank.freeze()
        return cls(model.eval(), cfg)


def train(
    cfg: RunConfig,
    datasets: Datasets | None = None,
    out_dir: str | Path | None = None,
    on_epoch: Callable[[int, RunReport, GroundingModel], None] | None = None,
) -> tuple[TrainedModel, RunReport]:
    """Train with the staged schedule and keep the best-validation weights.

    Per step: forward, loss, backward, clipped AdamW step, then the
    prototype EMA update on the batch's disentangled visual features.
    """
    t0 = time.time()
    set_determinism(cfg.seed)
    datasets = datasets or Datasets.build(cfg)
    model = GroundingModel(cfg, len(VocabTable()))
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.AdamW(_param_groups(model, cfg), weight_decay=cfg.weight_decay)
    for g in opt.param_groups:
        g["initial_lr"] = g["lr"]
    loss_cfg = LossConfig(cfg.lambda_l1, cfg.lambda_giou)
    report = RunReport(config=cfg.to_dict())
    best_acc, best_state = -1.0, None
    n = len(datasets.train)

    for epoch in range(cfg.epochs):
        frozen = epoch < cfg.freeze_epochs
        model.visual.requires_grad_(not frozen)
        scale = 1.0 / cfg.decay_factor if epoch >= cfg.decay_epoch else 1.0
        for g in opt.param_groups:
            g["lr"] = g["initial_lr"] * scale
        model.train()
        if model.bank is not None:
            model.bank.unfreeze()

        perm = torch.randperm(n, generator=gen).numpy()
        epoch_losses = []
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            images, tokens, masks, gts = _batch(datasets.train, np.sort(perm[start : start + cfg.batch_size]))
            out = model(images, tokens, masks, generator=gen)
            loss = total_loss(out.boxes, gts, loss_cfg).mean()
            if not torch.isfinite(loss):
                lrs = {g["name"]: g["lr"] for g in opt.param_groups}
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {bi}; learning rates {lrs}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            if model.bank is not None:
                ema_update(model.bank, out.disentangled, out.assignment)
            epoch_losses.append(loss.item())

        val = score(datasets.val, predict(model, datasets.val))
        report.step_loss.extend(epoch_losses)
        report.train_loss.append(float(np.mean(epoch_losses)))
        report.val_accuracy.append(val.accuracy)
        report.lr_main.append(opt.param_groups[1]["lr"])
        log.info(
            "epoch %d loss %.4f val acc %.4f (mean IoU %.3f)%s",
            epoch, report.train_loss[-1], val.accuracy, val.mean_iou, " [visual frozen]" if frozen else "",
        )
        if val.accuracy > best_acc:
            best_acc, best_state = val.accuracy, copy.deepcopy(model.state_dict())
            report.best_epoch = epoch
        if on_epoch is not None:
            on_epoch(epoch, report, model)

    model.load_state_dict(best_state)
    model.visual.requires_grad_(True)
    if model.bank is not None:
        model.bank.freeze()
    model.eval()
    trained = TrainedModel(model, cfg)

    report.final["val-standard"] = {**score(datasets.val, predict(model, datasets.val)).metrics()}
    for name, ds in datasets.tests.items():
        report.final[name] = evaluate(model, ds, out_dir).metrics()
    report.wall_clock = time.time() - t0
    if out_dir is not None:
        trained.save(out_dir)
        Path(out_dir, REPORT_FILE).write_text(report.to_json())
    return trained, report


def smoothed(values: Sequence[float], window: int) -> list[float]:
    """Non-overlapping window means."""
    v = np.asarray(values, dtype=np.float64)
    k = len(v) // window
    return v[: k * window].reshape(k, window).mean(axis=1).tolist()


SWEEP_AXES = {"bank_size": "bank_size", "layers": "reg_layers"}


def sweep(
    cfg: RunConfig,
    axis: str,
    values: Sequence[int],
    out_dir: str | Path | None = None,
    datasets: Datasets | None = None,
) -> list[tuple[int, RunReport]]:
    """One full train + evaluation per value; writes a table and an accuracy plot."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_AXES)}")
    datasets = datasets or Datasets.build(cfg)
    rows = []
    for v in values:
        run_dir = None if out_dir is None else Path(out_dir) / f"{axis}_{v}"
        _, report = train(cfg.replace(**{SWEEP_AXES[axis]: v}), datasets, run_dir)
        rows.append((v, report))
    if out_dir is not None:
        write_sweep_outputs(axis, rows, Path(out_dir))
    return rows


def write_sweep_outputs(axis: str, rows: Sequence[tuple[int, RunReport]], out_dir: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir.mkdir(parents=True, exist_ok=True)
    splits = list(rows[0][1].final)
    table = [{axis: v, **{s: r.final[s]["accuracy"] for s in splits}} for v, r in rows]
    (out_dir / f"sweep_{axis}.json").write_text(json.dumps(table, indent=2))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    xs = [v for v, _ in rows]
    for s in splits:
        ax.plot(xs, [r.final[s]["accuracy"] for _, r in rows], marker="o", label=s)
    if axis == "bank_size":
        ax.set_xscale("log", base=2)
    ax.set_xlabel(axis)
    ax.set_ylabel("accuracy (IoU > 0.5)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / f"sweep_{axis}.png", dpi=120)
    plt.close(fig)
