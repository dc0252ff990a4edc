"""Export discrimination coefficients and word weights as grayscale images."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .model import GroundingModel
from .scenes import GroundingDataset, VocabTable


def _gray(values: np.ndarray, scale: float) -> np.ndarray:
    scale = scale if scale > 0 else 1.0
    return np.clip(np.round(values / scale * 255.0), 0, 255).astype(np.uint8)


@torch.no_grad()
def export_heatmaps(
    model: GroundingModel,
    ds: GroundingDataset,
    indices: Sequence[int],
    out_dir: str | Path,
    vocab_table: VocabTable | None = None,
) -> list[Path]:
    """Write ``<seed>_image.png``, ``<seed>_coeff.png``, ``<seed>_phi.png`` and a JSON sidecar per sample."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab_table = vocab_table or VocabTable()
    model.eval()
    if model.bank is not None:
        model.bank.freeze()
    idx = np.asarray(indices)
    images = torch.from_numpy(ds.images[idx]).float() / 255.0
    res = model(images, torch.from_numpy(ds.tokens[idx]), torch.from_numpy(ds.masks[idx]))
    grid_h, grid_w = res.disentangled.grid_h, res.disentangled.grid_w
    canvas = ds.images.shape[-1]
    cell = canvas // grid_w
    sidecars = []
    for k, i in enumerate(idx):
        stem = f"{int(ds.seeds[i])}"
        coeffs = res.coefficients[k].reshape(grid_h, grid_w).numpy()
        phi = res.phi[k].numpy()
        mask = ds.masks[i]
        Image.fromarray(ds.images[i].transpose(1, 2, 0)).save(out / f"{stem}_image.png")
        heat = np.kron(_gray(coeffs, float(coeffs.max())), np.ones((cell, cell), dtype=np.uint8))
        Image.fromarray(heat, mode="L").save(out / f"{stem}_coeff.png")
        strip = np.kron(_gray(phi[mask], float(phi[mask].max()))[None, :], np.ones((16, 16), dtype=np.uint8))
        Image.fromarray(strip, mode="L").save(out / f"{stem}_phi.png")
        sidecar = {
            "sample_id": int(ds.seeds[i]),
            "query": ds.queries[i],
            "tokens": vocab_table.decode(ds.tokens[i][mask]),
            "phi": phi[mask].tolist(),
            "coefficients": coeffs.tolist(),
            "grid": [grid_h, grid_w],
            "pred_box": res.boxes[k].tolist(),
            "gt_box": ds.boxes[i].tolist(),
        }
        if hasattr(model, "field"):
            sidecar["alpha"] = float(model.field.alpha)
            sidecar["delta"] = float(model.field.delta)
        path = out / f"{stem}.json"
        path.write_text(json.dumps(sidecar, indent=2))
        sidecars.append(path)
    return sidecars
