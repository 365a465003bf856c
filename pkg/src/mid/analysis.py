"""Post-hoc analyses: frequency decomposition, parameter sparsity,
input-gradient maps, regeneration and feature export.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attacks import AttackSpec, generate
from .data import Dataset, ImageBatch
from .models import TeacherModel
from .seeding import make_generator


def frequency_split(images: torch.Tensor, cutoff: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Split images into low/high frequency components around a radius.

    Per channel: centered 2-D FFT, a circular mask keeps frequencies at
    distance <= cutoff from the zero-frequency bin (inclusive), the
    complement forms the high band, and both are inverted back taking real
    parts. The two components sum to the original exactly, so neither is
    clamped to the pixel range.
    """
    if images.dim() != 4:
        raise ValueError(f"images must be (B, C, H, W), got {tuple(images.shape)}")
    if cutoff < 0:
        raise ValueError("cutoff must be >= 0")
    h, w = images.shape[-2:]
    spectrum = torch.fft.fftshift(torch.fft.fft2(images, dim=(-2, -1)), dim=(-2, -1))
    yy = torch.arange(h, dtype=torch.float32) - h // 2
    xx = torch.arange(w, dtype=torch.float32) - w // 2
    dist = (yy[:, None] ** 2 + xx[None, :] ** 2).sqrt()
    mask = (dist <= cutoff).to(spectrum.device)
    low_spec = torch.fft.ifftshift(spectrum * mask, dim=(-2, -1))
    high_spec = torch.fft.ifftshift(spectrum * (~mask), dim=(-2, -1))
    low = torch.fft.ifft2(low_spec, dim=(-2, -1)).real
    high = torch.fft.ifft2(high_spec, dim=(-2, -1)).real
    return low.to(images.dtype), high.to(images.dtype)


@dataclass
class FrequencyCurve:
    """Accuracy per (cutoff, band, attack) row."""

    rows: list[dict]

    def to_csv(self, path: Path | str) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["R", "band", "attack", "accuracy"])
            for row in self.rows:
                writer.writerow([row["R"], row["band"], row["attack"],
                                 f"{row['accuracy']:.4f}"])

    def accuracies(self, band: str, attack: str) -> list[tuple[float, float]]:
        return [(row["R"], row["accuracy"]) for row in self.rows
                if row["band"] == band and row["attack"] == attack]


def _band_accuracy(model: nn.Module, images: torch.Tensor, labels: torch.Tensor,
                   batch_size: int = 256) -> float:
    correct = 0
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            x = images[start : start + batch_size]
            y = labels[start : start + batch_size]
            correct += int((model(x).argmax(dim=1) == y).sum())
    return 100.0 * correct / images.shape[0]


def frequency_robustness_curve(
    model: nn.Module,
    dataset: Dataset,
    cutoffs: Sequence[float],
    specs: Sequence[AttackSpec] = (),
    *,
    seed: int = 0,
    max_samples: int = 1024,
    batch_size: int = 256,
) -> FrequencyCurve:
    """Accuracy of the model on band-filtered test data per cutoff.

    Adversarial inputs are crafted on the unfiltered images, then both
    bands of each version (benign always included) are scored.
    """
    was_training = getattr(model, "training", False)
    if isinstance(model, nn.Module):
        model.eval()
    versions: dict[str, tuple[torch.Tensor, torch.Tensor]] = {}
    all_specs = [AttackSpec(method="identity")]
    all_specs += [s for s in specs if s.method != "identity"]
    for spec in all_specs:
        rng = make_generator(seed, f"frequency-{spec.canonical_name}")
        xs, ys = [], []
        for batch in dataset.batches("test", batch_size, limit=max_samples):
            adv = generate(spec, model, batch, rng)
            xs.append(adv.images)
            ys.append(adv.labels)
        versions[spec.canonical_name] = (torch.cat(xs), torch.cat(ys))

    rows: list[dict] = []
    for cutoff in cutoffs:
        for name, (x, y) in versions.items():
            low, high = frequency_split(x, cutoff)
            rows.append({"R": cutoff, "band": "low", "attack": name,
                         "accuracy": _band_accuracy(model, low, y, batch_size)})
            rows.append({"R": cutoff, "band": "high", "attack": name,
                         "accuracy": _band_accuracy(model, high, y, batch_size)})
    if isinstance(model, nn.Module):
        model.train(was_training)
    return FrequencyCurve(rows)


def sparsity_index(model: nn.Module | Mapping[str, torch.Tensor]) -> float:
    """Sum of squared parameter entries; lower values mean the solution
    concentrates mass in fewer directions."""
    if isinstance(model, nn.Module):
        tensors: Iterable[torch.Tensor] = (p.detach() for p in model.parameters())
    else:
        tensors = (t.detach() for t in model.values())
    return float(sum(t.pow(2).sum() for t in tensors))


def input_gradient_map(model: nn.Module, batch: ImageBatch) -> torch.Tensor:
    """Per-sample gradient of the true-class cross-entropy w.r.t. pixels."""
    with torch.enable_grad():
        probe = batch.images.clone().detach().requires_grad_(True)
        loss = F.cross_entropy(model(probe), batch.labels, reduction="sum")
        (grad,) = torch.autograd.grad(loss, probe)
    return grad.detach()


def normalize_maps(maps: torch.Tensor) -> tuple[torch.Tensor, list[dict]]:
    """Min-max normalize each map to [0, 1]; returns the applied ranges so
    raw magnitudes can be recovered."""
    flat = maps.flatten(1)
    lo = flat.min(dim=1).values
    hi = flat.max(dim=1).values
    span = (hi - lo).clamp_min(1e-12)
    shape = (-1,) + (1,) * (maps.dim() - 1)
    normed = (maps - lo.view(shape)) / span.view(shape)
    meta = [{"min": float(a), "max": float(b)} for a, b in zip(lo, hi)]
    return normed, meta


def save_gradient_maps(path: Path | str, maps: torch.Tensor,
                       metadata: dict | None = None) -> None:
    """Write normalized maps plus their normalization records as npz."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    normed, ranges = normalize_maps(maps)
    meta = dict(metadata or {})
    meta["normalization"] = ranges
    with open(path, "wb") as fh:
        np.savez(
            fh,
            maps=normed.cpu().numpy(),
            raw_min=np.array([r["min"] for r in ranges], dtype=np.float64),
            raw_max=np.array([r["max"] for r in ranges], dtype=np.float64),
            __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
        )


def regenerate(teacher: TeacherModel, student: nn.Module,
               images: torch.Tensor) -> torch.Tensor:
    """Decode student features with the teacher's decoder: the input as the
    defended model effectively sees it."""
    with torch.no_grad():
        return teacher.decode(student(images))


def export_features(encoder: nn.Module,
                    named_batches: Sequence[tuple[str, ImageBatch]],
                    path: Path | str, *, batch_size: int = 256) -> None:
    """Write feature vectors to CSV: sample index, source name, label, then
    one column per feature dimension."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header_written = False
        for name, batch in named_batches:
            with torch.no_grad():
                for start in range(0, len(batch), batch_size):
                    x = batch.images[start : start + batch_size]
                    y = batch.labels[start : start + batch_size]
                    feats = encoder(x)
                    if not header_written:
                        writer.writerow(["sample", "source", "label"] +
                                        [f"f{i}" for i in range(feats.shape[1])])
                        header_written = True
                    for i in range(feats.shape[0]):
                        row = [start + i, name, int(y[i])]
                        row += [f"{float(v):.6g}" for v in feats[i]]
                        writer.writerow(row)
