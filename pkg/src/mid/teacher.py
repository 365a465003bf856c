"""Joint pretraining of the teacher: classifier plus autoencoder.

The teacher minimizes cross-entropy on logits plus a per-sample norm of
the reconstruction error, unweighted. Once trained it is frozen and serves
as the fixed reference (encoder, head, decoder) for distillation.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .data import Dataset
from .models import EncoderSpec, TeacherModel
from .seeding import derive_seed

RECONSTRUCTION_NORMS = ("l2", "l1")


@dataclass
class TeacherConfig:
    epochs: int = 5
    batch_size: int = 128
    lr: float = 1e-3
    optimizer: str = "adam"
    reconstruction_norm: str = "l2"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer '{self.optimizer}'")
        if self.reconstruction_norm not in RECONSTRUCTION_NORMS:
            raise ValueError(
                f"reconstruction_norm must be one of {RECONSTRUCTION_NORMS}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("bad training settings")


def teacher_loss(model: TeacherModel, images: torch.Tensor, labels: torch.Tensor,
                 norm: str = "l2") -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Classification plus reconstruction loss on one batch.

    Returns (total, classification, reconstruction); the reconstruction
    term is the chosen norm of the per-sample error vector, averaged over
    the batch, and the total is their unweighted sum.
    """
    if norm not in RECONSTRUCTION_NORMS:
        raise ValueError(f"reconstruction norm must be one of {RECONSTRUCTION_NORMS}")
    features = model.encode(images)
    cls = F.cross_entropy(model.classify(features), labels)
    error = (model.decode(features) - images).flatten(1)
    rec = error.norm(p=2 if norm == "l2" else 1, dim=1).mean()
    return cls + rec, cls, rec


def _make_optimizer(model: torch.nn.Module, name: str, lr: float) -> torch.optim.Optimizer:
    if name == "adam":
        return torch.optim.Adam(model.parameters(), lr=lr)
    return torch.optim.SGD(model.parameters(), lr=lr, momentum=0.9)


def train_teacher(dataset: Dataset, spec: EncoderSpec,
                  cfg: TeacherConfig) -> tuple[TeacherModel, list[dict]]:
    """Train a fresh teacher on the train split.

    The returned model is left unfrozen; callers freeze it before
    distillation. History carries per-epoch losses, clean accuracy and
    mean absolute reconstruction error on a test subset.
    """
    torch.manual_seed(derive_seed(cfg.seed, "teacher-init"))
    model = TeacherModel(spec, dataset.spec.num_classes)
    optimizer = _make_optimizer(model, cfg.optimizer, cfg.lr)
    history: list[dict] = []
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        running = {"total": 0.0, "cls": 0.0, "rec": 0.0}
        steps = 0
        for batch in dataset.batches("train", cfg.batch_size, shuffle=True,
                                     seed=derive_seed(cfg.seed, f"teacher-shuffle-{epoch}")):
            total, cls, rec = teacher_loss(model, batch.images, batch.labels,
                                           cfg.reconstruction_norm)
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            running["total"] += float(total.detach())
            running["cls"] += float(cls.detach())
            running["rec"] += float(rec.detach())
            steps += 1
        acc, mae = reconstruction_metrics(model, dataset)
        history.append({
            "epoch": epoch,
            "loss": running["total"] / steps,
            "classification_loss": running["cls"] / steps,
            "reconstruction_loss": running["rec"] / steps,
            "clean_accuracy": acc,
            "reconstruction_mae": mae,
        })
    model.eval()
    return model, history


def reconstruction_metrics(model: TeacherModel, dataset: Dataset,
                           limit: int = 2048) -> tuple[float, float]:
    """Clean accuracy (percent) and mean absolute per-pixel reconstruction
    error on a test subset."""
    was_training = model.training
    model.eval()
    correct = total = 0
    abs_err = 0.0
    pixels = 0
    with torch.no_grad():
        for batch in dataset.batches("test", 256, limit=limit):
            features = model.encode(batch.images)
            pred = model.classify(features).argmax(dim=1)
            correct += int((pred == batch.labels).sum())
            total += len(batch)
            err = (model.decode(features) - batch.images).abs()
            abs_err += float(err.sum())
            pixels += err.numel()
    model.train(was_training)
    return 100.0 * correct / total, abs_err / pixels
