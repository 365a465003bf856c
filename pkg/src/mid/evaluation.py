"""Robustness evaluation and reference model training.

Reports carry one row per attack (benign first) with the evaluation mode
and whether the attack was in the evaluated model's training pool, plus
averages with and without the benign row.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attacks import AttackSpec, AttackerPool, generate
from .data import Dataset, ImageBatch
from .meta_defense import MetaConfig, train_mid
from .models import ComposedClassifier, EncoderSpec, TeacherModel, build_encoder, build_head
from .seeding import derive_seed, make_generator


def accuracy(model: nn.Module, images: torch.Tensor, labels: torch.Tensor,
             batch_size: int = 256) -> float:
    """Top-1 accuracy in percent."""
    was_training = getattr(model, "training", False)
    if isinstance(model, nn.Module):
        model.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            x = images[start : start + batch_size]
            y = labels[start : start + batch_size]
            correct += int((model(x).argmax(dim=1) == y).sum())
    if isinstance(model, nn.Module):
        model.train(was_training)
    return 100.0 * correct / max(1, images.shape[0])


@dataclass
class EvaluationRow:
    attack: str
    targeted: bool
    mode: str  # "white" | "black"
    known: bool
    accuracy: float


@dataclass
class EvaluationReport:
    rows: list[EvaluationRow]
    metadata: dict = field(default_factory=dict)

    def row(self, attack: str) -> EvaluationRow:
        for r in self.rows:
            if r.attack == attack:
                return r
        raise KeyError(attack)

    def average(self, *, include_benign: bool) -> float:
        vals = [r.accuracy for r in self.rows
                if include_benign or r.attack != "identity"]
        if not vals:
            raise ValueError("empty report")
        return sum(vals) / len(vals)

    def to_csv(self, path: Path | str) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["attack", "targeted", "mode", "known", "accuracy"])
            for r in self.rows:
                writer.writerow([r.attack, str(r.targeted).lower(), r.mode,
                                 str(r.known).lower(), f"{r.accuracy:.4f}"])

    def to_json(self, path: Path | str) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "rows": [vars(r) for r in self.rows],
            "average_with_benign": self.average(include_benign=True),
            "average_without_benign": self.average(include_benign=False),
            "metadata": self.metadata,
        }
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def evaluate_robustness(
    model: nn.Module,
    dataset: Dataset,
    specs: Sequence[AttackSpec],
    *,
    mode: str = "white",
    substitute: nn.Module | None = None,
    training_pool: Sequence[str] = (),
    seed: int = 0,
    batch_size: int = 256,
    max_samples: int | None = None,
    metadata: dict | None = None,
) -> EvaluationReport:
    """Accuracy of the model under each attack on the test split.

    White-box attacks are generated against the evaluated model itself;
    black-box attacks against the substitute and transferred. The benign
    row is always included first. ``known`` marks attacks present in the
    model's recorded training pool (benign counts as known).
    """
    if mode not in ("white", "black"):
        raise ValueError(f"mode must be 'white' or 'black', got '{mode}'")
    if mode == "black" and substitute is None:
        raise ValueError("black-box evaluation needs a substitute model")
    ordered = [AttackSpec(method="identity")]
    ordered += [s for s in specs if s.method != "identity"]
    pool_names = set(training_pool)
    source = model if mode == "white" else substitute

    was_training = getattr(model, "training", False)
    if isinstance(model, nn.Module):
        model.eval()
    rows: list[EvaluationRow] = []
    for spec in ordered:
        name = spec.canonical_name
        rng = make_generator(seed, f"eval-{mode}-{name}")
        correct = total = 0
        with torch.no_grad():
            for batch in dataset.batches("test", batch_size, limit=max_samples):
                adv = generate(spec, source, batch, rng)
                pred = model(adv.images).argmax(dim=1)
                correct += int((pred == batch.labels).sum())
                total += len(batch)
        rows.append(EvaluationRow(
            attack=name,
            targeted=spec.targeted,
            mode=mode,
            known=(name == "identity") or (name in pool_names),
            accuracy=100.0 * correct / total,
        ))
    if isinstance(model, nn.Module):
        model.train(was_training)
    meta = dict(metadata or {})
    meta.update({"mode": mode, "seed": seed, "dataset": dataset.spec.name,
                 "training_pool": sorted(pool_names)})
    return EvaluationReport(rows, meta)


@dataclass
class ClassifierConfig:
    epochs: int = 5
    batch_size: int = 128
    lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer '{self.optimizer}'")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("bad training settings")


def _optimizer(model: nn.Module, name: str, lr: float) -> torch.optim.Optimizer:
    if name == "adam":
        return torch.optim.Adam(model.parameters(), lr=lr)
    return torch.optim.SGD(model.parameters(), lr=lr, momentum=0.9)


def train_classifier(dataset: Dataset, spec: EncoderSpec,
                     cfg: ClassifierConfig) -> tuple[ComposedClassifier, list[dict]]:
    """Plain cross-entropy training of encoder + head on clean data."""
    torch.manual_seed(derive_seed(cfg.seed, "classifier-init"))
    model = ComposedClassifier(build_encoder(spec), build_head(spec, dataset.spec.num_classes))
    opt = _optimizer(model, cfg.optimizer, cfg.lr)
    history: list[dict] = []
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        running = 0.0
        steps = 0
        for batch in dataset.batches("train", cfg.batch_size, shuffle=True,
                                     seed=derive_seed(cfg.seed, f"classifier-shuffle-{epoch}")):
            loss = F.cross_entropy(model(batch.images), batch.labels)
            opt.zero_grad()
            loss.backward()
            opt.step()
            running += float(loss.detach())
            steps += 1
        x, y = dataset.tensors("test")
        history.append({"epoch": epoch, "loss": running / steps,
                        "clean_accuracy": accuracy(model, x[:2048], y[:2048])})
    model.eval()
    return model, history


def train_substitute(dataset: Dataset, spec: EncoderSpec,
                     cfg: ClassifierConfig) -> tuple[ComposedClassifier, list[dict]]:
    """Independently initialized stand-in with the target's structure,
    trained on the same data; used as the black-box gradient source."""
    sub_cfg = ClassifierConfig(epochs=cfg.epochs, batch_size=cfg.batch_size,
                               lr=cfg.lr, optimizer=cfg.optimizer,
                               seed=derive_seed(cfg.seed, "substitute"))
    return train_classifier(dataset, spec, sub_cfg)


def train_adversarial_baseline(
    dataset: Dataset,
    spec: EncoderSpec,
    attack: AttackSpec,
    cfg: ClassifierConfig,
    *,
    epsilon_ramp_epochs: int = 0,
) -> tuple[ComposedClassifier, list[dict]]:
    """Plain adversarial training reference: each step trains on white-box
    adversarial versions of the batch. History records the per-epoch
    parameter sparsity index for trend comparisons.

    ``epsilon_ramp_epochs`` grows the training budget linearly from
    1/ramp of the attack's epsilon to the full value over that many
    epochs, which keeps small models from collapsing under a large
    budget applied from the first step. Evaluation is unaffected.
    """
    from .analysis import sparsity_index
    from .meta_defense import scale_attack

    torch.manual_seed(derive_seed(cfg.seed, "adv-baseline-init"))
    model = ComposedClassifier(build_encoder(spec), build_head(spec, dataset.spec.num_classes))
    opt = _optimizer(model, cfg.optimizer, cfg.lr)
    history: list[dict] = []
    for epoch in range(1, cfg.epochs + 1):
        if epsilon_ramp_epochs > 0:
            scale = min(1.0, epoch / epsilon_ramp_epochs)
        else:
            scale = 1.0
        epoch_attack = scale_attack(attack, scale)
        rng = make_generator(cfg.seed, f"adv-baseline-epoch-{epoch}")
        model.train()
        running = 0.0
        steps = 0
        for batch in dataset.batches("train", cfg.batch_size, shuffle=True,
                                     seed=derive_seed(cfg.seed, f"adv-baseline-shuffle-{epoch}")):
            adv = generate(epoch_attack, model, batch, rng,
                           num_classes=dataset.spec.num_classes)
            loss = F.cross_entropy(model(adv.images), batch.labels)
            opt.zero_grad()
            loss.backward()
            opt.step()
            running += float(loss.detach())
            steps += 1
        x, y = dataset.tensors("test")
        history.append({"epoch": epoch, "loss": running / steps,
                        "clean_accuracy": accuracy(model, x[:2048], y[:2048]),
                        "sparsity_index": sparsity_index(model),
                        "epsilon_scale": scale})
    model.eval()
    return model, history


def cross_validation_protocol(
    teacher: TeacherModel,
    dataset: Dataset,
    pool: AttackerPool,
    meta_cfg: MetaConfig,
    *,
    student_builder,
    eval_batch_size: int = 256,
    max_samples: int | None = None,
) -> list[dict]:
    """Leave-one-attack-out robustness: for each non-identity pool attack,
    distill a student on the remaining pool and evaluate under the held-out
    attack as an unknown white-box attack.

    ``student_builder(seed)`` must return a fresh student module.
    """
    if len(pool.non_identity) < 3:
        raise ValueError("leave-one-attack-out needs at least three non-identity attacks")
    rounds: list[dict] = []
    for held_out in pool.non_identity:
        name = held_out.canonical_name
        remaining = tuple(s for s in pool.non_identity if s.canonical_name != name)
        round_pool = AttackerPool(remaining + (pool.identity,))
        seed = derive_seed(meta_cfg.seed, f"cv-{name}")
        student = student_builder(seed)
        round_cfg = replace(meta_cfg, seed=seed)
        student, _ = train_mid(teacher, student, dataset, round_pool, round_cfg)
        defended = ComposedClassifier(student, teacher.head)
        report = evaluate_robustness(
            defended, dataset, (held_out,), mode="white",
            training_pool=round_pool.names, seed=seed,
            batch_size=eval_batch_size, max_samples=max_samples)
        rounds.append({
            "holdout": name,
            "accuracy": report.row(name).accuracy,
            "clean_accuracy": report.row("identity").accuracy,
            "pool": list(round_pool.names),
        })
    return rounds
