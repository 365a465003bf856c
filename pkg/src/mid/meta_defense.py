"""Multi-consistency distillation with a bi-level meta update.

A frozen teacher (encoder + classifier head + decoder) anchors three
consistency terms on attacked inputs: feature-distribution agreement
(adversarial), agreement after decoding and re-encoding (cyclic), and
label agreement through the teacher's head (label). Each training step
splits the attacker pool into train attacks plus benign and one held-out
attack, takes a virtual gradient step on the train loss, and adds the
held-out loss evaluated at the stepped parameters to the objective, so the
update also improves generalization to the attack that was not trained on.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from .attacks import AdversarialBatch, AttackSpec, AttackerPool, generate, sample_meta_split
from .data import Dataset, ImageBatch
from .models import TeacherModel
from .seeding import derive_seed

ParamDict = dict[str, torch.Tensor]
LossClosure = Callable[[ParamDict], torch.Tensor]

OUTER_OPTIMIZERS = ("sgd", "rmsprop", "adagrad")
STUDENT_INITS = ("teacher", "random")


def build_outer_optimizer(params, cfg: "MetaConfig") -> torch.optim.Optimizer | None:
    """Momentum-free optimizer for the outer update; plain descent uses none."""
    if cfg.outer_optimizer == "sgd":
        return None
    if cfg.outer_optimizer == "rmsprop":
        return torch.optim.RMSprop(params, lr=cfg.gamma, momentum=0.0)
    return torch.optim.Adagrad(params, lr=cfg.gamma)


def epsilon_schedule(cfg: "MetaConfig", epoch: int) -> float:
    """Scale factor for the pool's perturbation budgets in a given epoch.

    Ramps linearly from 1/ramp to 1 over the first ``epsilon_ramp_epochs``
    epochs, then stays at 1. Epochs are 1-based.
    """
    if cfg.epsilon_ramp_epochs <= 0:
        return 1.0
    return min(1.0, epoch / cfg.epsilon_ramp_epochs)


def scale_attack(spec: AttackSpec, scale: float) -> AttackSpec:
    """Shrink an attack's budget (and explicit step size) by ``scale``.

    Identity specs and scales at or above one pass through unchanged.
    """
    if scale >= 1.0 or spec.method == "identity":
        return spec
    from dataclasses import replace

    step = None if spec.step_size is None else spec.step_size * scale
    return replace(spec, epsilon=spec.epsilon * scale, step_size=step)


@dataclass
class FeatureDistribution:
    """Rows of softmax-normalized feature mass at a fixed temperature."""

    probs: torch.Tensor  # (..., d)
    temperature: float = 1.0

    def __post_init__(self) -> None:
        sums = self.probs.sum(dim=-1)
        if float((sums - 1).abs().max()) > 1e-4:
            raise ValueError("rows must sum to 1")
        if float(self.probs.min()) < 0:
            raise ValueError("probabilities must be non-negative")


def feature_probs(features: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """Differentiable softmax over the feature dimension."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    return F.softmax(features / temperature, dim=-1)


def feature_distribution(features: torch.Tensor, temperature: float = 1.0) -> FeatureDistribution:
    return FeatureDistribution(feature_probs(features, temperature), temperature)


def _prob_tensor(p) -> torch.Tensor:
    return p.probs if isinstance(p, FeatureDistribution) else p


def kl_divergence(p, q, *, smoothing: float = 1e-6) -> torch.Tensor:
    """Mean KL(p || q) over rows; q is mixed with a uniform floor so the
    ratio stays finite when q has (near-)zero entries."""
    pt, qt = _prob_tensor(p), _prob_tensor(q)
    if pt.shape != qt.shape:
        raise ValueError(f"shape mismatch {tuple(pt.shape)} vs {tuple(qt.shape)}")
    dim = qt.shape[-1]
    q_floor = (1 - smoothing) * qt + smoothing / dim
    per_row = (pt * (pt.clamp_min(1e-12).log() - q_floor.log())).sum(dim=-1)
    return per_row.mean()


@dataclass
class MetaConfig:
    """Hyperparameters of the distillation objective and meta update."""

    epochs: int = 8
    batch_size: int = 128
    alpha: float = 1e-3  # inner (virtual) step size
    beta: float = 1.0  # weight of the held-out loss
    gamma: float = 1e-3  # outer step size
    w_adversarial: float = 1.0
    w_cyclic: float = 1.0
    w_label: float = 1.0
    temperature: float = 1.0
    kl_smoothing: float = 1e-6
    second_order: bool = True
    outer_optimizer: str = "sgd"
    student_init: str = "teacher"
    epsilon_ramp_epochs: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if max(self.w_adversarial, self.w_cyclic, self.w_label) <= 0:
            raise ValueError("at least one consistency weight must be positive")
        if min(self.w_adversarial, self.w_cyclic, self.w_label) < 0:
            raise ValueError("consistency weights must be >= 0")
        if self.alpha <= 0 or self.gamma <= 0:
            raise ValueError("step sizes must be positive")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.outer_optimizer not in OUTER_OPTIMIZERS:
            raise ValueError(f"outer_optimizer must be one of {OUTER_OPTIMIZERS}, "
                             f"got {self.outer_optimizer!r}")
        if self.student_init not in STUDENT_INITS:
            raise ValueError(f"student_init must be one of {STUDENT_INITS}, "
                             f"got {self.student_init!r}")
        if self.epsilon_ramp_epochs < 0:
            raise ValueError("epsilon_ramp_epochs must be >= 0")


def _student_features(student: nn.Module, params: ParamDict | None,
                      x: torch.Tensor) -> torch.Tensor:
    if params is None:
        return student(x)
    return functional_call(student, params, (x,))


def _attack_model(teacher: TeacherModel, student: nn.Module,
                  params: ParamDict | None):
    """Frozen view of the current defended model for attack generation."""
    if params is not None:
        params = {k: v.detach() for k, v in params.items()}

    def run(x: torch.Tensor) -> torch.Tensor:
        return teacher.head(_student_features(student, params, x))

    return run


def pool_adversarial_batches(
    teacher: TeacherModel,
    student: nn.Module,
    batch: ImageBatch,
    specs: Sequence[AttackSpec],
    rng: torch.Generator | None = None,
    *,
    params: ParamDict | None = None,
) -> list[AdversarialBatch]:
    """White-box adversarial versions of one batch against the current
    student encoder composed with the teacher's head."""
    model = _attack_model(teacher, student, params)
    num_classes = teacher.num_classes
    with torch.no_grad():
        return [generate(spec, model, batch, rng, num_classes=num_classes) for spec in specs]


def adversarial_consistency(teacher: TeacherModel, student: nn.Module,
                            adv_batches: Sequence[AdversarialBatch], *,
                            params: ParamDict | None = None,
                            temperature: float = 1.0,
                            smoothing: float = 1e-6) -> torch.Tensor:
    """KL from teacher features on clean inputs to student features on each
    attacked version, summed over attacks."""
    total = None
    for ab in adv_batches:
        with torch.no_grad():
            reference = feature_probs(teacher.encode(ab.clean), temperature)
        student_probs = feature_probs(
            _student_features(student, params, ab.images), temperature)
        term = kl_divergence(reference, student_probs, smoothing=smoothing)
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no adversarial batches given")
    return total


def cyclic_consistency(teacher: TeacherModel, student: nn.Module,
                       adv_batches: Sequence[AdversarialBatch], *,
                       params: ParamDict | None = None,
                       temperature: float = 1.0,
                       smoothing: float = 1e-6) -> torch.Tensor:
    """KL between teacher features on clean inputs and teacher features on
    the regenerations decoded from student features of attacked inputs."""
    total = None
    for ab in adv_batches:
        with torch.no_grad():
            reference = feature_probs(teacher.encode(ab.clean), temperature)
        regen = teacher.decode(_student_features(student, params, ab.images))
        regen_probs = feature_probs(teacher.encode(regen), temperature)
        term = kl_divergence(reference, regen_probs, smoothing=smoothing)
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no adversarial batches given")
    return total


def label_consistency(teacher: TeacherModel, student: nn.Module,
                      adv_batches: Sequence[AdversarialBatch], *,
                      params: ParamDict | None = None) -> torch.Tensor:
    """Cross-entropy of the teacher's head on student features of attacked
    inputs against the true labels, summed over attacks."""
    total = None
    for ab in adv_batches:
        logits = teacher.classify(_student_features(student, params, ab.images))
        term = F.cross_entropy(logits, ab.labels)
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no adversarial batches given")
    return total


@dataclass
class ConsistencyTerms:
    """Weighted total plus the raw per-term values for one set of attacks."""

    total: torch.Tensor
    adversarial: torch.Tensor
    cyclic: torch.Tensor
    label: torch.Tensor
    batches: list[AdversarialBatch] = field(repr=False, default_factory=list)


def consistency_loss(
    teacher: TeacherModel,
    student: nn.Module,
    batch: ImageBatch,
    specs: Sequence[AttackSpec],
    cfg: MetaConfig,
    rng: torch.Generator | None = None,
    *,
    params: ParamDict | None = None,
    batches: Sequence[AdversarialBatch] | None = None,
) -> ConsistencyTerms:
    """The distillation objective on one batch under the given attacks.

    Adversarial batches are regenerated against the current parameters
    unless precomputed ones are supplied.
    """
    if batches is None:
        batches = pool_adversarial_batches(teacher, student, batch, specs, rng, params=params)
    ac = adversarial_consistency(teacher, student, batches, params=params,
                                 temperature=cfg.temperature, smoothing=cfg.kl_smoothing)
    cc = cyclic_consistency(teacher, student, batches, params=params,
                            temperature=cfg.temperature, smoothing=cfg.kl_smoothing)
    lc = label_consistency(teacher, student, batches, params=params)
    total = cfg.w_adversarial * ac + cfg.w_cyclic * cc + cfg.w_label * lc
    return ConsistencyTerms(total, ac, cc, lc, list(batches))


def inner_step(params: ParamDict | nn.Module, loss: torch.Tensor, alpha: float,
               *, second_order: bool = True) -> ParamDict:
    """One virtual gradient step: returns params - alpha * grad(loss).

    With ``second_order`` the step stays differentiable, so later gradients
    flow through it; otherwise the gradients are treated as constants.
    """
    if isinstance(params, nn.Module):
        params = dict(params.named_parameters())
    names = list(params)
    tensors = [params[n] for n in names]
    grads = torch.autograd.grad(loss, tensors, create_graph=second_order,
                                allow_unused=True)
    stepped: ParamDict = {}
    for name, tensor, grad in zip(names, tensors, grads):
        stepped[name] = tensor if grad is None else tensor - alpha * grad
    return stepped


def meta_objective(
    params: ParamDict | nn.Module,
    train_loss: LossClosure,
    test_loss: LossClosure,
    *,
    alpha: float,
    beta: float,
    second_order: bool = True,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, ParamDict]:
    """Compose train loss at params with test loss after one virtual step.

    Returns (total, train value, test value, stepped params) where
    total = train_loss(params) + beta * test_loss(params').
    """
    if isinstance(params, nn.Module):
        params = dict(params.named_parameters())
    train_value = train_loss(params)
    stepped = inner_step(params, train_value, alpha, second_order=second_order)
    test_value = test_loss(stepped)
    return train_value + beta * test_value, train_value, test_value, stepped


@dataclass
class MetaStepReport:
    """Losses and bookkeeping of one meta update."""

    train_total: float
    train_adversarial: float
    train_cyclic: float
    train_label: float
    test_total: float
    test_adversarial: float
    test_cyclic: float
    test_label: float
    gradient_norm: float
    train_attacks: tuple[str, ...]
    holdout_attack: str

    def to_dict(self) -> dict:
        return {
            "train_total": self.train_total,
            "train_adversarial": self.train_adversarial,
            "train_cyclic": self.train_cyclic,
            "train_label": self.train_label,
            "test_total": self.test_total,
            "test_adversarial": self.test_adversarial,
            "test_cyclic": self.test_cyclic,
            "test_label": self.test_label,
            "gradient_norm": self.gradient_norm,
            "train_attacks": list(self.train_attacks),
            "holdout_attack": self.holdout_attack,
        }


def meta_update(teacher: TeacherModel, student: nn.Module, batch: ImageBatch,
                pool: AttackerPool, cfg: MetaConfig,
                rng: torch.Generator | None = None,
                optimizer: torch.optim.Optimizer | None = None,
                epsilon_scale: float = 1.0) -> MetaStepReport:
    """One outer update of the student parameters.

    Samples a train/holdout split of the pool, evaluates the consistency
    loss on the train attacks, steps virtually with size alpha, evaluates
    the holdout consistency loss at the stepped parameters, and descends
    the summed objective with size gamma. With ``cfg.second_order`` the
    holdout gradient is propagated through the virtual step. When an
    ``optimizer`` over the student parameters is supplied it applies the
    gradient instead of the plain descent step. ``epsilon_scale`` shrinks
    the pool's perturbation budgets for ramp-up schedules.
    """
    params = dict(student.named_parameters())
    train_specs, holdout = sample_meta_split(pool, rng)
    if epsilon_scale < 1.0:
        train_specs = tuple(scale_attack(s, epsilon_scale) for s in train_specs)
        holdout = scale_attack(holdout, epsilon_scale)
    record: dict[str, ConsistencyTerms] = {}

    def train_loss(p: ParamDict) -> torch.Tensor:
        terms = consistency_loss(teacher, student, batch, train_specs, cfg, rng, params=p)
        record["train"] = terms
        return terms.total

    def test_loss(p: ParamDict) -> torch.Tensor:
        terms = consistency_loss(teacher, student, batch, (holdout,), cfg, rng, params=p)
        record["test"] = terms
        return terms.total

    total, _, _, _ = meta_objective(params, train_loss, test_loss,
                                    alpha=cfg.alpha, beta=cfg.beta,
                                    second_order=cfg.second_order)
    tensors = list(params.values())
    grads = torch.autograd.grad(total, tensors, allow_unused=True)
    with torch.no_grad():
        squared = 0.0
        for tensor, grad in zip(tensors, grads):
            if grad is None:
                continue
            squared += float(grad.pow(2).sum())
            if optimizer is None:
                tensor.add_(grad, alpha=-cfg.gamma)
            else:
                tensor.grad = grad
    if optimizer is not None:
        optimizer.step()
        optimizer.zero_grad(set_to_none=True)

    train_terms, test_terms = record["train"], record["test"]
    return MetaStepReport(
        train_total=float(train_terms.total.detach()),
        train_adversarial=float(train_terms.adversarial.detach()),
        train_cyclic=float(train_terms.cyclic.detach()),
        train_label=float(train_terms.label.detach()),
        test_total=float(test_terms.total.detach()),
        test_adversarial=float(test_terms.adversarial.detach()),
        test_cyclic=float(test_terms.cyclic.detach()),
        test_label=float(test_terms.label.detach()),
        gradient_norm=math.sqrt(squared),
        train_attacks=tuple(s.canonical_name for s in train_specs),
        holdout_attack=holdout.canonical_name,
    )


def gradient_alignment(teacher: TeacherModel, student: nn.Module,
                       batch: ImageBatch, spec_a: AttackSpec, spec_b: AttackSpec,
                       cfg: MetaConfig, rng: torch.Generator | None = None) -> float:
    """Cosine similarity between student gradients of the consistency loss
    under two attacks; the mechanism the virtual step optimizes."""
    ga = _consistency_gradient(teacher, student, batch, spec_a, cfg, rng)
    gb = _consistency_gradient(teacher, student, batch, spec_b, cfg, rng)
    return _cosine(ga, gb)


def _consistency_gradient(teacher: TeacherModel, student: nn.Module,
                          batch: ImageBatch, spec: AttackSpec, cfg: MetaConfig,
                          rng: torch.Generator | None) -> torch.Tensor:
    terms = consistency_loss(teacher, student, batch, (spec,), cfg, rng)
    tensors = [p for p in student.parameters() if p.requires_grad]
    grads = torch.autograd.grad(terms.total, tensors, allow_unused=True)
    flats = [
        (g if g is not None else torch.zeros_like(p)).flatten()
        for p, g in zip(tensors, grads)
    ]
    return torch.cat(flats)


def _cosine(a: torch.Tensor, b: torch.Tensor) -> float:
    na, nb = float(a.norm()), float(b.norm())
    if na == 0 or nb == 0:
        raise ValueError("gradient alignment undefined for a zero gradient")
    return float(torch.dot(a, b) / (na * nb))


def pool_gradient_alignment(teacher: TeacherModel, student: nn.Module,
                            batch: ImageBatch, specs: Sequence[AttackSpec],
                            cfg: MetaConfig,
                            rng: torch.Generator | None = None) -> float:
    """Mean pairwise gradient alignment across the given attacks."""
    grads = [_consistency_gradient(teacher, student, batch, s, cfg, rng) for s in specs]
    pairs = [(i, j) for i in range(len(grads)) for j in range(i + 1, len(grads))]
    if not pairs:
        raise ValueError("need at least two attacks")
    return sum(_cosine(grads[i], grads[j]) for i, j in pairs) / len(pairs)


def train_mid(teacher: TeacherModel, student: nn.Module, dataset: Dataset,
              pool: AttackerPool, cfg: MetaConfig) -> tuple[nn.Module, list[dict]]:
    """Distill the student encoder against the attacker pool.

    Returns the trained student and a per-epoch history carrying mean
    losses, the parameter sparsity index, pool gradient alignment on a
    fixed probe batch, and clean accuracy of the composed model on a test
    subset.
    """
    from .analysis import sparsity_index

    if not isinstance(teacher, TeacherModel) or not teacher.is_frozen:
        raise ValueError("teacher must be a frozen TeacherModel")
    if cfg.student_init == "teacher":
        _copy_encoder_weights(teacher, student)
    probe = next(dataset.batches("test", min(128, dataset.split_size("test")), shuffle=False))
    optimizer = build_outer_optimizer(student.parameters(), cfg)
    history: list[dict] = []
    for epoch in range(1, cfg.epochs + 1):
        rng = torch.Generator().manual_seed(derive_seed(cfg.seed, f"mid-epoch-{epoch}"))
        scale = epsilon_schedule(cfg, epoch)
        reports: list[MetaStepReport] = []
        for batch in dataset.batches("train", cfg.batch_size, shuffle=True,
                                     seed=derive_seed(cfg.seed, f"mid-shuffle-{epoch}")):
            reports.append(meta_update(teacher, student, batch, pool, cfg, rng,
                                       optimizer=optimizer, epsilon_scale=scale))
        align_rng = torch.Generator().manual_seed(derive_seed(cfg.seed, f"mid-align-{epoch}"))
        alignment = pool_gradient_alignment(teacher, student, probe,
                                            pool.non_identity, cfg, align_rng)
        entry = {
            "epoch": epoch,
            "meta_train_loss": sum(r.train_total for r in reports) / len(reports),
            "meta_test_loss": sum(r.test_total for r in reports) / len(reports),
            "gradient_norm": sum(r.gradient_norm for r in reports) / len(reports),
            "sparsity_index": sparsity_index(student),
            "gradient_alignment": alignment,
            "clean_accuracy": _probe_accuracy(teacher, student, dataset),
            "epsilon_scale": scale,
            "steps": len(reports),
        }
        history.append(entry)
    return student, history


def _copy_encoder_weights(teacher: TeacherModel, student: nn.Module) -> None:
    """Warm-start the student from the teacher's encoder parameters."""
    target = getattr(student, "encoder", student)
    if not isinstance(target, nn.Module):
        target = student
    try:
        target.load_state_dict(teacher.encoder.state_dict())
    except RuntimeError as exc:
        raise ValueError(
            "student encoder structure does not match the teacher's; "
            "use student_init='random' for a differing architecture"
        ) from exc


def _probe_accuracy(teacher: TeacherModel, student: nn.Module,
                    dataset: Dataset, limit: int = 1024) -> float:
    correct = total = 0
    was_training = student.training
    student.eval()
    with torch.no_grad():
        for batch in dataset.batches("test", 256, limit=limit):
            pred = teacher.head(student(batch.images)).argmax(dim=1)
            correct += int((pred == batch.labels).sum())
            total += len(batch)
    student.train(was_training)
    return 100.0 * correct / total
