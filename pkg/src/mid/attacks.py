"""Adversarial example generation under an l-inf pixel budget, plus a
minimum-distortion l2 attack.

All attacks treat the model as frozen, perturb copies of the input, and
return images clamped to the valid range. Non-targeted variants ascend the
loss of the true class; targeted variants descend the loss of a sampled
wrong class.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import ImageBatch

METHODS = ("identity", "fgsm", "bim", "pgd", "mim", "cw")

LossFn = Callable[[torch.Tensor], torch.Tensor]  # per-sample objective to ascend


@dataclass(frozen=True)
class AttackSpec:
    """One attack configuration; defaults follow the standard recipe
    (eps 0.3 in raw pixel units, 10 steps, step size 2.5*eps/steps)."""

    method: str
    targeted: bool = False
    epsilon: float = 0.3
    steps: int = 10
    step_size: float | None = None
    random_start: bool = True  # pgd only
    momentum: float = 1.0  # mim only
    cw_penalty: float = 10.0
    cw_lr: float = 0.01
    cw_iterations: int = 100
    cw_confidence: float = 0.0

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown attack method '{self.method}' (known: {METHODS})")
        if self.method == "identity" and self.targeted:
            raise ValueError("identity cannot be targeted")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.momentum < 0:
            raise ValueError("momentum must be >= 0")
        if self.cw_iterations < 1 or self.cw_lr <= 0 or self.cw_penalty <= 0:
            raise ValueError("bad cw settings")

    @property
    def effective_step_size(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return 2.5 * self.epsilon / self.steps

    @property
    def canonical_name(self) -> str:
        if self.method == "identity":
            return "identity"
        return f"{self.method.upper()}_{'T' if self.targeted else 'N'}"

    @staticmethod
    def from_name(name: str, **overrides) -> "AttackSpec":
        """Build a spec from a canonical name like ``PGD_N`` or ``identity``."""
        if name.lower() == "identity":
            return AttackSpec(method="identity", **overrides)
        try:
            method, suffix = name.rsplit("_", 1)
        except ValueError:
            raise ValueError(f"bad attack name '{name}'") from None
        method = method.lower()
        if method not in METHODS or suffix.upper() not in ("T", "N"):
            raise ValueError(f"bad attack name '{name}'")
        return AttackSpec(method=method, targeted=suffix.upper() == "T", **overrides)

    def with_defaults(self, **defaults) -> "AttackSpec":
        return replace(self, **defaults)


@dataclass
class AdversarialBatch:
    """Perturbed images together with their clean originals and labels."""

    images: torch.Tensor
    clean: torch.Tensor
    labels: torch.Tensor
    targets: torch.Tensor | None
    spec: AttackSpec

    def as_image_batch(self) -> ImageBatch:
        return ImageBatch(self.images, self.labels)


@contextmanager
def _inference_mode(model):
    """Run attacks with the model's train/eval state pinned to eval."""
    if isinstance(model, nn.Module):
        was_training = model.training
        model.eval()
        try:
            yield
        finally:
            model.train(was_training)
    else:
        yield


def select_targets(labels: torch.Tensor, num_classes: int,
                   rng: torch.Generator | None = None) -> torch.Tensor:
    """Sample a wrong class uniformly for each label."""
    if num_classes < 2:
        raise ValueError("need at least two classes to pick a wrong target")
    draw = torch.randint(0, num_classes - 1, labels.shape, generator=rng)
    return draw + (draw >= labels).long()


def _objective(model, labels: torch.Tensor, targets: torch.Tensor | None) -> LossFn:
    if targets is None:
        def fn(x: torch.Tensor) -> torch.Tensor:
            return F.cross_entropy(model(x), labels, reduction="none")
    else:
        def fn(x: torch.Tensor) -> torch.Tensor:
            return -F.cross_entropy(model(x), targets, reduction="none")
    return fn


def _input_gradient(loss_fn: LossFn, x: torch.Tensor) -> torch.Tensor:
    with torch.enable_grad():
        probe = x.clone().detach().requires_grad_(True)
        loss = loss_fn(probe)
        loss = loss.sum() if loss.dim() > 0 else loss
        (grad,) = torch.autograd.grad(loss, probe)
    return grad.detach()


def _linf_ascent(
    loss_fn: LossFn,
    origin: torch.Tensor,
    *,
    epsilon: float,
    steps: int,
    step_size: float,
    momentum: float | None = None,
    random_start: bool = False,
    rng: torch.Generator | None = None,
) -> torch.Tensor:
    """Iterated signed-gradient ascent projected onto the eps-ball and the
    valid pixel range after every step."""
    origin = origin.detach()
    x = origin.clone()
    if random_start and epsilon > 0:
        noise = torch.empty_like(x).uniform_(-epsilon, epsilon, generator=rng)
        x = (x + noise).clamp(0.0, 1.0)
    accum = torch.zeros_like(x) if momentum is not None else None
    expand = (-1,) + (1,) * (x.dim() - 1)
    for _ in range(steps):
        grad = _input_gradient(loss_fn, x)
        if momentum is None:
            direction = grad.sign()
        else:
            scale = grad.flatten(1).abs().sum(dim=1).clamp_min(1e-12).view(expand)
            accum = momentum * accum + grad / scale
            direction = accum.sign()
        x = x + step_size * direction
        x = torch.min(torch.max(x, origin - epsilon), origin + epsilon)
        x = x.clamp(0.0, 1.0)
    return x.detach()


def fgsm(model, batch: ImageBatch, spec: AttackSpec, *,
         targets: torch.Tensor | None = None, loss_fn: LossFn | None = None) -> torch.Tensor:
    """Single signed-gradient step of size eps."""
    fn = loss_fn if loss_fn is not None else _objective(model, batch.labels, targets)
    with _inference_mode(model):
        return _linf_ascent(fn, batch.images, epsilon=spec.epsilon, steps=1,
                            step_size=spec.epsilon, random_start=False)


def bim(model, batch: ImageBatch, spec: AttackSpec, *,
        targets: torch.Tensor | None = None, loss_fn: LossFn | None = None) -> torch.Tensor:
    """Iterated signed-gradient steps from the clean input."""
    fn = loss_fn if loss_fn is not None else _objective(model, batch.labels, targets)
    with _inference_mode(model):
        return _linf_ascent(fn, batch.images, epsilon=spec.epsilon, steps=spec.steps,
                            step_size=spec.effective_step_size, random_start=False)


def pgd(model, batch: ImageBatch, spec: AttackSpec, *,
        targets: torch.Tensor | None = None, rng: torch.Generator | None = None,
        loss_fn: LossFn | None = None) -> torch.Tensor:
    """Iterated signed-gradient steps, optionally from a random point in the ball."""
    fn = loss_fn if loss_fn is not None else _objective(model, batch.labels, targets)
    with _inference_mode(model):
        return _linf_ascent(fn, batch.images, epsilon=spec.epsilon, steps=spec.steps,
                            step_size=spec.effective_step_size,
                            random_start=spec.random_start, rng=rng)


def mim(model, batch: ImageBatch, spec: AttackSpec, *,
        targets: torch.Tensor | None = None, loss_fn: LossFn | None = None) -> torch.Tensor:
    """Momentum-accumulated signed-gradient steps; gradients are
    l1-normalized per sample before accumulation."""
    fn = loss_fn if loss_fn is not None else _objective(model, batch.labels, targets)
    with _inference_mode(model):
        return _linf_ascent(fn, batch.images, epsilon=spec.epsilon, steps=spec.steps,
                            step_size=spec.effective_step_size, momentum=spec.momentum)


def _cw_margin(logits: torch.Tensor, labels: torch.Tensor,
               targets: torch.Tensor | None, confidence: float) -> torch.Tensor:
    """Positive while the attack objective is unmet; <= 0 once satisfied
    with the requested confidence."""
    if targets is None:
        own = logits.gather(1, labels[:, None]).squeeze(1)
        other = logits.scatter(1, labels[:, None], float("-inf")).amax(dim=1)
        return own - other + confidence
    tgt = logits.gather(1, targets[:, None]).squeeze(1)
    rest = logits.scatter(1, targets[:, None], float("-inf")).amax(dim=1)
    return rest - tgt + confidence


def cw(model, batch: ImageBatch, spec: AttackSpec, *,
       targets: torch.Tensor | None = None) -> torch.Tensor:
    """l2 minimum-distortion attack with a tanh box reparameterization and a
    fixed misclassification penalty; keeps the lowest-norm feasible iterate
    and falls back to the original input when none is found."""
    x0 = batch.images.detach()
    labels = batch.labels
    best = x0.clone()
    best_norm = torch.full((x0.shape[0],), float("inf"), dtype=x0.dtype, device=x0.device)

    with _inference_mode(model):
        with torch.no_grad():
            margin0 = _cw_margin(model(x0), labels, targets, spec.cw_confidence)
        best_norm[margin0 <= 0] = 0.0

        squeezed = x0.clamp(1e-4, 1 - 1e-4)
        with torch.enable_grad():
            v = torch.atanh(2 * squeezed - 1).requires_grad_(True)
        optimizer = torch.optim.Adam([v], lr=spec.cw_lr)
        for _ in range(spec.cw_iterations):
            with torch.enable_grad():
                x_adv = (torch.tanh(v) + 1) / 2
                norms_sq = (x_adv - x0).flatten(1).pow(2).sum(dim=1)
                logits = model(x_adv)
                margin = _cw_margin(logits, labels, targets, spec.cw_confidence)
                loss = (norms_sq + spec.cw_penalty * margin.clamp_min(0)).sum()
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            with torch.no_grad():
                norms = norms_sq.detach().sqrt()
                improved = (margin.detach() <= 0) & (norms < best_norm)
                if improved.any():
                    best[improved] = x_adv.detach()[improved]
                    best_norm[improved] = norms[improved]
    return best


def generate(spec: AttackSpec, model, batch: ImageBatch,
             rng: torch.Generator | None = None, *,
             num_classes: int | None = None) -> AdversarialBatch:
    """Dispatch one attack spec and enforce the perturbation invariants.

    A pure function of (spec, model parameters, batch, rng): identity
    returns the batch unchanged, targeted specs sample a wrong class per
    sample from ``rng``.
    """
    if spec.method == "identity":
        return AdversarialBatch(batch.images, batch.images, batch.labels, None, spec)

    targets = None
    if spec.targeted:
        if num_classes is None:
            with torch.no_grad(), _inference_mode(model):
                num_classes = int(model(batch.images[:1]).shape[1])
        targets = select_targets(batch.labels, num_classes, rng)

    if spec.method == "fgsm":
        adv = fgsm(model, batch, spec, targets=targets)
    elif spec.method == "bim":
        adv = bim(model, batch, spec, targets=targets)
    elif spec.method == "pgd":
        adv = pgd(model, batch, spec, targets=targets, rng=rng)
    elif spec.method == "mim":
        adv = mim(model, batch, spec, targets=targets)
    elif spec.method == "cw":
        adv = cw(model, batch, spec, targets=targets)
    else:  # pragma: no cover - guarded by AttackSpec
        raise ValueError(spec.method)

    lo, hi = float(adv.min()), float(adv.max())
    if lo < -1e-6 or hi > 1 + 1e-6:
        raise RuntimeError(f"{spec.canonical_name}: output outside pixel range")
    if spec.method != "cw":
        gap = float((adv - batch.images).abs().max())
        if gap > spec.epsilon + 1e-6:
            raise RuntimeError(f"{spec.canonical_name}: perturbation {gap} exceeds eps {spec.epsilon}")
    return AdversarialBatch(adv, batch.images, batch.labels, targets, spec)


@dataclass(frozen=True)
class AttackerPool:
    """The defended-against attack set; identity (benign) is always a member
    and at least two non-identity attacks are required."""

    specs: tuple[AttackSpec, ...]

    def __post_init__(self) -> None:
        specs = tuple(self.specs)
        if not any(s.method == "identity" for s in specs):
            specs = specs + (AttackSpec(method="identity"),)
        names = [s.canonical_name for s in specs]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate attack specs in pool: {names}")
        if sum(s.method != "identity" for s in specs) < 2:
            raise ValueError("pool needs at least two non-identity attacks")
        object.__setattr__(self, "specs", specs)

    @property
    def non_identity(self) -> tuple[AttackSpec, ...]:
        return tuple(s for s in self.specs if s.method != "identity")

    @property
    def identity(self) -> AttackSpec:
        return next(s for s in self.specs if s.method == "identity")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(s.canonical_name for s in self.specs)

    @staticmethod
    def from_names(names: Sequence[str], **defaults) -> "AttackerPool":
        return AttackerPool(tuple(AttackSpec.from_name(n, **defaults) for n in names))


def sample_meta_split(pool: AttackerPool,
                      rng: torch.Generator | None = None
                      ) -> tuple[tuple[AttackSpec, ...], AttackSpec]:
    """Sample a train/holdout split of the pool: one non-identity attack is
    held out, the rest plus identity form the train specs."""
    candidates = pool.non_identity
    pick = int(torch.randint(len(candidates), (1,), generator=rng))
    holdout = candidates[pick]
    train = tuple(s for i, s in enumerate(candidates) if i != pick) + (pool.identity,)
    return train, holdout
