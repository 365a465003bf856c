"""Attack recipes: analytic oracles, reduction identities, invariants."""
import dataclasses
import math

import pytest
import torch
import torch.nn as nn

from mid.data import ImageBatch
from mid.attacks import (
    AttackSpec,
    AttackerPool,
    bim,
    cw,
    fgsm,
    generate,
    mim,
    pgd,
    sample_meta_split,
    select_targets,
)
from mid.models import EncoderSpec, build_encoder
from mid.seeding import make_generator


class TinyNet(nn.Module):
    """1x4x4 images -> 2 logits, with a fixed seed for reproducibility."""

    def __init__(self, seed=0):
        super().__init__()
        torch.manual_seed(seed)
        self.conv = nn.Conv2d(1, 3, 3, padding=1)
        self.fc = nn.Linear(3 * 16, 2)

    def forward(self, x):
        return self.fc(torch.relu(self.conv(x)).flatten(1))


def tiny_batch(n=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    images = torch.rand(n, 1, 4, 4, generator=g)
    labels = torch.randint(0, 2, (n,), generator=g)
    return ImageBatch(images, labels)


# --- analytic single-step oracles -------------------------------------------

def test_fgsm_logistic_oracle():
    # one-pixel logistic model: logit = w*x with w=2; true label 1.
    # d loss / d x = -w * sigmoid(-w*x) < 0, so the ascent step moves x by
    # -eps: 0.5 - 0.3 = 0.2.
    w = torch.tensor([[2.0]])

    class Logistic(nn.Module):
        def forward(self, x):
            z = (x.flatten(1) @ w.t())
            return torch.cat([torch.zeros_like(z), z], dim=1)

    batch = ImageBatch(torch.tensor([[[[0.5]]]]), torch.tensor([1]))
    spec = AttackSpec("fgsm", epsilon=0.3)
    adv = fgsm(Logistic(), batch, spec)
    assert torch.allclose(adv, torch.tensor([[[[0.2]]]]), atol=1e-7)


def test_pgd_quadratic_oracle():
    # maximize (x - c)^2 with c=-1 from x0=0, ball eps=0.5: optimum at +0.5.
    spec = AttackSpec("pgd", epsilon=0.5, steps=10, random_start=False)
    batch = ImageBatch(torch.zeros(1, 1, 1, 1), torch.zeros(1, dtype=torch.long))

    def loss(x):
        return ((x + 1.0) ** 2).flatten(1).sum(dim=1)

    adv = pgd(object(), batch, spec, loss_fn=loss)
    assert torch.allclose(adv, torch.tensor([[[[0.5]]]]), atol=1e-7)


def test_bim_three_step_oracle():
    # constant-sign gradient, step 0.05, three steps -> 0.15 from 0.
    spec = AttackSpec("bim", epsilon=0.3, steps=3, step_size=0.05)
    batch = ImageBatch(torch.zeros(1, 1, 1, 1), torch.zeros(1, dtype=torch.long))

    def loss(x):
        return x.flatten(1).sum(dim=1)

    adv = bim(object(), batch, spec, loss_fn=loss)
    assert torch.allclose(adv, torch.tensor([[[[0.15]]]]), atol=1e-7)


def test_mim_two_step_oracle():
    # mu=1 with same-direction gradients: two steps of 0.1 -> 0.2.
    spec = AttackSpec("mim", epsilon=0.3, steps=2, step_size=0.1, momentum=1.0)
    batch = ImageBatch(torch.zeros(1, 1, 1, 1), torch.zeros(1, dtype=torch.long))

    def loss(x):
        return x.flatten(1).sum(dim=1)

    adv = mim(object(), batch, spec, loss_fn=loss)
    assert torch.allclose(adv, torch.tensor([[[[0.2]]]]), atol=1e-7)


# --- reduction identities ----------------------------------------------------

def test_pgd_single_step_equals_fgsm():
    model = TinyNet()
    spec_f = AttackSpec("fgsm", epsilon=0.2)
    spec_p = AttackSpec("pgd", epsilon=0.2, steps=1, step_size=0.2, random_start=False)
    for seed in range(20):
        batch = tiny_batch(seed=seed)
        a = fgsm(model, batch, spec_f)
        b = pgd(model, batch, spec_p)
        assert float((a - b).abs().max()) <= 1e-6


def test_mim_zero_momentum_equals_bim():
    model = TinyNet()
    spec_b = AttackSpec("bim", epsilon=0.25, steps=5)
    spec_m = AttackSpec("mim", epsilon=0.25, steps=5, momentum=0.0)
    for seed in range(20):
        batch = tiny_batch(seed=seed)
        a = bim(model, batch, spec_b)
        b = mim(model, batch, spec_m)
        assert float((a - b).abs().max()) <= 1e-6


def test_bim_single_step_equals_fgsm():
    model = TinyNet()
    spec_f = AttackSpec("fgsm", epsilon=0.15)
    spec_b = AttackSpec("bim", epsilon=0.15, steps=1, step_size=0.15)
    for seed in range(20):
        batch = tiny_batch(seed=seed)
        a = fgsm(model, batch, spec_f)
        b = bim(model, batch, spec_b)
        assert float((a - b).abs().max()) <= 1e-6


# --- ball and range invariants -----------------------------------------------

@pytest.mark.parametrize("method", ["fgsm", "bim", "pgd", "mim"])
@pytest.mark.parametrize("targeted", [False, True])
def test_linf_ball_and_range(method, targeted):
    model = TinyNet()
    spec = AttackSpec(method, targeted=targeted, epsilon=0.3)
    rng = make_generator(0, f"{method}-{targeted}")
    for seed in range(10):
        batch = tiny_batch(seed=seed)
        adv = generate(spec, model, batch, rng, num_classes=2)
        delta = (adv.images - batch.images).abs().max()
        assert float(delta) <= 0.3 + 1e-6
        assert float(adv.images.min()) >= -1e-6
        assert float(adv.images.max()) <= 1 + 1e-6


def test_cw_stays_in_unit_box():
    model = TinyNet()
    spec = AttackSpec("cw", cw_iterations=30)
    batch = tiny_batch(n=6)
    adv = generate(spec, model, batch, make_generator(0, "cw"))
    assert float(adv.images.min()) >= -1e-6
    assert float(adv.images.max()) <= 1 + 1e-6


def test_cw_misclassified_inputs_untouched():
    model = TinyNet()
    batch = tiny_batch(n=16)
    with torch.no_grad():
        wrong = model(batch.images).argmax(1) != batch.labels
    if not bool(wrong.any()):
        pytest.skip("random toy net classified everything correctly")
    spec = AttackSpec("cw", cw_iterations=10)
    adv = generate(spec, model, batch, make_generator(0, "cw2"))
    assert torch.equal(adv.images[wrong], batch.images[wrong])


def test_identity_returns_same_tensors(probe_batch):
    spec = AttackSpec("identity")
    adv = generate(spec, object(), probe_batch)
    assert adv.images is probe_batch.images
    assert adv.labels is probe_batch.labels


# --- targeting ----------------------------------------------------------------

def test_select_targets_never_hits_label():
    labels = torch.arange(10).repeat(50)
    rng = make_generator(1, "targets")
    targets = select_targets(labels, 10, rng)
    assert bool((targets != labels).all())
    assert int(targets.min()) >= 0 and int(targets.max()) <= 9


def test_select_targets_needs_two_classes():
    with pytest.raises(ValueError):
        select_targets(torch.zeros(3, dtype=torch.long), 1)


def test_targeted_generate_records_targets():
    model = TinyNet()
    spec = AttackSpec("fgsm", targeted=True)
    batch = tiny_batch()
    adv = generate(spec, model, batch, make_generator(0, "t"), num_classes=2)
    assert adv.targets is not None
    assert bool((adv.targets != batch.labels).all())


# --- spec and pool validation --------------------------------------------------

def test_spec_canonical_names():
    assert AttackSpec("pgd").canonical_name == "PGD_N"
    assert AttackSpec("mim", targeted=True).canonical_name == "MIM_T"
    assert AttackSpec("identity").canonical_name == "identity"


def test_spec_from_name_round_trip():
    spec = AttackSpec.from_name("BIM_T", epsilon=0.1)
    assert spec.method == "bim" and spec.targeted and spec.epsilon == 0.1
    assert AttackSpec.from_name("identity").method == "identity"
    with pytest.raises(ValueError):
        AttackSpec.from_name("WAT_N")


def test_spec_default_step_size_rule():
    spec = AttackSpec("pgd", epsilon=0.3, steps=10)
    assert math.isclose(spec.effective_step_size, 2.5 * 0.3 / 10)
    explicit = AttackSpec("pgd", epsilon=0.3, steps=10, step_size=0.01)
    assert explicit.effective_step_size == 0.01


def test_spec_validation():
    with pytest.raises(ValueError):
        AttackSpec("pgd", epsilon=-0.1)
    with pytest.raises(ValueError):
        AttackSpec("pgd", steps=0)
    with pytest.raises(ValueError):
        AttackSpec("nope")


def test_pool_appends_identity_and_validates():
    pool = AttackerPool.from_names(["PGD_N", "MIM_T"])
    assert "identity" in pool.names
    assert len(pool.non_identity) == 2
    with pytest.raises(ValueError):
        AttackerPool.from_names(["PGD_N"])  # needs two non-identity attacks
    with pytest.raises(ValueError):
        AttackerPool.from_names(["PGD_N", "PGD_N", "MIM_N"])  # duplicate


def test_meta_split_never_holds_out_identity():
    pool = AttackerPool.from_names(["PGD_N", "PGD_T", "MIM_N", "MIM_T"])
    rng = make_generator(0, "split")
    for _ in range(50):
        train, holdout = sample_meta_split(pool, rng)
        assert holdout.method != "identity"
        names = [s.canonical_name for s in train]
        assert "identity" in names
        assert holdout.canonical_name not in names
        assert len(train) == 4


def test_generate_rejects_epsilon_violation(probe_batch):
    # a spec whose step overshoots the ball must still be projected inside
    model = build_encoder(EncoderSpec("small-conv", 4, (1, 28, 28)))

    class WrapNet(nn.Module):
        def __init__(self):
            super().__init__()
            self.enc = model
            self.fc = nn.Linear(4, 10)

        def forward(self, x):
            return self.fc(self.enc(x))

    spec = AttackSpec("pgd", epsilon=0.05, steps=3, step_size=0.5)
    adv = generate(spec, WrapNet(), probe_batch, make_generator(0, "o"))
    assert float((adv.images - probe_batch.images).abs().max()) <= 0.05 + 1e-6
