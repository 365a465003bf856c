"""Shared fixtures: a small synthetic dataset and trained models.

Session-scoped fixtures keep the expensive artifacts (dataset synthesis,
teacher pretraining) shared across test modules; tests must not mutate
them. Training-heavy fixtures for the acceptance run live in
test_acceptance.py so unit modules stay fast.
"""
from __future__ import annotations

import dataclasses

import pytest
import torch

from mid.data import builtin_spec, ensure_dataset, subsample
from mid.models import EncoderSpec
from mid.teacher import TeacherConfig, train_teacher


@pytest.fixture(scope="session")
def data_root(tmp_path_factory):
    return tmp_path_factory.mktemp("digits")


@pytest.fixture(scope="session")
def full_dataset(data_root):
    spec = builtin_spec("synthetic-digits", data_root)
    return ensure_dataset(spec, seed=0)


@pytest.fixture(scope="session")
def small_dataset(full_dataset):
    """Class-stratified 1000-sample training slice for quick fits."""
    return subsample(full_dataset, 0.1, seed=3)


@pytest.fixture(scope="session")
def encoder_spec():
    return EncoderSpec("lenet5", 84, (1, 28, 28))


@pytest.fixture(scope="session")
def teacher(small_dataset, encoder_spec):
    model, history = train_teacher(small_dataset, encoder_spec,
                                   TeacherConfig(epochs=3, seed=0))
    model.freeze()
    model.history = history
    return model


@pytest.fixture()
def probe_batch(full_dataset):
    return next(full_dataset.batches("test", 64))
