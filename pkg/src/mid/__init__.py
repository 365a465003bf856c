"""Toolkit for training and evaluating attack-invariant robust encoders.

Pipeline: pretrain a teacher autoencoder-classifier, freeze it, distill a
student encoder under an attacker pool with a bi-level meta update, then
evaluate the student encoder composed with the teacher's classifier under
known and unknown attacks.
"""
from __future__ import annotations

__version__ = "0.1.0"

from .attacks import AttackSpec, AttackerPool, generate, sample_meta_split, select_targets
from .config import ExperimentConfig, config_hash, parse_config
from .data import Dataset, DatasetSpec, ImageBatch, builtin_spec, ensure_dataset, load_dataset, subsample
from .evaluation import EvaluationReport, accuracy, evaluate_robustness
from .meta_defense import (MetaConfig, consistency_loss, feature_distribution,
                           gradient_alignment, inner_step, kl_divergence,
                           meta_objective, meta_update, train_mid)
from .models import (ClassifierHead, ComposedClassifier, EncoderSpec, StudentEncoder,
                     TeacherModel, build_decoder, build_encoder, build_head,
                     load_checkpoint, save_checkpoint)
from .seeding import derive_seed
from .teacher import TeacherConfig, teacher_loss, train_teacher
