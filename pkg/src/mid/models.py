"""Encoders, classifier heads, mirrored decoders and checkpointing.

An encoder maps images (B, C, H, W) to feature vectors (B, feature_dim);
the matching decoder maps features back to image shape with a tanh output
rescaled to [0, 1]. The classifier head is a plain affine map on features.
"""
from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

BACKBONES = ("small-conv", "lenet5", "resnet-lite")


@dataclass(frozen=True)
class EncoderSpec:
    """Backbone identity plus the dimensions needed to build it."""

    backbone: str
    feature_dim: int
    in_shape: tuple[int, int, int]  # (C, H, W)

    def __post_init__(self) -> None:
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone '{self.backbone}' (known: {BACKBONES})")
        if self.feature_dim <= 0:
            raise ValueError("feature_dim must be positive")
        if len(self.in_shape) != 3:
            raise ValueError(f"in_shape must be (C, H, W), got {self.in_shape}")

    def to_dict(self) -> dict:
        return {"backbone": self.backbone, "feature_dim": self.feature_dim,
                "in_shape": list(self.in_shape)}

    @staticmethod
    def from_dict(d: dict) -> "EncoderSpec":
        return EncoderSpec(d["backbone"], int(d["feature_dim"]), tuple(d["in_shape"]))


class SmallConvEncoder(nn.Module):
    """Two thin conv blocks and a linear projection; small enough for
    double-precision gradient checks."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        c, h, w = spec.in_shape
        if h % 4 or w % 4:
            raise ValueError("small-conv needs H and W divisible by 4")
        self.spec = spec
        self.conv1 = nn.Conv2d(c, 4, 3, padding=1)
        self.conv2 = nn.Conv2d(4, 8, 3, padding=1)
        self.fc = nn.Linear(8 * (h // 4) * (w // 4), spec.feature_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.max_pool2d(F.relu(self.conv2(x)), 2)
        return self.fc(x.flatten(1))


class SmallConvDecoder(nn.Module):
    def __init__(self, spec: EncoderSpec):
        super().__init__()
        c, h, w = spec.in_shape
        self.h4, self.w4 = h // 4, w // 4
        self.fc = nn.Linear(spec.feature_dim, 8 * self.h4 * self.w4)
        self.up1 = nn.ConvTranspose2d(8, 4, 2, stride=2)
        self.up2 = nn.ConvTranspose2d(4, c, 2, stride=2)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.fc(f)).view(-1, 8, self.h4, self.w4)
        x = F.relu(self.up1(x))
        return (torch.tanh(self.up2(x)) + 1) / 2


class LeNet5Encoder(nn.Module):
    """Classic two-conv, two-linear feature extractor for 28x28 inputs."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        c, h, w = spec.in_shape
        self.spec = spec
        self.conv1 = nn.Conv2d(c, 6, 5, padding=2)
        self.conv2 = nn.Conv2d(6, 16, 5)
        with torch.no_grad():
            probe = self._conv_stack(torch.zeros(1, c, h, w))
        self.flat_dim = probe.flatten(1).shape[1]
        self.fc1 = nn.Linear(self.flat_dim, 120)
        self.fc2 = nn.Linear(120, spec.feature_dim)

    def _conv_stack(self, x: torch.Tensor) -> torch.Tensor:
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        return F.max_pool2d(F.relu(self.conv2(x)), 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self._conv_stack(x).flatten(1)
        x = F.relu(self.fc1(x))
        return self.fc2(x)


class LeNet5Decoder(nn.Module):
    """Mirror of the LeNet5 encoder; upsampling layers invert the pooled
    conv stack and the output is squashed back into [0, 1]."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        c, h, w = spec.in_shape
        if (h, w) != (28, 28):
            raise ValueError("lenet5 decoder expects 28x28 inputs")
        self.fc1 = nn.Linear(spec.feature_dim, 120)
        self.fc2 = nn.Linear(120, 400)
        self.up1 = nn.ConvTranspose2d(16, 6, 5, stride=2)
        self.up2 = nn.ConvTranspose2d(6, c, 4, stride=2)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.fc1(f))
        x = F.relu(self.fc2(x)).view(-1, 16, 5, 5)
        x = F.relu(self.up1(x))
        return (torch.tanh(self.up2(x)) + 1) / 2


class _ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.short: nn.Module
        if stride != 1 or cin != cout:
            self.short = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout)
            )
        else:
            self.short = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.short(x))


class ResLiteEncoder(nn.Module):
    """Small residual encoder for 32x32-scale color inputs."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        c, _, _ = spec.in_shape
        self.spec = spec
        self.stem = nn.Sequential(nn.Conv2d(c, 16, 3, padding=1, bias=False),
                                  nn.BatchNorm2d(16), nn.ReLU())
        self.block1 = _ResBlock(16, 32, stride=2)
        self.block2 = _ResBlock(32, 64, stride=2)
        self.fc = nn.Linear(64, spec.feature_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.block2(self.block1(self.stem(x)))
        x = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return self.fc(x)


class ResLiteDecoder(nn.Module):
    def __init__(self, spec: EncoderSpec):
        super().__init__()
        c, h, w = spec.in_shape
        if h % 8 or w % 8:
            raise ValueError("resnet-lite decoder needs H and W divisible by 8")
        self.h8, self.w8 = h // 8, w // 8
        self.fc = nn.Linear(spec.feature_dim, 64 * self.h8 * self.w8)
        self.up = nn.Sequential(
            nn.ConvTranspose2d(64, 32, 2, stride=2), nn.BatchNorm2d(32), nn.ReLU(),
            nn.ConvTranspose2d(32, 16, 2, stride=2), nn.BatchNorm2d(16), nn.ReLU(),
            nn.ConvTranspose2d(16, c, 2, stride=2),
        )

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.fc(f)).view(-1, 64, self.h8, self.w8)
        return (torch.tanh(self.up(x)) + 1) / 2


_ENCODERS = {"small-conv": SmallConvEncoder, "lenet5": LeNet5Encoder,
             "resnet-lite": ResLiteEncoder}
_DECODERS = {"small-conv": SmallConvDecoder, "lenet5": LeNet5Decoder,
             "resnet-lite": ResLiteDecoder}


def build_encoder(spec: EncoderSpec) -> nn.Module:
    return _ENCODERS[spec.backbone](spec)


def build_decoder(spec: EncoderSpec) -> nn.Module:
    return _DECODERS[spec.backbone](spec)


class ClassifierHead(nn.Linear):
    """Affine map from features to logits: logits = W f + b."""


def build_head(spec: EncoderSpec, num_classes: int) -> ClassifierHead:
    return ClassifierHead(spec.feature_dim, num_classes)


class TeacherModel(nn.Module):
    """Encoder + classifier head + mirrored decoder trained jointly.

    After :meth:`freeze` the module runs in eval mode with gradients
    disabled on every parameter; it then serves as the fixed reference for
    distillation and for the final robust model's classifier.
    """

    def __init__(self, spec: EncoderSpec, num_classes: int):
        super().__init__()
        self.spec = spec
        self.num_classes = num_classes
        self.encoder = build_encoder(spec)
        self.head = build_head(spec, num_classes)
        self.decoder = build_decoder(spec)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def decode(self, f: torch.Tensor) -> torch.Tensor:
        return self.decoder(f)

    def classify(self, f: torch.Tensor) -> torch.Tensor:
        return self.head(f)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder(x))

    def reconstruct(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(x))

    def freeze(self) -> "TeacherModel":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    @property
    def is_frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())


class StudentEncoder(nn.Module):
    """Freshly initialized encoder with the same structure as the teacher's."""

    def __init__(self, spec: EncoderSpec, seed: int | None = None):
        super().__init__()
        if seed is not None:
            torch.manual_seed(seed)
        self.spec = spec
        self.encoder = build_encoder(spec)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)


class ComposedClassifier(nn.Module):
    """An encoder wired to a classifier head; the deployable model shape."""

    def __init__(self, encoder: nn.Module, head: nn.Module):
        super().__init__()
        self.encoder = encoder
        self.head = head

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder(x))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def parameter_hash(state: "OrderedDict[str, torch.Tensor]") -> str:
    """Stable digest of named tensors (names, dtypes, shapes and bytes)."""
    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path: Path | str, state: dict, metadata: dict) -> None:
    """Write named tensors plus JSON metadata as an npz archive.

    Keys are ``param/<name>``; metadata lands under ``__meta__`` and always
    records the parameter hash.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in state.items()}
    meta = dict(metadata)
    meta["parameter_hash"] = parameter_hash(state)
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: Path | str) -> tuple["OrderedDict[str, torch.Tensor]", dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    with np.load(path) as archive:
        meta = json.loads(bytes(archive["__meta__"]).decode())
        state = OrderedDict(
            (k[len("param/"):], torch.from_numpy(archive[k].copy()))
            for k in archive.files if k.startswith("param/")
        )
    got = parameter_hash(state)
    want = meta.get("parameter_hash")
    if want is not None and got != want:
        raise ValueError(f"corrupt checkpoint {path}: parameter hash mismatch")
    return state, meta
