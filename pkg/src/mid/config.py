"""Experiment configuration: YAML parsing, validation and seed fan-out.

Configs are nested key/value files. Unknown keys, duplicate keys and type
mismatches are rejected with the offending key path and line number.
Omitted keys fall back to defaults (attack budget eps defaults to 0.3 in
raw pixel units).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, get_args, get_origin, get_type_hints

import yaml

from .attacks import AttackSpec, AttackerPool
from .data import DatasetSpec, builtin_spec
from .meta_defense import MetaConfig
from .models import EncoderSpec
from .seeding import derive_seed  # re-exported for stage seeding

__all__ = [
    "ConfigError", "ExperimentConfig", "parse_config", "config_from_dict",
    "config_hash", "derive_seed", "DEFAULT_EVAL_ATTACKS", "DEFAULT_POOL",
]

DEFAULT_POOL = ("PGD_N", "PGD_T", "MIM_N", "MIM_T")
DEFAULT_EVAL_ATTACKS = ("FGSM_N", "FGSM_T", "BIM_N", "BIM_T", "PGD_N", "PGD_T",
                        "MIM_N", "MIM_T", "CW_N", "CW_T")


class ConfigError(ValueError):
    """Invalid configuration; the message names the key and line."""


class _LocatedDict(dict):
    """Mapping that remembers the source line of each key."""

    lines: dict[str, int]


class _Loader(yaml.SafeLoader):
    pass


def _construct_mapping(loader: _Loader, node: yaml.MappingNode) -> _LocatedDict:
    loader.flatten_mapping(node)
    out = _LocatedDict()
    out.lines = {}
    for key_node, value_node in node.value:
        key = loader.construct_object(key_node, deep=True)
        line = key_node.start_mark.line + 1
        if key in out:
            raise ConfigError(f"duplicate key '{key}' at line {line}")
        out[key] = loader.construct_object(value_node, deep=True)
        out.lines[key] = line
    return out


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


@dataclass
class DataSection:
    name: str = "synthetic-digits"
    path: str = "data"
    subsample_fraction: float = 1.0


@dataclass
class ModelSection:
    backbone: str = "lenet5"
    feature_dim: int = 84


@dataclass
class AttackDefaults:
    epsilon: float = 0.3
    steps: int = 10
    step_size: float | None = None
    random_start: bool = True
    momentum: float = 1.0
    cw_penalty: float = 10.0
    cw_lr: float = 0.01
    cw_iterations: int = 100
    cw_confidence: float = 0.0


@dataclass
class TeacherSection:
    epochs: int = 5
    batch_size: int = 128
    lr: float = 1e-3
    optimizer: str = "adam"
    reconstruction_norm: str = "l2"


@dataclass
class MetaSection:
    epochs: int = 8
    batch_size: int = 128
    alpha: float = 1e-3
    beta: float = 1.0
    gamma: float = 1e-3
    w_adversarial: float = 1.0
    w_cyclic: float = 1.0
    w_label: float = 1.0
    temperature: float = 1.0
    kl_smoothing: float = 1e-6
    second_order: bool = True
    outer_optimizer: str = "sgd"
    student_init: str = "teacher"
    epsilon_ramp_epochs: int = 0


@dataclass
class EvalSection:
    attacks: list[str] = field(default_factory=lambda: list(DEFAULT_EVAL_ATTACKS))
    mode: str = "white"
    batch_size: int = 256
    max_samples: int | None = None
    checkpoint: str | None = None
    substitute_epochs: int = 5


@dataclass
class AnalysisSection:
    cutoffs: list[int] = field(default_factory=lambda: list(range(17)))
    attacks: list[str] = field(default_factory=lambda: ["PGD_N"])
    max_samples: int = 1024
    num_gradient_maps: int = 16
    history: str | None = None


@dataclass
class ExperimentConfig:
    seed: int = 0
    output: str = "runs/out"
    device: str = "cpu"
    dataset: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    attacks: AttackDefaults = field(default_factory=AttackDefaults)
    pool: list = field(default_factory=lambda: list(DEFAULT_POOL))
    teacher: TeacherSection = field(default_factory=TeacherSection)
    meta: MetaSection = field(default_factory=MetaSection)
    evaluation: EvalSection = field(default_factory=EvalSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)

    # -- builders ---------------------------------------------------------

    def dataset_spec(self) -> DatasetSpec:
        return builtin_spec(self.dataset.name, Path(self.dataset.path))

    def encoder_spec(self) -> EncoderSpec:
        shape = self.dataset_spec().image_shape
        return EncoderSpec(backbone=self.model.backbone,
                           feature_dim=self.model.feature_dim, in_shape=shape)

    def attack_defaults(self) -> dict:
        return dict(
            epsilon=self.attacks.epsilon, steps=self.attacks.steps,
            step_size=self.attacks.step_size, random_start=self.attacks.random_start,
            momentum=self.attacks.momentum, cw_penalty=self.attacks.cw_penalty,
            cw_lr=self.attacks.cw_lr, cw_iterations=self.attacks.cw_iterations,
            cw_confidence=self.attacks.cw_confidence,
        )

    def _spec_from_entry(self, entry, keypath: str) -> AttackSpec:
        defaults = self.attack_defaults()
        if isinstance(entry, str):
            try:
                return AttackSpec.from_name(entry, **defaults)
            except ValueError as exc:
                raise ConfigError(f"{keypath}: {exc}") from exc
        if isinstance(entry, dict):
            entry = dict(entry)
            name = entry.pop("name", None)
            if name is None:
                raise ConfigError(f"{keypath}: attack entry needs a 'name'")
            unknown = set(entry) - set(defaults)
            if unknown:
                raise ConfigError(f"{keypath}: unknown attack keys {sorted(unknown)}")
            defaults.update(entry)
            try:
                return AttackSpec.from_name(name, **defaults)
            except ValueError as exc:
                raise ConfigError(f"{keypath}: {exc}") from exc
        raise ConfigError(f"{keypath}: attack entry must be a name or mapping")

    def attacker_pool(self) -> AttackerPool:
        specs = tuple(self._spec_from_entry(e, f"pool[{i}]")
                      for i, e in enumerate(self.pool))
        try:
            return AttackerPool(specs)
        except ValueError as exc:
            raise ConfigError(f"pool: {exc}") from exc

    def eval_specs(self) -> tuple[AttackSpec, ...]:
        return tuple(self._spec_from_entry(e, f"evaluation.attacks[{i}]")
                     for i, e in enumerate(self.evaluation.attacks))

    def analysis_specs(self) -> tuple[AttackSpec, ...]:
        return tuple(self._spec_from_entry(e, f"analysis.attacks[{i}]")
                     for i, e in enumerate(self.analysis.attacks))

    def meta_config(self) -> MetaConfig:
        m = self.meta
        return MetaConfig(epochs=m.epochs, batch_size=m.batch_size, alpha=m.alpha,
                          beta=m.beta, gamma=m.gamma, w_adversarial=m.w_adversarial,
                          w_cyclic=m.w_cyclic, w_label=m.w_label,
                          temperature=m.temperature, kl_smoothing=m.kl_smoothing,
                          second_order=m.second_order,
                          outer_optimizer=m.outer_optimizer,
                          student_init=m.student_init,
                          epsilon_ramp_epochs=m.epsilon_ramp_epochs,
                          seed=self.seed)

    def to_dict(self) -> dict:
        return asdict(self)


def config_hash(cfg: ExperimentConfig) -> str:
    """Digest of the fully resolved configuration."""
    canon = json.dumps(cfg.to_dict(), sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()


def _coerce(value: Any, annotation: Any, keypath: str, line: int | None) -> Any:
    where = f" at line {line}" if line else ""
    origin = get_origin(annotation)
    if origin is None and annotation in (int, float, bool, str):
        if annotation is bool:
            if not isinstance(value, bool):
                raise ConfigError(f"key '{keypath}'{where}: expected a boolean")
            return value
        if annotation is int:
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"key '{keypath}'{where}: expected an integer")
            return value
        if annotation is float:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"key '{keypath}'{where}: expected a number")
            return float(value)
        if not isinstance(value, str):
            raise ConfigError(f"key '{keypath}'{where}: expected a string")
        return value
    args = get_args(annotation)
    if origin is None and args == ():
        return value
    if type(None) in args:  # Optional[...]
        if value is None:
            return None
        inner = next(a for a in args if a is not type(None))
        return _coerce(value, inner, keypath, line)
    if origin in (list, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"key '{keypath}'{where}: expected a list")
        if args and args[0] in (int, float, bool, str):
            return [_coerce(v, args[0], f"{keypath}[{i}]", line)
                    for i, v in enumerate(value)]
        return list(value)
    return value


def _build_section(cls, raw: Any, keypath: str, line: int | None):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        where = f" at line {line}" if line else ""
        raise ConfigError(f"key '{keypath}'{where}: expected a mapping")
    lines = getattr(raw, "lines", {})
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            kline = lines.get(key)
            where = f" at line {kline}" if kline else ""
            raise ConfigError(f"unknown key '{keypath}.{key}'{where}")
    kwargs = {}
    for f in fields(cls):
        if f.name in raw:
            kwargs[f.name] = _coerce(raw[f.name], hints[f.name],
                                     f"{keypath}.{f.name}", lines.get(f.name))
    return cls(**kwargs)


_SECTIONS = {
    "dataset": DataSection,
    "model": ModelSection,
    "attacks": AttackDefaults,
    "teacher": TeacherSection,
    "meta": MetaSection,
    "evaluation": EvalSection,
    "analysis": AnalysisSection,
}


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Validate a parsed mapping into an ExperimentConfig."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    lines = getattr(raw, "lines", {})
    known = set(_SECTIONS) | {"seed", "output", "device", "pool"}
    for key in raw:
        if key not in known:
            kline = lines.get(key)
            where = f" at line {kline}" if kline else ""
            raise ConfigError(f"unknown key '{key}'{where}")
    cfg = ExperimentConfig(
        seed=_coerce(raw.get("seed", 0), int, "seed", lines.get("seed")),
        output=_coerce(raw.get("output", "runs/out"), str, "output", lines.get("output")),
        device=_coerce(raw.get("device", "cpu"), str, "device", lines.get("device")),
        pool=raw.get("pool", list(DEFAULT_POOL)),
        **{name: _build_section(cls, raw.get(name), name, lines.get(name))
           for name, cls in _SECTIONS.items()},
    )
    _validate(cfg, lines)
    return cfg


def _validate(cfg: ExperimentConfig, lines: dict) -> None:
    if not isinstance(cfg.pool, list):
        raise ConfigError("key 'pool': expected a list of attack entries")
    if not 0 < cfg.dataset.subsample_fraction <= 1:
        raise ConfigError("key 'dataset.subsample_fraction': must be in (0, 1]")
    if cfg.evaluation.mode not in ("white", "black"):
        raise ConfigError("key 'evaluation.mode': must be 'white' or 'black'")
    names = [e if isinstance(e, str) else e.get("name") for e in cfg.pool]
    canon = []
    for i, n in enumerate(names):
        if n is None:
            raise ConfigError(f"pool[{i}]: attack entry needs a 'name'")
        canon.append(str(n).upper() if str(n).lower() != "identity" else "identity")
    dupes = {n for n in canon if canon.count(n) > 1}
    if dupes:
        where = f" at line {lines['pool']}" if "pool" in lines else ""
        raise ConfigError(f"key 'pool'{where}: duplicate entries {sorted(dupes)}")
    # surface bad attack names and settings early
    cfg.attacker_pool()
    cfg.eval_specs()
    cfg.analysis_specs()
    try:
        cfg.meta_config()
    except ValueError as exc:
        raise ConfigError(f"section 'meta': {exc}") from exc
    if any(c < 0 for c in cfg.analysis.cutoffs):
        raise ConfigError("key 'analysis.cutoffs': must be >= 0")


def parse_config(path: Path | str) -> ExperimentConfig:
    """Parse and validate a config file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"missing config file: {path}")
    try:
        raw = yaml.load(path.read_text(), Loader=_Loader)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    try:
        return config_from_dict(raw)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
