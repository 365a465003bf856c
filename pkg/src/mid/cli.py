"""Command-line entry points.

Every command takes --config/--seed/--output/--device, loads or generates
the dataset, and writes its artifacts (checkpoints, histories, CSV/JSON
reports) under the output directory. Artifacts embed the resolved config
hash and the derived per-stage seeds.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch

from . import analysis, evaluation
from .attacks import AttackSpec
from .config import ConfigError, ExperimentConfig, config_hash, parse_config
from .data import Dataset, DataError, ensure_dataset, subsample
from .evaluation import ClassifierConfig, train_substitute
from .meta_defense import train_mid
from .models import (ComposedClassifier, EncoderSpec, StudentEncoder, TeacherModel,
                     load_checkpoint, save_checkpoint)
from .seeding import derive_seed
from .teacher import TeacherConfig, train_teacher

COMMANDS = ("train-teacher", "train-mid", "evaluate", "analyze-frequency",
            "analyze-sparsity", "emit-gradients", "export-features", "cross-validate")


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", type=Path, default=None, help="config file path")
    sub.add_argument("--seed", type=int, default=None, help="override the global seed")
    sub.add_argument("--output", type=Path, default=None, help="override the output directory")
    sub.add_argument("--device", type=str, default=None, help="override the device name")


def _load_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.output is not None:
        cfg.output = str(args.output)
    if args.device is not None:
        cfg.device = args.device
    return cfg


def _prepare(cfg: ExperimentConfig) -> tuple[Dataset, Path]:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    dataset = ensure_dataset(cfg.dataset_spec())
    dataset = subsample(dataset, cfg.dataset.subsample_fraction,
                        derive_seed(cfg.seed, "subsample"))
    return dataset, out


def _artifact_meta(cfg: ExperimentConfig, stage: str) -> dict:
    return {
        "config_hash": config_hash(cfg),
        "global_seed": cfg.seed,
        "stage_seed": derive_seed(cfg.seed, stage),
        "dataset": cfg.dataset.name,
    }


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _teacher_from_checkpoint(path: Path) -> TeacherModel:
    state, meta = load_checkpoint(path)
    spec = EncoderSpec.from_dict(meta["encoder_spec"])
    model = TeacherModel(spec, int(meta["num_classes"]))
    model.load_state_dict(state)
    return model


def _resolve_eval_model(cfg: ExperimentConfig, out: Path):
    """Locate the model to evaluate: an explicit checkpoint, else the
    distilled student, else the teacher. Returns (model, encoder,
    training pool names, checkpoint metadata)."""
    explicit = cfg.evaluation.checkpoint
    if explicit:
        ckpt = Path(explicit)
    elif (out / "student.npz").exists():
        ckpt = out / "student.npz"
    elif (out / "teacher.npz").exists():
        ckpt = out / "teacher.npz"
    else:
        raise FileNotFoundError(
            f"no checkpoint under {out}; run train-teacher/train-mid first")
    state, meta = load_checkpoint(ckpt)
    kind = meta.get("kind")
    if kind == "student":
        teacher_path = Path(meta.get("teacher_checkpoint", out / "teacher.npz"))
        if not teacher_path.exists():
            teacher_path = out / "teacher.npz"
        teacher = _teacher_from_checkpoint(teacher_path).freeze()
        student = StudentEncoder(EncoderSpec.from_dict(meta["encoder_spec"]))
        student.load_state_dict(state)
        student.eval()
        model = ComposedClassifier(student, teacher.head)
        pool = list(meta.get("training_pool", []))
    elif kind == "teacher":
        teacher = _teacher_from_checkpoint(ckpt)
        model = ComposedClassifier(teacher.encoder, teacher.head)
        pool = []
    else:
        raise ValueError(f"cannot evaluate checkpoint kind '{kind}' at {ckpt}")
    model.eval()
    meta["checkpoint_path"] = str(ckpt)
    return model, model.encoder, pool, meta


def cmd_train_teacher(cfg: ExperimentConfig) -> int:
    dataset, out = _prepare(cfg)
    tcfg = TeacherConfig(epochs=cfg.teacher.epochs, batch_size=cfg.teacher.batch_size,
                         lr=cfg.teacher.lr, optimizer=cfg.teacher.optimizer,
                         reconstruction_norm=cfg.teacher.reconstruction_norm,
                         seed=cfg.seed)
    model, history = train_teacher(dataset, cfg.encoder_spec(), tcfg)
    for entry in history:
        print(f"teacher epoch {entry['epoch']}/{tcfg.epochs}: "
              f"loss {entry['loss']:.4f} acc {entry['clean_accuracy']:.2f}% "
              f"rec-mae {entry['reconstruction_mae']:.4f}")
    meta = _artifact_meta(cfg, "teacher")
    meta.update({"kind": "teacher", "encoder_spec": model.spec.to_dict(),
                 "num_classes": model.num_classes, "epochs": tcfg.epochs,
                 "reconstruction_norm": tcfg.reconstruction_norm})
    save_checkpoint(out / "teacher.npz", model.state_dict(), meta)
    _write_json(out / "teacher_history.json", {"history": history, "metadata": meta})
    print(f"saved {out / 'teacher.npz'}")
    return 0


def cmd_train_mid(cfg: ExperimentConfig) -> int:
    dataset, out = _prepare(cfg)
    teacher_path = out / "teacher.npz"
    if not teacher_path.exists():
        raise FileNotFoundError(f"missing teacher checkpoint {teacher_path}; "
                                "run train-teacher first")
    teacher = _teacher_from_checkpoint(teacher_path).freeze()
    student = StudentEncoder(teacher.spec, seed=derive_seed(cfg.seed, "student-init"))
    pool = cfg.attacker_pool()
    student, history = train_mid(teacher, student, dataset, pool, cfg.meta_config())
    for entry in history:
        print(f"mid epoch {entry['epoch']}/{cfg.meta.epochs}: "
              f"train {entry['meta_train_loss']:.4f} test {entry['meta_test_loss']:.4f} "
              f"clean {entry['clean_accuracy']:.2f}% align {entry['gradient_alignment']:.3f}")
    meta = _artifact_meta(cfg, "mid")
    meta.update({"kind": "student", "encoder_spec": teacher.spec.to_dict(),
                 "training_pool": list(pool.names), "epochs": cfg.meta.epochs,
                 "teacher_checkpoint": str(teacher_path)})
    save_checkpoint(out / "student.npz", student.state_dict(), meta)
    with open(out / "mid_history.jsonl", "w") as fh:
        for entry in history:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    print(f"saved {out / 'student.npz'}")
    return 0


def cmd_evaluate(cfg: ExperimentConfig) -> int:
    dataset, out = _prepare(cfg)
    model, _, pool_names, ckpt_meta = _resolve_eval_model(cfg, out)
    mode = cfg.evaluation.mode
    substitute = None
    if mode == "black":
        sub_cfg = ClassifierConfig(epochs=cfg.evaluation.substitute_epochs,
                                   batch_size=cfg.teacher.batch_size,
                                   lr=cfg.teacher.lr, optimizer=cfg.teacher.optimizer,
                                   seed=cfg.seed)
        substitute, _ = train_substitute(dataset, cfg.encoder_spec(), sub_cfg)
    report = evaluation.evaluate_robustness(
        model, dataset, cfg.eval_specs(), mode=mode, substitute=substitute,
        training_pool=pool_names, seed=cfg.seed,
        batch_size=cfg.evaluation.batch_size, max_samples=cfg.evaluation.max_samples,
        metadata={"config_hash": config_hash(cfg),
                  "checkpoint": ckpt_meta.get("checkpoint_path"),
                  "parameter_hash": ckpt_meta.get("parameter_hash")})
    for row in report.rows:
        tag = "known" if row.known else "unknown"
        print(f"{row.attack:<10} {row.mode}-box {tag:<8} acc {row.accuracy:.2f}%")
    print(f"average (with benign)    {report.average(include_benign=True):.2f}%")
    print(f"average (without benign) {report.average(include_benign=False):.2f}%")
    report.to_csv(out / f"evaluation_{mode}.csv")
    report.to_json(out / f"evaluation_{mode}.json")
    print(f"saved {out / f'evaluation_{mode}.csv'}")
    return 0


def cmd_analyze_frequency(cfg: ExperimentConfig) -> int:
    dataset, out = _prepare(cfg)
    model, _, _, _ = _resolve_eval_model(cfg, out)
    curve = analysis.frequency_robustness_curve(
        model, dataset, cfg.analysis.cutoffs, cfg.analysis_specs(),
        seed=cfg.seed, max_samples=cfg.analysis.max_samples)
    curve.to_csv(out / "frequency_curve.csv")
    print(f"saved {out / 'frequency_curve.csv'} ({len(curve.rows)} rows)")
    return 0


def cmd_analyze_sparsity(cfg: ExperimentConfig) -> int:
    out = Path(cfg.output)
    history_path = Path(cfg.analysis.history or out / "mid_history.jsonl")
    if not history_path.exists():
        raise FileNotFoundError(f"missing training history {history_path}")
    rows = [json.loads(line) for line in history_path.read_text().splitlines() if line]
    with open(out / "sparsity.csv", "w", newline="") as fh:
        fh.write("epoch,index\n")
        for row in rows:
            fh.write(f"{row['epoch']},{row['sparsity_index']:.6f}\n")
    print(f"saved {out / 'sparsity.csv'} ({len(rows)} epochs)")
    return 0


def cmd_emit_gradients(cfg: ExperimentConfig) -> int:
    dataset, out = _prepare(cfg)
    model, _, _, ckpt_meta = _resolve_eval_model(cfg, out)
    batch = next(dataset.batches("test", cfg.analysis.num_gradient_maps))
    maps = analysis.input_gradient_map(model, batch)
    analysis.save_gradient_maps(out / "gradient_maps.npz", maps,
                                {"config_hash": config_hash(cfg),
                                 "checkpoint": ckpt_meta.get("checkpoint_path")})
    print(f"saved {out / 'gradient_maps.npz'} ({maps.shape[0]} maps)")
    return 0


def cmd_export_features(cfg: ExperimentConfig) -> int:
    dataset, out = _prepare(cfg)
    model, encoder, _, _ = _resolve_eval_model(cfg, out)
    batch = next(dataset.batches("test", cfg.analysis.max_samples))
    named = [("identity", batch)]
    for spec in cfg.analysis_specs():
        from .seeding import make_generator
        rng = make_generator(cfg.seed, f"features-{spec.canonical_name}")
        from .attacks import generate
        adv = generate(spec, model, batch, rng)
        named.append((spec.canonical_name, adv.as_image_batch()))
    analysis.export_features(encoder, named, out / "features.csv")
    print(f"saved {out / 'features.csv'}")
    return 0


def cmd_cross_validate(cfg: ExperimentConfig) -> int:
    dataset, out = _prepare(cfg)
    teacher_path = out / "teacher.npz"
    if not teacher_path.exists():
        raise FileNotFoundError(f"missing teacher checkpoint {teacher_path}; "
                                "run train-teacher first")
    teacher = _teacher_from_checkpoint(teacher_path).freeze()

    def builder(seed: int) -> StudentEncoder:
        return StudentEncoder(teacher.spec, seed=seed)

    rounds = evaluation.cross_validation_protocol(
        teacher, dataset, cfg.attacker_pool(), cfg.meta_config(),
        student_builder=builder, eval_batch_size=cfg.evaluation.batch_size,
        max_samples=cfg.evaluation.max_samples)
    with open(out / "cross_validation.csv", "w", newline="") as fh:
        fh.write("holdout,accuracy,clean_accuracy\n")
        for r in rounds:
            fh.write(f"{r['holdout']},{r['accuracy']:.4f},{r['clean_accuracy']:.4f}\n")
    _write_json(out / "cross_validation.json",
                {"rounds": rounds, "config_hash": config_hash(cfg)})
    for r in rounds:
        print(f"holdout {r['holdout']:<8} unknown acc {r['accuracy']:.2f}% "
              f"clean {r['clean_accuracy']:.2f}%")
    print(f"saved {out / 'cross_validation.csv'}")
    return 0


_HANDLERS = {
    "train-teacher": cmd_train_teacher,
    "train-mid": cmd_train_mid,
    "evaluate": cmd_evaluate,
    "analyze-frequency": cmd_analyze_frequency,
    "analyze-sparsity": cmd_analyze_sparsity,
    "emit-gradients": cmd_emit_gradients,
    "export-features": cmd_export_features,
    "cross-validate": cmd_cross_validate,
}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="mid",
        description="Train and evaluate attack-invariant robust encoders.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        _add_common(sub.add_parser(name))
    args = parser.parse_args(argv)
    torch.manual_seed(0)  # library calls reseed per stage; this pins the rest
    try:
        cfg = _load_config(args)
        return _HANDLERS[args.command](cfg)
    except (ConfigError, DataError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
