"""End-to-end command-line pipeline on a miniature configuration."""
from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from mid.cli import main

CONFIG_TEMPLATE = """\
seed: 0
output: {output}
dataset:
  path: {data}
  subsample_fraction: 0.05
teacher:
  epochs: 1
  batch_size: 128
meta:
  epochs: 1
  batch_size: 64
  outer_optimizer: rmsprop
  epsilon_ramp_epochs: 1
evaluation:
  attacks: [FGSM_N]
  max_samples: 128
  substitute_epochs: 1
analysis:
  cutoffs: [0, 8]
  attacks: [FGSM_N]
  max_samples: 64
  num_gradient_maps: 4
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, data_root, full_dataset):
    """Run every pipeline command once against a shared output directory."""
    out = tmp_path_factory.mktemp("cli-run")
    config = out / "config.yaml"
    config.write_text(CONFIG_TEMPLATE.format(output=out / "run", data=data_root))
    codes = {}
    for command in ("train-teacher", "train-mid", "evaluate", "analyze-frequency",
                    "analyze-sparsity", "emit-gradients", "export-features"):
        codes[command] = main([command, "--config", str(config)])
    return {"out": out / "run", "config": config, "codes": codes}


def test_pipeline_exit_codes(pipeline):
    assert all(code == 0 for code in pipeline["codes"].values()), pipeline["codes"]


def test_teacher_artifacts(pipeline):
    out = pipeline["out"]
    assert (out / "teacher.npz").exists()
    payload = json.loads((out / "teacher_history.json").read_text())
    assert len(payload["history"]) == 1
    assert payload["metadata"]["kind"] == "teacher"
    assert "config_hash" in payload["metadata"]


def test_student_artifacts(pipeline):
    out = pipeline["out"]
    assert (out / "student.npz").exists()
    lines = (out / "mid_history.jsonl").read_text().splitlines()
    assert len(lines) == 1
    entry = json.loads(lines[0])
    assert {"epoch", "meta_train_loss", "meta_test_loss", "sparsity_index",
            "gradient_alignment", "clean_accuracy"} <= set(entry)


def test_evaluation_artifacts(pipeline):
    out = pipeline["out"]
    lines = (out / "evaluation_white.csv").read_text().splitlines()
    assert lines[0] == "attack,targeted,mode,known,accuracy"
    attacks = [line.split(",")[0] for line in lines[1:]]
    assert attacks == ["identity", "FGSM_N"]
    payload = json.loads((out / "evaluation_white.json").read_text())
    assert 0.0 <= payload["average_with_benign"] <= 100.0


def test_frequency_artifacts(pipeline):
    lines = (pipeline["out"] / "frequency_curve.csv").read_text().splitlines()
    assert lines[0] == "R,band,attack,accuracy"
    assert len(lines) == 1 + 2 * 2 * 2


def test_sparsity_artifacts(pipeline):
    lines = (pipeline["out"] / "sparsity.csv").read_text().splitlines()
    assert lines[0] == "epoch,index"
    assert len(lines) == 2
    epoch, index = lines[1].split(",")
    assert epoch == "1" and float(index) > 0


def test_gradient_artifacts(pipeline):
    data = np.load(pipeline["out"] / "gradient_maps.npz")
    assert data["maps"].shape[0] == 4
    assert data["maps"].min() >= 0.0 and data["maps"].max() <= 1.0


def test_feature_artifacts(pipeline):
    with open(pipeline["out"] / "features.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:3] == ["sample", "source", "label"]
    assert {r[1] for r in rows[1:]} == {"identity", "FGSM_N"}


def test_evaluate_deterministic(pipeline):
    out = pipeline["out"]
    first = (out / "evaluation_white.csv").read_bytes()
    assert main(["evaluate", "--config", str(pipeline["config"])]) == 0
    assert (out / "evaluation_white.csv").read_bytes() == first


def test_black_box_evaluation(pipeline, tmp_path):
    config = tmp_path / "black.yaml"
    text = pipeline["config"].read_text().replace(
        "evaluation:\n", "evaluation:\n  mode: black\n")
    config.write_text(text)
    assert main(["evaluate", "--config", str(config)]) == 0
    lines = (pipeline["out"] / "evaluation_black.csv").read_text().splitlines()
    assert lines[1].split(",")[2] == "black"


def test_seed_override_changes_hash(pipeline, tmp_path):
    out = pipeline["out"]
    base = json.loads((out / "teacher_history.json").read_text())
    override = tmp_path / "seed-run"
    code = main(["train-teacher", "--config", str(pipeline["config"]),
                 "--seed", "5", "--output", str(override)])
    assert code == 0
    other = json.loads((override / "teacher_history.json").read_text())
    assert other["metadata"]["global_seed"] == 5
    assert other["metadata"]["config_hash"] != base["metadata"]["config_hash"]


def test_missing_config_exits_2(tmp_path):
    assert main(["train-teacher", "--config", str(tmp_path / "ghost.yaml")]) == 2


def test_invalid_config_exits_2(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("pool: [PGD_N, PGD_N]\n")
    assert main(["evaluate", "--config", str(bad)]) == 2


def test_evaluate_without_checkpoint_exits_2(tmp_path, data_root):
    config = tmp_path / "empty.yaml"
    config.write_text(CONFIG_TEMPLATE.format(output=tmp_path / "none", data=data_root))
    assert main(["evaluate", "--config", str(config)]) == 2


def test_train_mid_requires_teacher(tmp_path, data_root):
    config = tmp_path / "fresh.yaml"
    config.write_text(CONFIG_TEMPLATE.format(output=tmp_path / "fresh-run", data=data_root))
    assert main(["train-mid", "--config", str(config)]) == 2
