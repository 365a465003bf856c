"""Dataset synthesis, IDX serialization, manifests, and batching."""
import gzip
import hashlib

import numpy as np
import pytest
import torch

from mid.data import (
    DataError,
    DatasetSpec,
    ImageBatch,
    builtin_spec,
    ensure_dataset,
    load_dataset,
    read_idx,
    subsample,
    synthesize_digits,
    write_idx,
)


def test_builtin_specs_cover_known_names(tmp_path):
    for name in ("mnist", "fashion-mnist", "synthetic-digits"):
        spec = builtin_spec(name, tmp_path)
        assert spec.name == name
        assert spec.image_shape == (1, 28, 28)
        assert spec.num_classes == 10


def test_builtin_spec_rejects_unknown(tmp_path):
    with pytest.raises(DataError):
        builtin_spec("imagenet", tmp_path)


def test_idx_round_trip(tmp_path):
    arr = (np.arange(2 * 5 * 4) % 251).astype(np.uint8).reshape(2, 5, 4)
    path = tmp_path / "t-images-idx3-ubyte.gz"
    write_idx(path, arr)
    back = read_idx(path)
    assert back.dtype == np.uint8
    assert np.array_equal(back, arr)


def test_idx_bytes_are_deterministic(tmp_path):
    arr = np.full((3, 4), 7, dtype=np.uint8)
    write_idx(tmp_path / "a.gz", arr)
    write_idx(tmp_path / "b.gz", arr)
    assert (tmp_path / "a.gz").read_bytes() == (tmp_path / "b.gz").read_bytes()


def test_synthesis_is_deterministic(tmp_path):
    spec = DatasetSpec("synthetic-digits", tmp_path / "d1", 10, (1, 28, 28), 200, 80)
    other = DatasetSpec("synthetic-digits", tmp_path / "d2", 10, (1, 28, 28), 200, 80)
    synthesize_digits(spec, seed=5)
    synthesize_digits(other, seed=5)
    for name in ("train-images-idx3-ubyte.gz", "t10k-images-idx3-ubyte.gz"):
        a = hashlib.sha256((spec.source_path / name).read_bytes()).hexdigest()
        b = hashlib.sha256((other.source_path / name).read_bytes()).hexdigest()
        assert a == b


def test_synthesized_labels_are_balanced(tmp_path):
    spec = DatasetSpec("synthetic-digits", tmp_path, 10, (1, 28, 28), 500, 100)
    ds = ensure_dataset(spec, seed=1)
    _, y = ds.tensors("train")
    counts = torch.bincount(y, minlength=10)
    assert int(counts.min()) == 50 and int(counts.max()) == 50


def test_load_verifies_checksums(tmp_path):
    spec = DatasetSpec("synthetic-digits", tmp_path, 10, (1, 28, 28), 100, 40)
    ensure_dataset(spec, seed=0)
    victim = tmp_path / "train-labels-idx1-ubyte.gz"
    labels = read_idx(victim).copy()
    labels[0] = (labels[0] + 1) % 10
    write_idx(victim, labels)
    with pytest.raises(DataError, match="train-labels"):
        load_dataset(spec)


def test_load_missing_archive_names_file(tmp_path):
    spec = DatasetSpec("synthetic-digits", tmp_path, 10, (1, 28, 28), 100, 40)
    ensure_dataset(spec, seed=0)
    (tmp_path / "t10k-images-idx3-ubyte.gz").unlink()
    with pytest.raises(DataError, match="t10k-images"):
        load_dataset(spec)


def test_pixels_are_unit_range(full_dataset):
    x, _ = full_dataset.tensors("train")
    assert float(x.min()) >= 0.0
    assert float(x.max()) <= 1.0
    assert x.shape[1:] == (1, 28, 28)


def test_batches_cover_split_once(full_dataset):
    seen = 0
    for batch in full_dataset.batches("test", 512):
        assert isinstance(batch, ImageBatch)
        seen += len(batch)
    assert seen == full_dataset.split_size("test")


def test_shuffled_batches_are_seeded(full_dataset):
    a = next(full_dataset.batches("train", 32, shuffle=True, seed=9))
    b = next(full_dataset.batches("train", 32, shuffle=True, seed=9))
    c = next(full_dataset.batches("train", 32, shuffle=True, seed=10))
    assert torch.equal(a.images, b.images) and torch.equal(a.labels, b.labels)
    assert not torch.equal(a.labels, c.labels) or not torch.equal(a.images, c.images)


def test_batches_limit(full_dataset):
    total = sum(len(b) for b in full_dataset.batches("train", 64, limit=150))
    assert total == 150


def test_subsample_is_stratified(full_dataset):
    ds = subsample(full_dataset, 0.05, seed=0)
    _, y = ds.tensors("train")
    counts = torch.bincount(y, minlength=10)
    assert int(counts.min()) >= 1
    assert abs(int(counts.max()) - int(counts.min())) <= 1
    # test split is untouched
    assert ds.split_size("test") == full_dataset.split_size("test")


def test_subsample_full_fraction_is_identity(full_dataset):
    ds = subsample(full_dataset, 1.0, seed=0)
    assert ds.split_size("train") == full_dataset.split_size("train")


def test_subsample_rejects_bad_fraction(full_dataset):
    with pytest.raises(ValueError):
        subsample(full_dataset, 0.0, seed=0)
    with pytest.raises(ValueError):
        subsample(full_dataset, 1.5, seed=0)


def test_image_batch_validates_range():
    bad = torch.full((2, 1, 4, 4), 1.5)
    with pytest.raises(ValueError):
        ImageBatch(bad, torch.zeros(2, dtype=torch.long))


def test_image_batch_validates_rank():
    with pytest.raises(ValueError):
        ImageBatch(torch.zeros(4, 4), torch.zeros(4, dtype=torch.long))
