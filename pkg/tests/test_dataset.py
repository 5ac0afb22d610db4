import json

import numpy as np
import pytest

from app.exceptions import ConfigError, DatasetError, VersionError
from app.services.dataset import (
    HEADER,
    class_signature,
    generate_dataset,
    generate_splits,
    linear_probe_accuracy,
    load_dataset,
    write_dataset,
)


def test_same_seed_gives_identical_files(tmp_path):
    for name in ("a", "b"):
        write_dataset(tmp_path / f"{name}.bin", generate_dataset(4, 3, 64, seed=11))
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert (tmp_path / "a.json").read_text() == (tmp_path / "b.json").read_text()


def test_index_counts_records(tmp_path):
    index_path = write_dataset(tmp_path / "train.bin", generate_dataset(4, 64, 32, seed=0))
    index = json.loads(index_path.read_text())
    assert index["count"] == 256
    assert len(index["offsets"]) == 256
    assert index["offsets"][1] - index["offsets"][0] == index["record_size"]
    assert index["offsets"][0] == HEADER.size


def test_round_trip(tmp_path):
    samples = generate_dataset(3, 2, 32, seed=4)
    write_dataset(tmp_path / "d.bin", samples)
    data = load_dataset(tmp_path / "d.bin")
    assert len(data) == 6
    assert data.labels.tolist() == [0, 1, 2, 0, 1, 2]
    np.testing.assert_array_equal(data.images[4], samples[4].image)
    assert tuple(data.bboxes[2]) == samples[2].bbox


def test_boxes_inside_image():
    for sample in generate_dataset(4, 10, 64, seed=2):
        x, y, w, h = sample.bbox
        assert w == h and 64 // 8 <= w <= int(64 / 1.5)
        assert x + w <= 64 and y + h <= 64


def test_class_signatures_differ():
    sigs = [class_signature(label, 4) for label in range(4)]
    colors = {tuple(np.round(s["color"], 3)) for s in sigs}
    assert len(colors) == 4


def test_mean_colour_is_linearly_separable():
    samples = generate_dataset(4, 16, 64, seed=9)
    images = np.stack([s.image for s in samples])
    labels = np.array([s.label for s in samples])
    assert linear_probe_accuracy(images, labels, 4) >= 0.9


def test_splits_use_distinct_seeds(tmp_path):
    train_path, eval_path, _ = generate_splits(tmp_path, 4, 2, 32, seed=0, eval_per_class=2)
    train, held_out = load_dataset(train_path), load_dataset(eval_path)
    assert not np.array_equal(train.images, held_out.images)


def test_rejects_bad_image_size():
    with pytest.raises(ConfigError):
        generate_dataset(4, 1, 60, seed=0)


def test_rejects_empty(tmp_path):
    with pytest.raises(DatasetError):
        write_dataset(tmp_path / "empty.bin", [])


def test_load_errors(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "missing.bin")
    (tmp_path / "junk.bin").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "junk.bin")
    (tmp_path / "future.bin").write_bytes(HEADER.pack(b"MSFD", 99, 0, 1, 1, 3))
    with pytest.raises(VersionError):
        load_dataset(tmp_path / "future.bin")


def test_truncated_container(tmp_path):
    write_dataset(tmp_path / "d.bin", generate_dataset(2, 1, 32, seed=0))
    raw = (tmp_path / "d.bin").read_bytes()
    (tmp_path / "d.bin").write_bytes(raw[:-8])
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "d.bin")
