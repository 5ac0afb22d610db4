import numpy as np
import pytest

from app.exceptions import TensorIndexError, VersionError
from app.services.dumps import (
    dump_attention,
    read_attention_dump,
    read_selection_dump,
)


@pytest.fixture
def dumped(trained_run, data_dir, tmp_path):
    out, _ = trained_run
    return dump_attention(out / "checkpoint.bin", data_dir / "eval.bin", tmp_path, sample=3, query_stage=4)


def test_query_weights_sum_to_one(dumped, trained_run):
    _, config = trained_run
    dump = read_attention_dump(dumped[0])
    assert (dump.sample, dump.block, dump.head) == (3, 0, -1)
    np.testing.assert_allclose(dump.records["weight"].sum(), 1.0, atol=1e-5)
    assert set(dump.records["query_row"].tolist()) == {config.rows(4) - 1}
    assert set(dump.records["key_stage"].tolist()) == set(config.msps_stages)


def test_selection_indices_in_range(dumped, trained_run):
    _, config = trained_run
    dump = read_selection_dump(dumped[1])
    assert dump.stages == list(config.msps_stages)
    assert dump.merge_factor == config.merge_factor
    for s in dump.stages:
        assert len(dump.indices[s]) == config.k_schedule[s - 1]
        assert len(dump.scores[s]) == config.merged_count(s)
        assert dump.indices[s].max() < config.merged_count(s)


def test_text_sidecars(dumped):
    for path in dumped:
        assert path.with_suffix(".txt").read_text().strip()


def test_redump_is_byte_identical(dumped, trained_run, data_dir, tmp_path):
    out, _ = trained_run
    again = dump_attention(out / "checkpoint.bin", data_dir / "eval.bin", tmp_path / "again", sample=3, query_stage=4)
    for first, second in zip(dumped, again):
        assert first.read_bytes() == second.read_bytes()


def test_single_head_and_explicit_row(trained_run, data_dir, tmp_path):
    out, _ = trained_run
    path, _ = dump_attention(out / "checkpoint.bin", data_dir / "eval.bin", tmp_path, 0, 2, query_row=1, head=0)
    dump = read_attention_dump(path)
    assert dump.head == 0
    assert set(dump.records["query_stage"].tolist()) == {2}
    assert set(dump.records["query_row"].tolist()) == {1}


def test_bad_queries(trained_run, data_dir, tmp_path):
    out, _ = trained_run
    checkpoint, data = out / "checkpoint.bin", data_dir / "eval.bin"
    with pytest.raises(TensorIndexError):
        dump_attention(checkpoint, data, tmp_path, sample=1000, query_stage=4)
    with pytest.raises(TensorIndexError):
        dump_attention(checkpoint, data, tmp_path, sample=0, query_stage=4, block=1)
    with pytest.raises(TensorIndexError):
        dump_attention(checkpoint, data, tmp_path, sample=0, query_stage=4, query_row=10)


def test_wrong_magic(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"MSFS" + bytes(40))
    with pytest.raises(VersionError):
        read_attention_dump(tmp_path / "x.bin")
