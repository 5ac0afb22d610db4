import struct

import numpy as np
import pytest

from app.exceptions import VersionError
from app.models.config import with_overrides
from app.services import tensor_core as tc
from app.services.params import (
    CHECKPOINT_MAGIC,
    ForwardContext,
    ParamInitializer,
    accumulate,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
)


def test_truncated_normal_stays_within_two_sigma():
    init = ParamInitializer(tc.make_rng(0), np.float64, std=0.5)
    init.weight("w", (200, 50))
    assert np.abs(init.params["w"]).max() <= 1.0
    assert init.params["w"].dtype == np.float64


def test_batch_norm_registers_buffers():
    init = ParamInitializer(tc.make_rng(0), np.float32)
    init.batch_norm("bn", 4)
    assert set(init.params) == {"bn.weight", "bn.bias"}
    np.testing.assert_array_equal(init.buffers["bn.running_var"], 1.0)


def test_accumulate_sums():
    grads = {}
    accumulate(grads, "w", np.ones(2))
    accumulate(grads, "w", np.ones(2))
    np.testing.assert_array_equal(grads["w"], [2.0, 2.0])


def test_eval_context_records_nothing():
    ctx = ForwardContext(buffers={}, training=False)
    ctx.record_stats("bn", (np.zeros(1), np.ones(1)))
    assert ctx.buffer_updates == {}


def test_count_parameters():
    assert count_parameters({"a": np.zeros((2, 3)), "b": np.zeros(4)}) == 10


def test_checkpoint_round_trip(tmp_path, micro, micro_params):
    params, buffers = micro_params
    save_checkpoint(tmp_path / "ckpt.bin", micro, params, buffers)
    loaded = load_checkpoint(tmp_path / "ckpt.bin")
    assert loaded.config == micro
    assert list(loaded.params) == list(params)
    for name in params:
        np.testing.assert_array_equal(loaded.params[name], params[name])
        assert loaded.params[name].dtype == np.float64
    assert set(loaded.buffers) == set(buffers)


def test_checkpoint_f32(tmp_path, micro):
    params = {"w": np.arange(6, dtype=np.float32).reshape(2, 3)}
    save_checkpoint(tmp_path / "c.bin", micro, params, {})
    assert load_checkpoint(tmp_path / "c.bin").params["w"].dtype == np.float32


def test_tampered_config_is_refused(tmp_path, micro):
    save_checkpoint(tmp_path / "c.bin", micro, {"w": np.zeros(2)}, {})
    raw = bytearray((tmp_path / "c.bin").read_bytes())
    at = raw.find(b'"seed":0')
    raw[at:at + 8] = b'"seed":1'
    (tmp_path / "c.bin").write_bytes(bytes(raw))
    with pytest.raises(VersionError):
        load_checkpoint(tmp_path / "c.bin")


def test_wrong_version(tmp_path, micro):
    save_checkpoint(tmp_path / "c.bin", micro, {"w": np.zeros(2)}, {})
    raw = bytearray((tmp_path / "c.bin").read_bytes())
    raw[4:8] = struct.pack("<I", 2)
    (tmp_path / "c.bin").write_bytes(bytes(raw))
    with pytest.raises(VersionError):
        load_checkpoint(tmp_path / "c.bin")


def test_not_a_checkpoint(tmp_path):
    (tmp_path / "c.bin").write_bytes(b"MSFD" + bytes(8))
    with pytest.raises(VersionError):
        load_checkpoint(tmp_path / "c.bin")
    assert CHECKPOINT_MAGIC == b"MSFC"


def test_different_configs_hash_differently(tmp_path, micro):
    save_checkpoint(tmp_path / "c.bin", with_overrides(micro, seed=3), {"w": np.zeros(1)}, {})
    assert load_checkpoint(tmp_path / "c.bin").config.seed == 3
