"""Checkpoint format: round trips, validation, logit replay."""

import struct

import numpy as np
import pytest

from icolab.checkpoint import (
    CheckpointError,
    load_checkpoint,
    load_model_weights,
    read_header,
    save_checkpoint,
    save_model_weights,
)
from icolab.model import ModelConfig, forward_lm, init_weights
from icolab.rng import RngStream


def small_weights(seed=1):
    cfg = ModelConfig(vocab_size=12, d_model=16, n_layers=2, n_heads=2, max_seq_len=64)
    return init_weights(cfg, RngStream(seed).split("w")), cfg


class TestRoundTrip:
    def test_save_load_save_is_byte_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {"a": rng.normal(size=(3, 4)).astype(np.float32),
                   "b": rng.normal(size=(7,)).astype(np.float32)}
        p1, p2 = tmp_path / "x.ckpt", tmp_path / "y.ckpt"
        save_checkpoint(p1, tensors, meta={"note": "t"})
        loaded = load_checkpoint(p1)
        save_checkpoint(p2, loaded["tensors"], meta=loaded["meta"])
        assert p1.read_bytes() == p2.read_bytes()
        for name in tensors:
            assert np.array_equal(loaded["tensors"][name], tensors[name])

    def test_model_weights_reload_replays_logits(self, tmp_path):
        weights, cfg = small_weights()
        path = tmp_path / "model.ckpt"
        save_model_weights(path, weights)
        back = load_model_weights(path)
        probe = np.array([1, 2, 3, 4])
        a = forward_lm(weights, cfg, probe).data
        b = forward_lm(back, back.config, probe).data
        assert np.array_equal(a, b)

    def test_header_lists_tensors_in_order(self, tmp_path):
        weights, _ = small_weights()
        path = tmp_path / "model.ckpt"
        save_model_weights(path, weights)
        header = read_header(path)
        names = [e["name"] for e in header["tensors"]]
        assert names[0] == "embedding" and names[-1] == "unembedding"
        offsets = [e["offset"] for e in header["tensors"]]
        assert offsets == sorted(offsets)


class TestValidation:
    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "x.ckpt"
        save_checkpoint(path, {"a": np.zeros(3, dtype=np.float32)})
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_version_mismatch_rejected(self, tmp_path):
        path = tmp_path / "x.ckpt"
        save_checkpoint(path, {"a": np.zeros(3, dtype=np.float32)})
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "x.ckpt"
        save_checkpoint(path, {"a": np.zeros(5, dtype=np.float32)})
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(CheckpointError, match="payload"):
            load_checkpoint(path)

    def test_missing_config_rejected_for_weights(self, tmp_path):
        path = tmp_path / "x.ckpt"
        save_checkpoint(path, {"a": np.zeros(3, dtype=np.float32)})
        with pytest.raises(CheckpointError, match="model config"):
            load_model_weights(path)
