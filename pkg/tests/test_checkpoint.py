import hashlib
import json
import struct

import numpy as np
import pytest
import torch

from hfsda import checkpoint as ckpt
from hfsda.errors import CorruptCheckpointError, IncompatibleCheckpointError
from hfsda.model import HFSDA, ModelConfig, OdconvConfig
from hfsda.ssl_bridge import SslEncoderSpec

SMALL = ModelConfig(dim=16, heads=2, spec_dim=16, n_blocks=1,
                    odconv=OdconvConfig(channels=2, n_kernels=2), ssl=SslEncoderSpec(output_dim=16))


@pytest.fixture
def saved(tmp_path):
    tensors = {"a": torch.arange(6, dtype=torch.float32).reshape(2, 3) / 7,
               "b": torch.tensor(3.5, dtype=torch.float64),
               "c": torch.tensor([1, 2, 255], dtype=torch.uint8)}
    path = ckpt.save_checkpoint(tmp_path / "x.ckpt", tensors, epoch=4, model_cfg=SMALL,
                                meta={"note": "hi"})
    return path, tensors


class TestContainer:
    def test_round_trip_exact(self, saved):
        path, tensors = saved
        state = ckpt.load_checkpoint(path, SMALL)
        assert state.epoch == 4
        assert state.header["meta"] == {"note": "hi"}
        for name, t in tensors.items():
            got = state.tensor(name)
            assert got.dtype == t.dtype and torch.equal(got, t)

    def test_layout_parsed_independently(self, saved):
        path, tensors = saved
        raw = path.read_bytes()
        assert raw[:8] == b"HFSDACKP"
        version, hlen = struct.unpack("<II", raw[8:16])
        assert version == 1
        header = json.loads(raw[16:16 + hlen])
        assert header["model_cfg_hash"] == hashlib.sha256(
            json.dumps(SMALL.to_dict(), sort_keys=True, separators=(",", ":")).encode()).hexdigest()
        assert struct.unpack("<I", raw[16 + hlen:20 + hlen])[0] == 3
        assert raw[-32:] == hashlib.sha256(raw[:-32]).digest()
        # first record holds tensor "a" as float64
        pos = 20 + hlen
        (nlen,) = struct.unpack("<H", raw[pos:pos + 2])
        name = raw[pos + 2:pos + 2 + nlen].decode()
        pos += 2 + nlen
        ndim = raw[pos]
        dims = struct.unpack(f"<{ndim}Q", raw[pos + 1:pos + 1 + 8 * ndim])
        pos += 1 + 8 * ndim
        values = np.frombuffer(raw[pos:pos + 8 * 6], "<f8").reshape(dims)
        np.testing.assert_array_equal(values, tensors[name].double().numpy())

    def test_read_header_only(self, saved):
        path, _ = saved
        assert ckpt.read_header(path)["epoch"] == 4

    def test_deterministic_bytes(self, tmp_path, saved):
        path, tensors = saved
        again = ckpt.save_checkpoint(tmp_path / "y.ckpt", tensors, 4, SMALL, {"note": "hi"})
        assert again.read_bytes() == path.read_bytes()

    def test_no_temp_file_left(self, saved):
        path, _ = saved
        assert [p.name for p in path.parent.iterdir()] == ["x.ckpt"]


class TestRejection:
    def test_flipped_byte(self, saved):
        path, _ = saved
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CorruptCheckpointError):
            ckpt.load_checkpoint(path)

    @pytest.mark.parametrize("cut", [5, 40, -1])
    def test_truncated(self, saved, cut):
        path, _ = saved
        raw = path.read_bytes()
        path.write_bytes(raw[:cut])
        with pytest.raises(CorruptCheckpointError):
            ckpt.load_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "z").write_bytes(b"hello world" * 10)
        with pytest.raises(CorruptCheckpointError):
            ckpt.load_checkpoint(tmp_path / "z")
        with pytest.raises(CorruptCheckpointError):
            ckpt.read_header(tmp_path / "z")

    def test_other_version(self, saved):
        path, _ = saved
        raw = bytearray(path.read_bytes())
        raw[8:12] = struct.pack("<I", 99)
        path.write_bytes(bytes(raw))
        with pytest.raises(IncompatibleCheckpointError):
            ckpt.load_checkpoint(path)

    def test_other_model_config(self, saved):
        path, _ = saved
        with pytest.raises(IncompatibleCheckpointError):
            ckpt.load_checkpoint(path, SMALL.with_(n_blocks=2))


class TestModelBinding:
    def test_model_round_trip_bitwise(self, tmp_path):
        torch.manual_seed(0)
        model = HFSDA(SMALL).eval()
        tensors = ckpt.model_tensors(model)
        assert not any(k.startswith("model/ssl.encoder.") for k in tensors)
        path = ckpt.save_checkpoint(tmp_path / "m.ckpt", tensors, 1, SMALL)
        torch.manual_seed(99)
        other = HFSDA(SMALL).eval()
        ckpt.restore_model(other, ckpt.load_checkpoint(path, SMALL))
        x = torch.randn(1, 6000)
        assert torch.equal(model(x).mask, other(x).mask)

    def test_restore_into_wrong_architecture(self, tmp_path):
        model = HFSDA(SMALL)
        path = ckpt.save_checkpoint(tmp_path / "m.ckpt", ckpt.model_tensors(model), 1, SMALL)
        with pytest.raises(IncompatibleCheckpointError):
            ckpt.restore_model(HFSDA(SMALL.with_(use_ssl=False)), ckpt.load_checkpoint(path))
