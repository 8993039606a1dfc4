import json
import struct

import numpy as np
import pytest

from conftest import random_layer, tokens
from moecompress.calibration import calibrate
from moecompress.errors import HeaderError, ManifestError, TruncatedError, VersionError
from moecompress.io import (decode_container, encode_container, load_manifest, load_model, manifest_path,
                            read_container, read_tokens, save_model, write_container, write_tokens)
from moecompress.merge import MergedLayer, apply_merge_plan, build_merge_plan, cluster_hcsmoe
from moecompress.moe import layer_forward


class TestContainer:
    def test_hand_layout(self):
        a = np.array([1.0, 2.0, 3.0])
        b = np.array([[4.0, 5.0], [6.0, 7.0]])
        raw = encode_container({"a": a, "b": b})
        (n,) = struct.unpack("<Q", raw[:8])
        header = json.loads(raw[8 : 8 + n])
        assert header["a"] == {"dtype": "f32", "shape": [3], "offset": 0, "nbytes": 12}
        assert header["b"] == {"dtype": "f32", "shape": [2, 2], "offset": 12, "nbytes": 16}
        assert header["__metadata__"]["format_version"] == 1
        start = 8 + n
        assert len(raw) == start + 28
        assert raw[start : start + 4] == struct.pack("<f", 1.0)
        assert raw[start + 12 : start + 16] == struct.pack("<f", 4.0)
        assert raw[start + 24 : start + 28] == struct.pack("<f", 7.0)
        tensors, meta = decode_container(raw)
        assert np.array_equal(tensors["a"], a) and np.array_equal(tensors["b"], b)

    def test_f32_lossless(self, tmp_path):
        x = np.random.default_rng(0).standard_normal((5, 7)).astype(np.float32)
        write_container(tmp_path / "c.bin", {"x": x}, {"note": "hi"})
        tensors, meta = read_container(tmp_path / "c.bin")
        assert np.array_equal(tensors["x"], x.astype(np.float64)) and meta["note"] == "hi"
        write_container(tmp_path / "d.bin", {"x": tensors["x"]}, {"note": "hi"})
        assert (tmp_path / "c.bin").read_bytes() == (tmp_path / "d.bin").read_bytes()

    def test_f64(self):
        x = np.random.default_rng(1).standard_normal(9)
        assert np.array_equal(decode_container(encode_container({"x": x}, dtype="f64"))[0]["x"], x)

    def test_corrupt_header_length(self):
        raw = bytearray(encode_container({"x": np.ones(3)}))
        raw[:8] = struct.pack("<Q", 10**9)
        with pytest.raises(HeaderError):
            decode_container(bytes(raw))
        with pytest.raises(HeaderError):
            decode_container(b"\x01\x02")

    def test_garbled_header(self):
        raw = bytearray(encode_container({"x": np.ones(3)}))
        raw[8] = ord("!")
        with pytest.raises(HeaderError):
            decode_container(bytes(raw))

    def test_version(self):
        raw = encode_container({"x": np.ones(3)}).replace(b'"format_version":1', b'"format_version":2')
        with pytest.raises(VersionError):
            decode_container(raw)

    def test_truncated(self):
        raw = encode_container({"x": np.ones(3), "y": np.ones(4)})
        with pytest.raises(TruncatedError):
            decode_container(raw[:-3])

    def test_tokens(self, tmp_path):
        x = tokens(0, 10, 4)
        write_tokens(tmp_path / "t.bin", x)
        assert np.array_equal(read_tokens(tmp_path / "t.bin"), x.astype(np.float32).astype(np.float64))
        write_container(tmp_path / "u.bin", {"other": x})
        with pytest.raises(ManifestError):
            read_tokens(tmp_path / "u.bin")


class TestModelFiles:
    def test_round_trip(self, tmp_path):
        layer = random_layer(seed=1, shared=1, gate_mode="zeroed")
        manifest = save_model(layer, tmp_path / "m.bin", provenance={"seed": 1})
        assert manifest_path(tmp_path / "m.bin").exists()
        assert manifest["num_experts"] == 8 and manifest["shared_expert_count"] == 1
        assert manifest["gate_mode"] == "zeroed" and manifest["provenance"] == {"seed": 1}
        loaded = load_model(tmp_path / "m.bin")
        x = tokens(1, 50, layer.d)
        assert np.allclose(layer_forward(loaded, x)[0], layer_forward(layer, x)[0], atol=1e-6)
        save_model(loaded, tmp_path / "n.bin", provenance={"seed": 1})
        assert (tmp_path / "m.bin").read_bytes() == (tmp_path / "n.bin").read_bytes()
        again = load_model(tmp_path / "n.bin")
        assert np.array_equal(layer_forward(again, x)[0], layer_forward(loaded, x)[0])

    def test_merged_round_trip(self, tmp_path):
        layer = random_layer(seed=2)
        s = calibrate(layer, tokens(2, 100, layer.d))
        merged = apply_merge_plan(layer, build_merge_plan(layer, cluster_hcsmoe(s, 0.5), s.nu))
        save_model(merged, tmp_path / "m.bin")
        loaded = load_model(tmp_path / "m.bin")
        assert isinstance(loaded, MergedLayer)
        assert np.array_equal(loaded.index_map, merged.index_map)
        x = tokens(3, 20, layer.d)
        assert np.allclose(loaded.forward(x)[0], merged.forward(x)[0], atol=1e-6)

    def test_missing_manifest(self, tmp_path):
        save_model(random_layer(), tmp_path / "m.bin")
        manifest_path(tmp_path / "m.bin").unlink()
        with pytest.raises(ManifestError):
            load_model(tmp_path / "m.bin")

    def test_manifest_version(self, tmp_path):
        save_model(random_layer(), tmp_path / "m.bin")
        mp = manifest_path(tmp_path / "m.bin")
        data = json.loads(mp.read_text())
        data["format_version"] = 7
        mp.write_text(json.dumps(data))
        with pytest.raises(VersionError):
            load_manifest(tmp_path / "m.bin")

    @pytest.mark.parametrize("field,value", [("num_experts", 9), ("d", 5), ("d_ff", 3), ("router_rows", 4),
                                             ("kind", "dense")])
    def test_manifest_inconsistency(self, tmp_path, field, value):
        save_model(random_layer(), tmp_path / "m.bin")
        mp = manifest_path(tmp_path / "m.bin")
        data = json.loads(mp.read_text())
        data[field] = value
        mp.write_text(json.dumps(data))
        with pytest.raises(ManifestError):
            load_model(tmp_path / "m.bin")

    def test_corrupt_model_fails_closed(self, tmp_path):
        save_model(random_layer(), tmp_path / "m.bin")
        raw = bytearray((tmp_path / "m.bin").read_bytes())
        raw[:8] = struct.pack("<Q", len(raw) * 2)
        (tmp_path / "m.bin").write_bytes(bytes(raw))
        with pytest.raises(HeaderError):
            load_model(tmp_path / "m.bin")
