import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from regionfuse.errors import (BadMagic, TruncatedPayload, UnsupportedVersion,
                               UsageError)
from regionfuse.formats import (from_uint8, read_pgm, read_ppm, read_tensor,
                                to_uint8, write_pgm, write_ppm, write_tensor)
from regionfuse.promptcfg import (build_request, parse_prompt_config,
                                  resolved_params_line)
from regionfuse.fixtures import toy_reference

CONFIG_TEXT = """\
# demo configuration
prompt = a boy standing in a library, wearing green jacket and blue pants
steps = 6
cfg_scale = 5
latent = 16
patch_factor = 2
seed = 3

[character]
face = a boy
upper = green jacket
lower = blue pants
"""


class TestTensorContainer:
    def test_rank0_layout_and_round_trip(self, tmp_path):
        path = tmp_path / "scalar.catn"
        write_tensor(path, np.float32(1.5))
        # magic + version + rank + dtype + payload = five 4-byte fields
        assert os.path.getsize(path) == 20
        back = read_tensor(path)
        assert back.shape == ()
        assert back == np.float32(1.5)

    def test_2x3_dims_and_payload(self, tmp_path):
        path = tmp_path / "m.catn"
        arr = np.arange(6, dtype=np.float32).reshape(2, 3)
        write_tensor(path, arr)
        blob = path.read_bytes()
        assert blob[:4] == b"CATN"
        version, rank = struct.unpack("<II", blob[4:12])
        assert (version, rank) == (1, 2)
        assert struct.unpack("<II", blob[12:20]) == (2, 3)
        (dtype_code,) = struct.unpack("<I", blob[20:24])
        assert dtype_code == 0
        assert len(blob) - 24 == 24  # 6 floats
        assert np.array_equal(read_tensor(path), arr)

    def test_corrupt_magic(self, tmp_path):
        path = tmp_path / "bad.catn"
        write_tensor(path, np.zeros((2, 2), dtype=np.float32))
        blob = bytearray(path.read_bytes())
        blob[:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(BadMagic):
            read_tensor(path)

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "v9.catn"
        write_tensor(path, np.zeros((2, 2), dtype=np.float32))
        blob = bytearray(path.read_bytes())
        blob[4:8] = struct.pack("<I", 9)
        path.write_bytes(bytes(blob))
        with pytest.raises(UnsupportedVersion):
            read_tensor(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.catn"
        write_tensor(path, np.zeros((4, 4), dtype=np.float32))
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(TruncatedPayload):
            read_tensor(path)

    def test_rank4_round_trip(self, tmp_path, rng):
        arr = rng.normal(size=(2, 3, 4, 5)).astype(np.float32)
        path = tmp_path / "r4.catn"
        write_tensor(path, arr)
        assert np.array_equal(read_tensor(path), arr)

    def test_write_is_deterministic(self, tmp_path, rng):
        arr = rng.normal(size=(3, 3)).astype(np.float32)
        a, b = tmp_path / "a.catn", tmp_path / "b.catn"
        write_tensor(a, arr)
        write_tensor(b, arr)
        assert a.read_bytes() == b.read_bytes()

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.integers(1, 4), min_size=0, max_size=4), st.integers(0, 2**31))
    def test_round_trip_property(self, dims, seed):
        import tempfile
        arr = np.random.default_rng(seed).normal(size=tuple(dims)).astype(np.float32)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "p.catn")
            write_tensor(path, arr)
            assert np.array_equal(read_tensor(path), arr)


class TestRasters:
    def test_pgm_round_trip(self, tmp_path, rng):
        mask = (rng.uniform(size=(5, 7)) > 0.5).astype(np.uint8) * 255
        path = tmp_path / "m.pgm"
        write_pgm(path, mask)
        assert path.read_bytes().startswith(b"P5\n7 5\n255\n")
        assert np.array_equal(read_pgm(path), mask)

    def test_ppm_round_trip(self, tmp_path, rng):
        img = (rng.uniform(size=(4, 6, 3)) * 255).astype(np.uint8)
        path = tmp_path / "i.ppm"
        write_ppm(path, img)
        assert path.read_bytes().startswith(b"P6\n6 4\n255\n")
        assert np.array_equal(read_ppm(path), img)

    def test_reader_skips_comments(self, tmp_path):
        path = tmp_path / "c.pgm"
        payload = bytes(range(6))
        path.write_bytes(b"P5\n# a comment\n3 2\n255\n" + payload)
        arr = read_pgm(path)
        assert arr.shape == (2, 3)
        assert arr.tobytes() == payload

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "x.pgm"
        path.write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
        with pytest.raises(BadMagic):
            read_pgm(path)

    def test_truncated_raster(self, tmp_path):
        path = tmp_path / "t.ppm"
        path.write_bytes(b"P6\n2 2\n255\n\x00\x00")
        with pytest.raises(TruncatedPayload):
            read_ppm(path)

    def test_uint8_round_trip_through_floats(self, rng):
        img = rng.integers(0, 256, size=(4, 4, 3)).astype(np.uint8)
        assert np.array_equal(to_uint8(from_uint8(img)), img)

    def test_writers_are_deterministic(self, tmp_path, rng):
        img = rng.uniform(size=(4, 4, 3))
        a, b = tmp_path / "a.ppm", tmp_path / "b.ppm"
        write_ppm(a, img)
        write_ppm(b, img)
        assert a.read_bytes() == b.read_bytes()


class TestPromptConfig:
    def test_parse_and_defaults(self):
        cfg = parse_prompt_config(CONFIG_TEXT)
        assert cfg.prompt.startswith("a boy standing")
        assert cfg.params["steps"] == 6
        assert cfg.params["cfg_scale"] == 5.0
        assert cfg.params["adapter_scale"] == 1.0  # default
        assert cfg.params["gamma1"] == 0.8
        assert cfg.params["mask_mode"] == "soft"
        assert cfg.characters == ({"face": "a boy", "upper": "green jacket",
                                   "lower": "blue pants"},)

    def test_unknown_key_rejected(self):
        with pytest.raises(UsageError):
            parse_prompt_config("prompt = hi\nwat = 3\n[character]\nface = hi\n")

    def test_missing_prompt_rejected(self):
        with pytest.raises(UsageError):
            parse_prompt_config("steps = 5\n[character]\nface = hi\n")

    def test_missing_character_rejected(self):
        with pytest.raises(UsageError):
            parse_prompt_config("prompt = a boy\n")

    def test_bad_mask_mode(self):
        with pytest.raises(UsageError):
            parse_prompt_config("prompt = a boy\nmask_mode = blurry\n"
                                "[character]\nface = a boy\n")

    def test_non_numeric_value(self):
        with pytest.raises(UsageError):
            parse_prompt_config("prompt = a boy\nsteps = soon\n"
                                "[character]\nface = a boy\n")

    def test_build_request(self):
        cfg = parse_prompt_config(CONFIG_TEXT)
        ref = toy_reference(32, 32)
        request = build_request(cfg, [ref])
        assert request.steps == 6
        assert request.latent_size == 16
        assert request.specs[0].region("upper").span == (8, 9)
        line = resolved_params_line(request)
        for token in ("steps=6", "cfg_scale=5", "mask_mode=soft", "characters=1"):
            assert token in line

    def test_reference_count_mismatch(self):
        cfg = parse_prompt_config(CONFIG_TEXT)
        with pytest.raises(UsageError):
            build_request(cfg, [])
