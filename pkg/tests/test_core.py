import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vqapipe.core import (PATCH_FRAMES, PATCH_SIZE, PatchDodecuplet, RawFormat, VideoVolume, compute_residual,
                          extract_dodecuplets, grid_dims, load_video, residual_from_difference, to_444, write_video)
from vqapipe.errors import ConfigurationError, IngestionError, ShapeError

from oracles import residual_scalar


def _volume(h, w, t, bits=8, chroma="444", seed=0):
    rng = np.random.default_rng(seed)
    top = (1 << bits) - 1
    dtype = np.uint8 if bits == 8 else np.uint16
    ch, cw = (h // 2, w // 2) if chroma == "420" else (h, w)
    planes = [rng.integers(0, top + 1, size=s, dtype=np.int64).astype(dtype) for s in ((h, w, t), (ch, cw, t), (ch, cw, t))]
    return VideoVolume(*planes, bit_depth=bits, chroma_format=chroma, sequence_id="clip")


@pytest.mark.parametrize("bits,chroma", [(8, "420"), (8, "444"), (10, "420"), (10, "444")])
def test_raw_round_trip(tmp_path, bits, chroma):
    vol = _volume(16, 24, 3, bits, chroma)
    path = tmp_path / "clip.yuv"
    fmt = write_video(path, vol)
    assert path.stat().st_size == fmt.frame_bytes * 3
    back = load_video(path)
    for a, b in zip(vol.planes, back.planes):
        np.testing.assert_array_equal(a, b)
    assert back.bit_depth == bits and back.chroma_format == chroma


def test_ten_bit_samples_are_little_endian_words(tmp_path):
    vol = _volume(2, 2, 1, 10, "444")
    vol.y[0, 0, 0] = 0x3FF
    path = tmp_path / "w.yuv"
    write_video(path, vol, descriptor=False)
    assert path.read_bytes()[:2] == b"\xff\x03"


def test_size_mismatch_reports_both_sizes(tmp_path):
    path = tmp_path / "bad.yuv"
    path.write_bytes(b"\0" * 100)
    with pytest.raises(IngestionError, match="expected 96 bytes.*found 100"):
        load_video(path, RawFormat(8, 8, 8, "420", frames=1))


def test_zero_frames_and_missing_descriptor(tmp_path):
    empty = tmp_path / "empty.yuv"
    empty.write_bytes(b"")
    with pytest.raises(IngestionError, match="zero frames"):
        load_video(empty, RawFormat(8, 8))
    with pytest.raises(ConfigurationError, match="sidecar"):
        load_video(empty)


def test_frame_count_inferred_from_size(tmp_path):
    path = tmp_path / "c.yuv"
    write_video(path, _volume(8, 8, 5, 8, "420"), descriptor=False)
    (tmp_path / "c.yuv.yaml").write_text("width: 8\nheight: 8\n")
    assert load_video(path).frame_count == 5


def test_descriptor_validation(tmp_path):
    d = tmp_path / "x.yuv.json"
    d.write_text(json.dumps({"width": 8, "height": 8, "bitdepth": 8}))
    (tmp_path / "x.yuv").write_bytes(b"\0" * 96)
    with pytest.raises(ConfigurationError, match="unknown keys"):
        load_video(tmp_path / "x.yuv")
    with pytest.raises(ConfigurationError):
        RawFormat(8, 8, bit_depth=12)
    with pytest.raises(ConfigurationError):
        RawFormat(7, 8, chroma_format="420")


def test_volume_rejects_out_of_range_and_bad_planes():
    y = np.full((4, 4, 1), 300, dtype=np.uint16)
    with pytest.raises(ShapeError, match="outside"):
        VideoVolume(y, y.copy(), y.copy(), bit_depth=8)
    with pytest.raises(ShapeError):
        VideoVolume(np.zeros((4, 4, 1), np.uint8), np.zeros((4, 4, 1), np.uint8), np.zeros((2, 2, 1), np.uint8))


def test_to_444_preserves_constant_chroma():
    vol = _volume(8, 8, 2, 8, "420")
    vol.cb[:] = 77
    vol.cr[:] = 200
    up = to_444(vol)
    assert up.chroma_format == "444"
    assert np.all(up.cb == 77) and np.all(up.cr == 200)
    np.testing.assert_array_equal(up.y, vol.y)
    assert to_444(up) is up


def test_to_444_is_cosited_bilinear():
    vol = _volume(2, 4, 1, 8, "420")
    vol.cb[0, :, 0] = [10, 30]
    up = to_444(vol).cb[:, :, 0]
    np.testing.assert_array_equal(up[0], [10, 20, 30, 30])
    np.testing.assert_array_equal(up[1], up[0])


def test_dodecuplet_grid_drops_remainders():
    vol = _volume(300, 520, 25)
    grid = extract_dodecuplets(vol)
    assert grid.dims == (2, 1, 2) == grid_dims(520, 300, 25)
    assert len(grid) == 4
    origins = [p.origin[1:] for p in grid]
    assert origins == [(0, 0, 0), (256, 0, 0), (0, 0, 12), (256, 0, 12)]
    p = grid.patches[3]
    np.testing.assert_array_equal(p.samples[:, :, 0, :] * 255, vol.y[0:256, 256:512, 12:24].astype(np.float32))
    assert p.samples.dtype == np.float32 and p.samples.max() <= 1.0


def test_patch_extraction_errors():
    with pytest.raises(ShapeError, match="smaller than one"):
        extract_dodecuplets(_volume(255, 300, 12))
    with pytest.raises(ShapeError, match="4:4:4"):
        extract_dodecuplets(_volume(256, 256, 12, chroma="420"))
    with pytest.raises(ShapeError, match="lattice"):
        PatchDodecuplet(np.zeros((PATCH_SIZE, PATCH_SIZE, 3, PATCH_FRAMES), np.float32), ("s", 3, 0, 0))


def test_residual_examples():
    assert residual_from_difference(np.array(0.0), 8) == 1.0
    assert residual_from_difference(np.array(0.0), 10) == 1.0
    full = float(residual_from_difference(np.array(255.0), 8))
    assert -1.0 - 1e-3 <= full < -0.99


@given(st.integers(-1023, 1023), st.sampled_from([8, 10]))
@settings(max_examples=300, deadline=None)
def test_residual_matches_oracle_and_range(diff, bits):
    top = (1 << bits) - 1
    diff = max(-top, min(top, diff))
    value = float(residual_from_difference(np.array(float(diff)), bits))
    assert abs(value - residual_scalar(diff, bits)) < 1e-9
    assert -1 - 1e-3 <= value <= 1.0


@given(st.integers(0, 255), st.integers(0, 255))
def test_residual_symmetric_and_decreasing(a, b):
    r = residual_from_difference(np.array([a - b, b - a, abs(a - b) + 1.0]), 8)
    assert r[0] == r[1]
    assert r[2] < r[0]


def test_compute_residual_on_patches():
    grid = extract_dodecuplets(_volume(256, 256, 12))
    p = grid.patches[0]
    res = compute_residual(p, p)
    assert np.all(res.samples == 1.0)
