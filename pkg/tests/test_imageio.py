import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import polyisp.imageio as iio
from polyisp.imageio import (
    FlowField,
    Manifest,
    ManifestRecord,
    NetworkState,
    RawImage,
    RawMeta,
    RgbImage,
)
from tests.conftest import random_raw

# Frozen first-run digests; any byte-level format drift must fail loudly.
RAW_SEED7_SHA256 = "6b77bc98907833bf6d7a5154a4e7894e9a0130572a8ad318df728a7be6234f44"
CHECKPOINT_SEED11_SHA256 = (
    "9f242b817887dd8b9672bacae8cf5862d25c38ef6d8b3bec30888cd20e061dda"
)


# --------------------------------------------------------------------------
# RAW


def test_raw_round_trip_bit_exact(tmp_path, small_meta):
    mosaic = np.array([[100, 20], [30, 40]], dtype=np.uint16)
    raw = RawImage(mosaic=mosaic, meta=small_meta)
    iio.write_raw(raw, tmp_path / "a.pgm")
    back = iio.read_raw(tmp_path / "a.pgm")
    assert np.array_equal(back.mosaic, mosaic)
    assert back.meta == small_meta
    assert back.cfa == "RGGB"


def test_raw_value_above_white_level_rejected(small_meta):
    mosaic = np.array([[1100, 20], [30, 40]], dtype=np.uint16)
    with pytest.raises(ValueError, match="value exceeds white level"):
        RawImage(mosaic=mosaic, meta=small_meta)


def test_raw_missing_sidecar_rejected(tmp_path, small_meta):
    raw = random_raw(0, meta=small_meta)
    iio.write_raw(raw, tmp_path / "a.pgm")
    (tmp_path / "a.json").unlink()
    with pytest.raises(ValueError, match="sidecar"):
        iio.read_raw(tmp_path / "a.pgm")


def test_raw_malformed_header_rejected(tmp_path):
    (tmp_path / "bad.pgm").write_bytes(b"P6\n2 2\n65535\n" + b"\x00" * 8)
    (tmp_path / "bad.json").write_text("{}")
    with pytest.raises(ValueError, match="malformed|expected"):
        iio.read_raw(tmp_path / "bad.pgm")


def test_raw_odd_dimensions_rejected(small_meta):
    with pytest.raises(ValueError, match="even"):
        RawImage(mosaic=np.zeros((3, 4), dtype=np.uint16), meta=small_meta)


def test_raw_file_hash_pinned(tmp_path):
    raw = random_raw(7, h=64, w=64)
    iio.write_raw(raw, tmp_path / "h.pgm")
    digest = hashlib.sha256((tmp_path / "h.pgm").read_bytes()).hexdigest()
    assert digest == RAW_SEED7_SHA256


def test_raw_big_endian_samples(tmp_path, small_meta):
    mosaic = np.array([[0x0102, 64], [64, 64]], dtype=np.uint16)
    iio.write_raw(RawImage(mosaic=mosaic, meta=small_meta), tmp_path / "be.pgm")
    data = (tmp_path / "be.pgm").read_bytes()
    payload = data.split(b"65535\n", 1)[1]
    assert payload[:2] == b"\x01\x02"


# --------------------------------------------------------------------------
# RGB


def test_rgb_zeros_payload(tmp_path):
    img = RgbImage(pixels=np.zeros((4, 4, 3), dtype=np.float32))
    iio.write_rgb(img, tmp_path / "z.ppm")
    data = (tmp_path / "z.ppm").read_bytes()
    header = b"P6\n4 4\n255\n"
    assert data.startswith(header)
    assert data[len(header):] == b"\x00" * 48


def test_rgb_half_rounds_to_128(tmp_path):
    img = RgbImage(pixels=np.full((2, 2, 3), 0.5, dtype=np.float32))
    iio.write_rgb(img, tmp_path / "h.ppm")
    back = iio.read_rgb(tmp_path / "h.ppm")
    assert np.allclose(back.pixels, 128 / 255)


def test_rgb_write_read_write_idempotent(tmp_path):
    rng = np.random.default_rng(3)
    img = RgbImage(pixels=rng.random((8, 8, 3)).astype(np.float32))
    iio.write_rgb(img, tmp_path / "a.ppm")
    first = (tmp_path / "a.ppm").read_bytes()
    iio.write_rgb(iio.read_rgb(tmp_path / "a.ppm"), tmp_path / "b.ppm")
    assert (tmp_path / "b.ppm").read_bytes() == first


def test_rgb_wrong_maxval_rejected(tmp_path):
    (tmp_path / "bad.ppm").write_bytes(b"P6\n1 1\n65535\n" + b"\x00" * 6)
    with pytest.raises(ValueError, match="maxval"):
        iio.read_rgb(tmp_path / "bad.ppm")


def test_round_half_away_from_zero():
    # 0.5/255 is exactly half a quantization step
    px = np.array([[[0.5 / 255, 1.5 / 255, 2.5 / 255]]])
    assert iio.float_to_byte(px).ravel().tolist() == [1, 2, 3]


# --------------------------------------------------------------------------
# Flow


def test_flow_zero_round_trip(tmp_path):
    f = FlowField(u=np.zeros((8, 8), np.float32), v=np.zeros((8, 8), np.float32))
    iio.write_flow(f, tmp_path / "z.flo")
    back = iio.read_flow(tmp_path / "z.flo")
    assert np.array_equal(back.u, f.u) and np.array_equal(back.v, f.v)


def test_flow_bad_magic(tmp_path):
    buf = np.array([0.0], dtype="<f4").tobytes() + np.array(
        [2, 2], dtype="<i4"
    ).tobytes() + b"\x00" * 32
    (tmp_path / "bad.flo").write_bytes(buf)
    with pytest.raises(ValueError, match="bad flow magic"):
        iio.read_flow(tmp_path / "bad.flo")


def test_flow_constant_values_exact(tmp_path):
    u = np.full((4, 6), 1.5, np.float32)
    v = np.full((4, 6), -0.25, np.float32)
    iio.write_flow(FlowField(u=u, v=v), tmp_path / "c.flo")
    back = iio.read_flow(tmp_path / "c.flo")
    assert np.array_equal(back.u, u) and np.array_equal(back.v, v)


# --------------------------------------------------------------------------
# Packing / normalization


def test_pack_rggb_single_tile():
    meta = RawMeta(black_level=0, white_level=100, wb_gains=(1, 1, 1, 1),
                   iso=100, exposure_s=0.01)
    raw = RawImage(mosaic=np.array([[100, 20], [30, 40]], np.uint16), meta=meta)
    packed = iio.pack_rggb(raw)
    assert packed.shape == (1, 1, 4)
    assert np.allclose(packed[0, 0], [1.0, 0.2, 0.3, 0.4])


def test_pack_rggb_constant():
    meta = RawMeta(black_level=64, white_level=1023, wb_gains=(1, 1, 1, 1),
                   iso=100, exposure_s=0.01)
    raw = RawImage(mosaic=np.full((6, 6), 500, np.uint16), meta=meta)
    packed = iio.pack_rggb(raw)
    assert np.allclose(packed, (500 - 64) / (1023 - 64))


def test_pack_rggb_matches_index_oracle():
    raw = random_raw(11, h=6, w=6)
    packed = iio.pack_rggb(raw)
    bl, wl = raw.meta.black_level, raw.meta.white_level
    for i in range(3):
        for j in range(3):
            tile = raw.mosaic[2 * i : 2 * i + 2, 2 * j : 2 * j + 2].astype(float)
            expect = np.clip((
                np.array([tile[0, 0], tile[0, 1], tile[1, 0], tile[1, 1]]) - bl
            ) / (wl - bl), 0, 1)
            assert np.allclose(packed[i, j], expect, atol=1e-6)


def test_pack_linear_in_normalized_mosaic():
    meta = RawMeta(black_level=0, white_level=1000, wb_gains=(1, 1, 1, 1),
                   iso=100, exposure_s=0.01)
    rng = np.random.default_rng(2)
    m = rng.integers(0, 400, size=(8, 8)).astype(np.uint16)
    a = iio.pack_rggb(RawImage(mosaic=m, meta=meta))
    b = iio.pack_rggb(RawImage(mosaic=(2 * m).astype(np.uint16), meta=meta))
    assert np.allclose(b, 2 * a, atol=1e-6)


def test_normalize_raw_endpoints():
    assert iio.normalize_raw(64, 64, 1023) == 0.0
    assert iio.normalize_raw(1023, 64, 1023) == 1.0
    mid = (64 + 1023) / 2
    assert np.isclose(iio.normalize_raw(mid, 64, 1023), 0.5)
    assert iio.normalize_raw(2000, 64, 1023) == 1.0  # clamped


# --------------------------------------------------------------------------
# Checkpoints


def test_checkpoint_zero_tensor_payload(tmp_path):
    state = NetworkState(tensors={"a": np.zeros((2, 3), np.float32)})
    iio.save_checkpoint(state, tmp_path / "c.mick")
    data = (tmp_path / "c.mick").read_bytes()
    header, payload = data.split(b"\n", 1)
    parsed = json.loads(header)
    assert parsed["format"] == "MICK1"
    assert payload == b"\x00" * 24


def test_checkpoint_save_load_save_identical(tmp_path):
    rng = np.random.default_rng(4)
    state = NetworkState(
        tensors={
            "w1": rng.standard_normal((3, 4)).astype(np.float32),
            "b": rng.standard_normal(7).astype(np.float32),
        },
        config={"model": {"x": 1}},
        rng_state={"numpy": {"state": 12}},
    )
    iio.save_checkpoint(state, tmp_path / "a.mick")
    loaded = iio.load_checkpoint(tmp_path / "a.mick")
    iio.save_checkpoint(loaded, tmp_path / "b.mick")
    assert (tmp_path / "a.mick").read_bytes() == (tmp_path / "b.mick").read_bytes()


def test_checkpoint_round_trip_lossless(tmp_path):
    rng = np.random.default_rng(9)
    tensors = {
        f"t{i}": rng.standard_normal(rng.integers(1, 20, size=2)).astype(np.float32)
        for i in range(5)
    }
    state = NetworkState(tensors=tensors, config={"k": 3})
    iio.save_checkpoint(state, tmp_path / "c.mick")
    loaded = iio.load_checkpoint(tmp_path / "c.mick")
    assert set(loaded.tensors) == set(tensors)
    for name in tensors:
        assert np.array_equal(loaded.tensors[name], tensors[name])
    assert loaded.config == {"k": 3}


def test_checkpoint_toy_state_digest_pinned(tmp_path):
    from polyisp.nnisp.config import ModelConfig
    from polyisp.nnisp.model import build_model, to_network_state

    model = build_model(ModelConfig.toy(), seed=11)
    state = to_network_state(model)
    iio.save_checkpoint(state, tmp_path / "toy.mick")
    digest = hashlib.sha256((tmp_path / "toy.mick").read_bytes()).hexdigest()
    assert digest == CHECKPOINT_SEED11_SHA256


def test_checkpoint_inconsistent_offsets_rejected(tmp_path):
    header = {
        "format": "MICK1",
        "tensors": [{"name": "a", "shape": [2], "dtype": "f32", "offset": 4}],
        "config": {},
        "rng_state": {},
    }
    raw = json.dumps(header).encode() + b"\n" + b"\x00" * 12
    (tmp_path / "bad.mick").write_bytes(raw)
    with pytest.raises(ValueError, match="inconsistent|payload"):
        iio.load_checkpoint(tmp_path / "bad.mick")


# --------------------------------------------------------------------------
# Manifest


def test_manifest_round_trip(tmp_path):
    records = [
        ManifestRecord("s0", 0, "raw/s0.pgm", "rgb/s0_d0.ppm", "train",
                       flow_path="flow/s0_d0.flo", wb_dg=(1.5, 1, 1, 1.2)),
        ManifestRecord("s0", 1, "raw/s0.pgm", "rgb/s0_d1.ppm", "train"),
    ]
    m = Manifest(records=records, root=tmp_path)
    iio.save_manifest(m, tmp_path / "m.jsonl")
    back = iio.load_manifest(tmp_path / "m.jsonl")
    assert back.records == records
    assert back.root == tmp_path
    assert back.resolve("raw/s0.pgm") == tmp_path / "raw/s0.pgm"


def test_manifest_duplicate_scene_device_rejected():
    rec = ManifestRecord("s0", 0, "a.pgm", "b.ppm", "train")
    with pytest.raises(ValueError, match="duplicate"):
        Manifest(records=[rec, rec])


# --------------------------------------------------------------------------
# Property tests: write/read inverses


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(1, 6))
def test_raw_round_trip_property(tmp_path_factory, seed, hh, ww):
    tmp = tmp_path_factory.mktemp("raw")
    raw = random_raw(seed, h=2 * hh, w=2 * ww)
    iio.write_raw(raw, tmp / "r.pgm")
    back = iio.read_raw(tmp / "r.pgm")
    assert np.array_equal(back.mosaic, raw.mosaic)
    assert back.meta == raw.meta


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 12), st.integers(1, 12))
def test_flow_round_trip_property(tmp_path_factory, seed, hh, ww):
    tmp = tmp_path_factory.mktemp("flow")
    rng = np.random.default_rng(seed)
    f = FlowField(
        u=(100 * rng.standard_normal((hh, ww))).astype(np.float32),
        v=(100 * rng.standard_normal((hh, ww))).astype(np.float32),
    )
    iio.write_flow(f, tmp / "f.flo")
    back = iio.read_flow(tmp / "f.flo")
    assert np.array_equal(back.u, f.u) and np.array_equal(back.v, f.v)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rgb_byte_round_trip_property(tmp_path_factory, seed):
    tmp = tmp_path_factory.mktemp("rgb")
    rng = np.random.default_rng(seed)
    stored = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    img = RgbImage(pixels=(stored / 255.0).astype(np.float32))
    iio.write_rgb(img, tmp / "i.ppm")
    back = iio.read_rgb(tmp / "i.ppm")
    assert np.array_equal(iio.float_to_byte(back.pixels), stored)
