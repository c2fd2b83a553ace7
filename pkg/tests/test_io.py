import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from specshift.errors import BaseModelMismatch, CorruptFile, FormatError
from specshift.io import (
    RunManifest,
    decode_delta,
    decode_model,
    decode_ppm,
    decode_svd_cache,
    encode_delta,
    encode_model,
    encode_ppm,
    encode_svd_cache,
    load_delta,
    manifest_path,
    read_csv,
    save_delta,
    tile,
    to_bytes_rgb,
    write_csv,
)
from specshift.model import ToyDenoiser
from specshift.spectral import DeltaCheckpoint, LoraFactor, SpectralShift, apply_checkpoint, zero_checkpoint


def f32(x):
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def spectral_ckpt(model, seed):
    rng = np.random.default_rng(seed)
    shifts = {n: SpectralShift(n, f32(rng.standard_normal(f.rank))) for n, f in model.svd_factors().items()}
    dense = {n: f32(rng.standard_normal(model.params[n].shape)) for n in model.vector_layers()}
    return DeltaCheckpoint(model.fingerprint(), shifts, dense)


def lora_ckpt(model, seed):
    rng = np.random.default_rng(seed)
    lora = {}
    for n in model.matrix_layers():
        m, k = model.matrix(n).shape
        lora[n] = LoraFactor(f32(rng.standard_normal(m)), f32(rng.standard_normal(k)))
    return DeltaCheckpoint(model.fingerprint(), lora=lora)


def expected_svdd_size(d):
    # Header (magic, version, fingerprint, count) + entries + CRC trailer.
    size = 4 + 4 + 8 + 4 + 4
    for n, s in d.shifts.items():
        size += 2 + len(n.encode()) + 1 + 4 + 4 + 4 * s.rank
    for n, v in d.dense.items():
        size += 2 + len(n.encode()) + 1 + 4 + 4 * v.size
    for n, f in d.lora.items():
        size += 2 + len(n.encode()) + 1 + 4 + 4 + 4 * (f.b.size + f.a.size)
    return size


# ------------------------------------------------------------------ .ckpt

def test_model_round_trip(small_model):
    rounded = ToyDenoiser({n: f32(p) for n, p in small_model.params.items()})
    back = decode_model(encode_model(rounded))
    assert back.fingerprint() == rounded.fingerprint()
    for n, p in rounded.params.items():
        assert np.array_equal(back.params[n], p)


def test_model_bad_magic(small_model):
    data = bytearray(encode_model(small_model))
    data[:4] = b"XXXX"
    with pytest.raises(FormatError):
        decode_model(bytes(data))


def test_model_truncated(small_model):
    data = encode_model(small_model)
    with pytest.raises(CorruptFile):
        decode_model(data[:-3])


def test_bundled_base_round_trips(base_model):
    assert encode_model(decode_model(encode_model(base_model))) == encode_model(base_model)


# ------------------------------------------------------------------ .svdd

def test_delta_round_trip(small_model):
    d = spectral_ckpt(small_model, 0)
    assert decode_delta(encode_delta(d)).equals(d)


def test_lora_delta_round_trip(small_model):
    d = lora_ckpt(small_model, 1)
    assert decode_delta(encode_delta(d)).equals(d)


def test_rank_mask_round_trip():
    d = DeltaCheckpoint(5, shifts={"w": SpectralShift("w", [1.0, 0.5, 0.0, 0.0], rank_mask=2)})
    back = decode_delta(encode_delta(d))
    assert back.shifts["w"].rank_mask == 2 and back.equals(d)


@pytest.mark.parametrize("make", [spectral_ckpt, lora_ckpt])
def test_delta_size_matches_layout(small_model, make):
    d = make(small_model, 2)
    assert len(encode_delta(d)) == expected_svdd_size(d)


def test_svdiff_file_stores_min_mn_floats(base_model):
    d = zero_checkpoint(base_model)
    names = sum(2 + len(n) + 1 for n in d.layer_names())
    headers = 24 + names + 8 * len(d.shifts) + 4 * len(d.dense)
    payload = len(encode_delta(d)) - headers
    assert payload == 4 * sum(min(base_model.matrix(n).shape) for n in base_model.matrix_layers()) \
        + 4 * sum(base_model.params[n].size for n in base_model.vector_layers())


def test_delta_crc_detects_flip(small_model):
    data = bytearray(encode_delta(spectral_ckpt(small_model, 3)))
    data[40] ^= 0x01
    with pytest.raises(CorruptFile):
        decode_delta(bytes(data))


def test_delta_truncated(small_model):
    data = encode_delta(spectral_ckpt(small_model, 3))
    for cut in (10, len(data) // 2, len(data) - 1):
        with pytest.raises(CorruptFile):
            decode_delta(data[:cut])


def test_delta_bad_magic():
    data = b"NOPE" + bytes(30)
    with pytest.raises(FormatError):
        decode_delta(data)


def test_delta_unknown_kind():
    body = b"SVDD" + struct.pack("<IQI", 1, 0, 1) + struct.pack("<H", 1) + b"w" + struct.pack("<B", 9)
    with pytest.raises(FormatError):
        decode_delta(body + struct.pack("<I", zlib.crc32(body)))


def test_delta_crc_is_crc32_of_body(small_model):
    data = encode_delta(spectral_ckpt(small_model, 4))
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])


def test_loaded_delta_checks_base(tmp_path, small_model):
    d = spectral_ckpt(small_model, 5)
    save_delta(tmp_path / "d.svdd", d)
    other = ToyDenoiser.init(seed=4, width=8)
    with pytest.raises(BaseModelMismatch):
        apply_checkpoint(other, load_delta(tmp_path / "d.svdd"))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, st.integers(1, 20), elements=st.floats(-1e6, 1e6, width=32)),
       st.integers(0, 2 ** 64 - 1))
def test_delta_round_trip_property(values, fp):
    d = DeltaCheckpoint(fp, shifts={"w": SpectralShift("w", values.astype(np.float64))},
                        dense={"b": values.astype(np.float64)})
    assert decode_delta(encode_delta(d)).equals(d)


# ------------------------------------------------------------------ .svd

def test_svd_cache_round_trip(small_model):
    factors = small_model.svd_factors()
    back = decode_svd_cache(encode_svd_cache(factors))
    assert set(back) == set(factors)
    for n, f in factors.items():
        np.testing.assert_array_equal(back[n].sigma, f32(f.sigma))
        np.testing.assert_array_equal(back[n].U, f32(f.U))
        np.testing.assert_array_equal(back[n].V, f32(f.V))


def test_svd_cache_truncated(small_model):
    data = encode_svd_cache(small_model.svd_factors())
    with pytest.raises(CorruptFile):
        decode_svd_cache(data[:-1])
    with pytest.raises(FormatError):
        decode_svd_cache(b"SVDD" + data[4:])


# ------------------------------------------------------------------ PPM

def test_ppm_mapping_and_clamp():
    img = np.zeros((3, 1, 4))
    img[:, 0] = [-1.0, 0.0, 1.0, 3.0]
    px = to_bytes_rgb(img)
    assert px[0, :, 0].tolist() == [0, 128, 255, 255]
    img[:, 0, 0] = -7.0
    assert to_bytes_rgb(img)[0, 0, 0] == 0


def test_ppm_header_and_round_trip(rng):
    img = rng.uniform(-1, 1, (3, 5, 7))
    data = encode_ppm(img)
    assert data.startswith(b"P6\n7 5\n255\n")
    assert len(data) == len(b"P6\n7 5\n255\n") + 3 * 5 * 7
    back = decode_ppm(data)
    assert np.abs(back - img).max() <= 1.0 / 255 + 1e-12
    assert encode_ppm(back) == data


def test_ppm_rejects_bad_input():
    with pytest.raises(FormatError):
        decode_ppm(b"P3\n1 1\n255\n000")
    with pytest.raises(CorruptFile):
        decode_ppm(b"P6\n2 2\n255\n" + bytes(5))
    with pytest.raises(FormatError):
        to_bytes_rgb(np.zeros((4, 2, 2)))


def test_tile_layout():
    a, b = -np.ones((3, 2, 2)), np.zeros((3, 2, 2))
    grid = tile([a, b, a], cols=2)
    assert grid.shape == (3, 5, 5)
    assert np.all(grid[:, :2, :2] == -1) and np.all(grid[:, :2, 3:] == 0)
    assert np.all(grid[:, 2, :] == 1)


# ------------------------------------------------------------------ CSV and manifests

def test_csv_uses_lf_and_repr(tmp_path):
    path = tmp_path / "t.csv"
    write_csv(path, ["a", "b"], [[1, 0.1], ["x", np.float64(1.0)]])
    raw = path.read_bytes()
    assert b"\r" not in raw
    assert raw == b"a,b\n1,0.1\nx,1.0\n"
    header, rows = read_csv(path)
    assert header == ["a", "b"] and rows[1] == ["x", "1.0"]


def test_manifest_round_trip(tmp_path):
    m = RunManifest("sample", {"prompt": "photo of a circle", "steps": 10}, 3, {"base": "b.ckpt"},
                    {"output": "o.ppm"}, "00ff", "0.1.0")
    p = manifest_path(tmp_path / "o.ppm")
    assert p.name == "o.ppm.manifest.json"
    m.save(p)
    assert RunManifest.load(p) == m


def test_manifest_rejects_garbage():
    with pytest.raises(FormatError):
        RunManifest.from_json("{not json")
    with pytest.raises(FormatError):
        RunManifest.from_json('{"seed": 1}')
