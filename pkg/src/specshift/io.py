"""Binary and text artifacts: full checkpoints (.ckpt), delta checkpoints
(.svdd), SVD caches (.svd), PPM images, CSV tables and run manifests.

All multi-byte fields are little-endian; every float payload is f32.
"""

from __future__ import annotations

import csv
import json
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CorruptFile, FormatError
from .linalg import SvdFactors
from .model import ToyDenoiser, layer_specs
from .spectral import DeltaCheckpoint, LoraFactor, SpectralShift

CKPT_MAGIC = b"SVCK"
SVDD_MAGIC = b"SVDD"
SVDC_MAGIC = b"SVDC"
VERSION = 1

KIND_CODES = {"conv4d": 0, "linear2d": 1, "embed2d": 2, "bias1d": 3, "gain1d": 4}
SPECTRAL, DENSE1D, LORA = 0, 1, 2
NO_MASK = 0xFFFFFFFF


class _Reader:
    """Cursor over a byte string; running off the end is a CorruptFile."""

    def __init__(self, data: bytes, what: str):
        self.data, self.pos, self.what = data, 0, what

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CorruptFile(f"{self.what}: truncated at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def u8(self) -> int:
        return self.unpack("B")[0]

    def u16(self) -> int:
        return self.unpack("H")[0]

    def u32(self) -> int:
        return self.unpack("I")[0]

    def u64(self) -> int:
        return self.unpack("Q")[0]

    def name(self) -> str:
        raw = self.take(self.u16())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptFile(f"{self.what}: layer name is not UTF-8") from exc

    def floats(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float64)

    def done(self) -> None:
        if self.pos != len(self.data):
            raise CorruptFile(f"{self.what}: {len(self.data) - self.pos} trailing bytes")


def _name(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise FormatError(f"layer name too long: {s[:40]}...")
    return struct.pack("<H", len(raw)) + raw


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _magic(r: _Reader, magic: bytes) -> None:
    if len(r.data) < 4 or r.data[:4] != magic:
        raise FormatError(f"{r.what}: bad magic, expected {magic.decode()}")
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"{r.what}: unsupported version {version}")


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# ----------------------------------------------------------------- full ckpt

def encode_model(model: ToyDenoiser) -> bytes:
    out = [CKPT_MAGIC, struct.pack("<II", VERSION, len(model.specs))]
    for name, kind, shape in model.specs:
        out += [_name(name), struct.pack("<BB", KIND_CODES[kind], len(shape)),
                struct.pack(f"<{len(shape)}I", *shape), _f32(model.params[name])]
    return b"".join(out)


def decode_model(data: bytes) -> ToyDenoiser:
    r = _Reader(data, "ckpt")
    _magic(r, CKPT_MAGIC)
    params, kinds = {}, {}
    for _ in range(r.u32()):
        name = r.name()
        kind, ndim = r.unpack("BB")
        dims = r.unpack(f"{ndim}I")
        params[name] = r.floats(int(np.prod(dims))).reshape(dims)
        kinds[name] = kind
    r.done()
    if "conv_in.bias" not in params:
        raise FormatError("ckpt: not a toy denoiser checkpoint")
    expected = {n: KIND_CODES[k] for n, k, _ in layer_specs(params["conv_in.bias"].shape[0])}
    if kinds != expected:
        raise FormatError("ckpt: layer set or kinds do not match the toy denoiser")
    return ToyDenoiser(params)


def save_model(path, model: ToyDenoiser) -> None:
    _atomic_write(path, encode_model(model))


def load_model(path) -> ToyDenoiser:
    return decode_model(Path(path).read_bytes())


# ----------------------------------------------------------- delta checkpoint

def encode_delta(d: DeltaCheckpoint) -> bytes:
    entries = []
    for name in sorted(d.shifts):
        s = d.shifts[name]
        mask = NO_MASK if s.rank_mask is None else s.rank_mask
        entries.append(_name(name) + struct.pack("<BII", SPECTRAL, s.rank, mask) + _f32(s.delta))
    for name in sorted(d.dense):
        v = np.ravel(d.dense[name])
        entries.append(_name(name) + struct.pack("<BI", DENSE1D, v.size) + _f32(v))
    for name in sorted(d.lora):
        f = d.lora[name]
        entries.append(_name(name) + struct.pack("<BII", LORA, f.b.size, f.a.size) + _f32(f.b) + _f32(f.a))
    body = SVDD_MAGIC + struct.pack("<IQI", VERSION, d.fingerprint, len(entries)) + b"".join(entries)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_delta(data: bytes, config: str = "") -> DeltaCheckpoint:
    if len(data) >= 4 and data[:4] != SVDD_MAGIC:
        raise FormatError("svdd: bad magic, expected SVDD")
    if len(data) < 24:
        raise CorruptFile("svdd: truncated header")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptFile("svdd: CRC mismatch")
    r = _Reader(body, "svdd")
    _magic(r, SVDD_MAGIC)
    fingerprint = r.u64()
    shifts, dense, lora = {}, {}, {}
    for _ in range(r.u32()):
        name = r.name()
        kind = r.u8()
        if kind == SPECTRAL:
            n, mask = r.u32(), r.u32()
            shifts[name] = SpectralShift(name, r.floats(n), None if mask == NO_MASK else mask)
        elif kind == DENSE1D:
            dense[name] = r.floats(r.u32())
        elif kind == LORA:
            nb, na = r.u32(), r.u32()
            lora[name] = LoraFactor(r.floats(nb), r.floats(na))
        else:
            raise FormatError(f"svdd: unknown entry kind {kind}")
    r.done()
    return DeltaCheckpoint(fingerprint, shifts, dense, lora, config)


def save_delta(path, d: DeltaCheckpoint) -> None:
    _atomic_write(path, encode_delta(d))


def load_delta(path) -> DeltaCheckpoint:
    return decode_delta(Path(path).read_bytes())


# ---------------------------------------------------------------- SVD cache

def encode_svd_cache(factors: dict[str, SvdFactors]) -> bytes:
    out = [SVDC_MAGIC, struct.pack("<II", VERSION, len(factors))]
    for name in sorted(factors):
        f = factors[name]
        (m, n), r = f.shape, f.rank
        out += [_name(name), struct.pack("<III", m, n, r), _f32(f.U), _f32(f.sigma), _f32(f.V)]
    return b"".join(out)


def decode_svd_cache(data: bytes) -> dict[str, SvdFactors]:
    r = _Reader(data, "svd cache")
    _magic(r, SVDC_MAGIC)
    out = {}
    for _ in range(r.u32()):
        name = r.name()
        m, n, k = r.unpack("III")
        u = r.floats(m * k).reshape(m, k)
        s = r.floats(k)
        v = r.floats(n * k).reshape(n, k)
        out[name] = SvdFactors(u, s, v)
    r.done()
    return out


def save_svd_cache(path, factors: dict[str, SvdFactors]) -> None:
    _atomic_write(path, encode_svd_cache(factors))


def load_svd_cache(path) -> dict[str, SvdFactors]:
    return decode_svd_cache(Path(path).read_bytes())


# ---------------------------------------------------------------- PPM and CSV

def to_bytes_rgb(image: np.ndarray) -> np.ndarray:
    """``(3, H, W)`` in [-1, 1] to ``(H, W, 3)`` uint8 via round(255 (x+1) / 2)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise FormatError(f"expected a (3, H, W) image, got {img.shape}")
    q = np.clip(np.round(255.0 * (img + 1.0) / 2.0), 0, 255).astype(np.uint8)
    return q.transpose(1, 2, 0)


def encode_ppm(image: np.ndarray) -> bytes:
    px = to_bytes_rgb(image)
    h, w, _ = px.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + px.tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    """Parse a binary PPM into a ``(3, H, W)`` array in [-1, 1]."""
    if data[:2] != b"P6":
        raise FormatError("ppm: bad magic, expected P6")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise CorruptFile("ppm: malformed header")
        fields.append(int(data[start:pos]))
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"ppm: unsupported maxval {maxval}")
    pixels = data[pos + 1:]
    if len(pixels) != w * h * 3:
        raise CorruptFile(f"ppm: expected {w * h * 3} pixel bytes, got {len(pixels)}")
    px = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return px.astype(np.float64) * 2.0 / 255.0 - 1.0


def save_ppm(path, image: np.ndarray) -> None:
    _atomic_write(path, encode_ppm(image))


def load_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def tile(images: Sequence[np.ndarray], cols: int | None = None, pad: int = 1) -> np.ndarray:
    """Arrange ``(3, H, W)`` images on a grid with ``pad`` pixels of white."""
    images = [np.asarray(i) for i in images]
    cols = cols or len(images)
    rows = -(-len(images) // cols)
    _, h, w = images[0].shape
    out = np.ones((3, rows * (h + pad) - pad, cols * (w + pad) - pad))
    for k, img in enumerate(images):
        r, c = divmod(k, cols)
        out[:, r * (h + pad):r * (h + pad) + h, c * (w + pad):c * (w + pad) + w] = img
    return out


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty CSV")
    return rows[0], rows[1:]


def write_metrics(path, metrics) -> None:
    write_csv(path, ["step", "loss_target", "loss_prior", "loss_unmix", "step_type"],
              ([m.step, m.loss_target, m.loss_prior, m.loss_unmix, m.step_type] for m in metrics))


# ---------------------------------------------------------------- manifests

@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    fingerprint: str = ""
    tool_version: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"manifest: {exc}") from exc
        if not isinstance(raw, dict) or "command" not in raw:
            raise FormatError("manifest: missing 'command'")
        known = {k: raw[k] for k in cls.__dataclass_fields__ if k in raw}
        known.setdefault("config", {})
        known.setdefault("seed", 0)
        return cls(**known)

    def save(self, path) -> None:
        _atomic_write(path, self.to_json().encode("utf-8"))

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls.from_json(Path(path).read_text())


def manifest_path(output) -> Path:
    return Path(str(output) + ".manifest.json")
