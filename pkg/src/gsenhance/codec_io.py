"""Binary .gs2d sets, enhancer tensor containers, 8-bit PNG I/O and plain-text run configs."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image

from .core import PARAMS_PER_PRIMITIVE, GaussianSet
from .enhance import EnhanceConfig, EnhancerParams
from .fit import FitConfig

GS2D_MAGIC = b"GS2D"
GS2D_VERSION = 1
FLAG_ACTIVATION_V1 = 1
_HEADER = struct.Struct("<4s5I")
HEADER_BYTES = _HEADER.size  # 24
RECORD_BYTES = 4 * PARAMS_PER_PRIMITIVE

ENH_MAGIC = b"GS2E"
ENH_VERSION = 1
_ENH_HEADER = struct.Struct("<4s2I")
MAX_RANK = 8


class CodecError(ValueError):
    """Base class for every decode failure."""


class FormatError(CodecError):
    pass


class CorruptFileError(CodecError):
    pass


class UnsupportedVersionError(CodecError):
    pass


class ImageIOError(OSError):
    pass


# ---------------------------------------------------------------- .gs2d


def encode(gs: GaussianSet) -> bytes:
    """Serialize raw parameters as little-endian float32 records."""
    rec = gs.records().astype("<f4")
    header = _HEADER.pack(GS2D_MAGIC, GS2D_VERSION, gs.width, gs.height, gs.count, FLAG_ACTIVATION_V1)
    return header + rec.tobytes()


def decode(data: bytes) -> GaussianSet:
    data = bytes(data)
    if len(data) < 4 or data[:4] != GS2D_MAGIC:
        raise FormatError("not a .gs2d file (bad magic)")
    if len(data) < HEADER_BYTES:
        raise CorruptFileError(f"truncated header: {len(data)} of {HEADER_BYTES} bytes")
    _, version, width, height, count, flags = _HEADER.unpack_from(data)
    if version != GS2D_VERSION:
        raise UnsupportedVersionError(f"unsupported .gs2d version {version}")
    if flags & ~FLAG_ACTIVATION_V1:
        raise UnsupportedVersionError(f"unknown flag bits 0x{flags:x}")
    if width == 0 or height == 0:
        raise CorruptFileError(f"invalid viewport {width}x{height}")
    expected = HEADER_BYTES + count * RECORD_BYTES
    if len(data) != expected:
        raise CorruptFileError(f"payload length {len(data) - HEADER_BYTES} does not match count {count}")
    rec = np.frombuffer(data, dtype="<f4", offset=HEADER_BYTES).reshape(count, PARAMS_PER_PRIMITIVE)
    if not np.isfinite(rec).all():
        raise CorruptFileError("payload contains non-finite values")
    return GaussianSet.from_records(rec.astype(np.float64), width, height)


def save_gs2d(gs: GaussianSet, path) -> None:
    Path(path).write_bytes(encode(gs))


def load_gs2d(path) -> GaussianSet:
    return decode(Path(path).read_bytes())


# ---------------------------------------------------------------- images


def load_image(path) -> np.ndarray:
    """8-bit PNG (gray, RGB or RGBA; alpha dropped) as float64 (H, W, 3) in [0, 1]."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode not in ("L", "RGB", "RGBA", "P", "LA"):
                raise ImageIOError(f"{path}: unsupported pixel mode {mode!r} (only 8-bit images are accepted)")
            arr = np.asarray(im.convert("RGB"))
    except ImageIOError:
        raise
    except (OSError, ValueError) as exc:
        raise ImageIOError(f"cannot read image {path}: {exc}") from exc
    return arr.astype(np.float64) / 255.0


def quantize(img: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and round half up to uint8."""
    return np.floor(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_image(img: np.ndarray, path) -> None:
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] != 3):
        raise ValueError(f"expected (H, W), (H, W, 1) or (H, W, 3), got {img.shape}")
    try:
        Image.fromarray(quantize(img)).save(path, format="PNG")
    except OSError as exc:
        raise ImageIOError(f"cannot write image {path}: {exc}") from exc


# ---------------------------------------------------------------- enhancer container


def encode_enhancer(params: EnhancerParams) -> bytes:
    params.validate()
    out = [_ENH_HEADER.pack(ENH_MAGIC, ENH_VERSION, len(params.tensors))]
    for name, t in params.tensors.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        out.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return b"".join(out)


def decode_tensors(data: bytes) -> dict[str, np.ndarray]:
    """Parse the container into named float64 arrays without checking the enhancer layout."""
    data = bytes(data)
    if len(data) < 4 or data[:4] != ENH_MAGIC:
        raise FormatError("not an enhancer container (bad magic)")
    if len(data) < _ENH_HEADER.size:
        raise CorruptFileError("truncated header")
    _, version, n = _ENH_HEADER.unpack_from(data)
    if version != ENH_VERSION:
        raise UnsupportedVersionError(f"unsupported enhancer container version {version}")
    pos = _ENH_HEADER.size

    def take(nbytes: int) -> bytes:
        nonlocal pos
        if pos + nbytes > len(data):
            raise CorruptFileError("unexpected end of data")
        chunk = data[pos : pos + nbytes]
        pos += nbytes
        return chunk

    tensors: dict[str, np.ndarray] = {}
    for _ in range(n):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not valid UTF-8") from exc
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name!r}")
        (rank,) = struct.unpack("<I", take(4))
        if rank > MAX_RANK:
            raise CorruptFileError(f"tensor {name!r} has implausible rank {rank}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = math.prod(dims)
        if 4 * size > len(data) - pos:
            raise CorruptFileError(f"tensor {name!r} extends past end of data")
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims)
        if not np.isfinite(arr).all():
            raise CorruptFileError(f"tensor {name!r} contains non-finite values")
        tensors[name] = arr.astype(np.float64)
    if pos != len(data):
        raise CorruptFileError(f"{len(data) - pos} trailing bytes")
    return tensors


def decode_enhancer(data: bytes) -> EnhancerParams:
    params = EnhancerParams(decode_tensors(data))
    try:
        params.validate()
    except (ValueError, KeyError, IndexError) as exc:
        raise FormatError(f"invalid enhancer layout: {exc}") from exc
    return params


def save_enhancer(params: EnhancerParams, path) -> None:
    Path(path).write_bytes(encode_enhancer(params))


def load_enhancer(path) -> EnhancerParams:
    return decode_enhancer(Path(path).read_bytes())


def load_encoder_weights(path, params: EnhancerParams) -> EnhancerParams:
    """Replace the ``encoder.*`` tensors of ``params`` with those stored in a container file."""
    tensors = decode_tensors(Path(path).read_bytes())
    out = params.copy()
    for name, ref in params.tensors.items():
        if not name.startswith("encoder."):
            continue
        if name not in tensors:
            raise FormatError(f"encoder weights file lacks {name!r}")
        if tensors[name].shape != ref.shape:
            raise FormatError(f"{name!r} has shape {tensors[name].shape}, expected {ref.shape}")
        out.tensors[name] = tensors[name]
    return out


# ---------------------------------------------------------------- run config


@dataclass
class RunConfig:
    fit: FitConfig = field(default_factory=FitConfig)
    enhance: EnhanceConfig = field(default_factory=EnhanceConfig)

    def serialize(self) -> str:
        lines = []
        for section in ("fit", "enhance"):
            cfg = getattr(self, section)
            lines += [f"{section}.{f.name} = {getattr(cfg, f.name)}" for f in fields(cfg)]
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        out = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise FormatError(f"line {lineno}: expected 'key = value'")
            section, _, name = key.strip().partition(".")
            cfg = getattr(out, section, None) if section in ("fit", "enhance") else None
            types = {f.name: f.type for f in fields(cfg)} if cfg is not None else {}
            if name not in types:
                raise FormatError(f"line {lineno}: unknown key {key.strip()!r}")
            setattr(cfg, name, _coerce(types[name], value.strip(), lineno))
        return out


def _coerce(type_name, value: str, lineno: int):
    try:
        if type_name in ("int", int):
            return int(value)
        if type_name in ("float", float):
            return float(value)
        return value
    except ValueError as exc:
        raise FormatError(f"line {lineno}: bad value {value!r}") from exc
