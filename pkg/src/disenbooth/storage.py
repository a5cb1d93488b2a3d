"""On-disk formats: named-tensor checkpoints, P6 pixmaps, run configs, manifests.

Checkpoint layout (all integers little-endian)::

    b"DSNB" | u32 version | u32 entry count
    per entry: u32 name length | name (utf-8) | u8 dtype code | u8 rank
               | rank x u64 dims | row-major payload
    32-byte SHA-256 digest of the run-config text
"""

from __future__ import annotations

import csv
import hashlib
import io
import os
import struct
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

MAGIC = b"DSNB"
VERSION = 1
DTYPE_CODES = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<i8"): 3,
    np.dtype("uint8"): 4,
    np.dtype("<i4"): 5,
}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}
CONFIG_ENTRY = "__config__"


class FormatError(ValueError):
    pass


class ConfigFileError(ValueError):
    pass


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def text_entry(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def entry_text(arr: np.ndarray) -> str:
    return np.asarray(arr, dtype=np.uint8).tobytes().decode("utf-8")


def dumps_checkpoint(tensors: dict[str, np.ndarray], config_text: str = "") -> bytes:
    if CONFIG_ENTRY in tensors:
        raise FormatError(f"entry name {CONFIG_ENTRY!r} is reserved")
    entries = dict(tensors)
    entries[CONFIG_ENTRY] = text_entry(config_text)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(entries)))
    for name, arr in entries.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if np.dtype(dt) not in DTYPE_CODES:
            raise FormatError(f"unsupported dtype {arr.dtype} for entry {name!r}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", DTYPE_CODES[np.dtype(dt)], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=np.dtype(dt).newbyteorder("<")).tobytes())
    buf.write(hashlib.sha256(config_text.encode("utf-8")).digest())
    return buf.getvalue()


def loads_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], str]:
    """Return ``(tensors, config_text)``; the config entry is split off."""
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise FormatError("bad magic; not a DSNB checkpoint")
    pos = 4
    try:
        version, count = struct.unpack_from("<II", view, pos)
        pos += 8
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", view, pos)
            pos += 4
            name = bytes(view[pos : pos + nlen]).decode("utf-8")
            pos += nlen
            code, rank = struct.unpack_from("<BB", view, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}Q", view, pos)
            pos += 8 * rank
            if code not in CODE_DTYPES:
                raise FormatError(f"unknown dtype code {code} in entry {name!r}")
            dt = CODE_DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(view):
                raise FormatError(f"truncated payload in entry {name!r}")
            if name in out:
                raise FormatError(f"duplicate entry {name!r}")
            out[name] = np.frombuffer(view[pos : pos + nbytes], dtype=dt).reshape(dims).copy()
            pos += nbytes
        digest = bytes(view[pos : pos + 32])
        if len(digest) != 32 or pos + 32 != len(view):
            raise FormatError("missing or malformed trailing digest")
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from None
    config_text = entry_text(out.pop(CONFIG_ENTRY)) if CONFIG_ENTRY in out else ""
    if hashlib.sha256(config_text.encode("utf-8")).digest() != digest:
        raise FormatError("config digest mismatch")
    return out, config_text


def _atomic_write(path: str, payload: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def save_checkpoint(path: str, tensors: dict[str, np.ndarray], config_text: str = "") -> None:
    _atomic_write(path, dumps_checkpoint(tensors, config_text))


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], str]:
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read())


# ---------------------------------------------------------------------------
# P6 images
# ---------------------------------------------------------------------------


def quantize(x: np.ndarray) -> np.ndarray:
    """[-1, 1] -> bytes via round-half-up of (v + 1) * 127.5, clamped."""
    v = np.floor((np.asarray(x, dtype=np.float64) + 1.0) * 127.5 + 0.5)
    return np.clip(v, 0, 255).astype(np.uint8)


def dequantize(b: np.ndarray) -> np.ndarray:
    return (np.asarray(b).astype(np.float32) / np.float32(127.5) - np.float32(1.0))


def encode_ppm(image: np.ndarray) -> bytes:
    """(3, H, W) image in [-1, 1] -> P6 bytes."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise FormatError(f"expected a (3, H, W) image, got {image.shape}")
    _, h, w = image.shape
    raster = np.transpose(quantize(image), (1, 2, 0))
    return f"P6 {w} {h} 255\n".encode("ascii") + raster.tobytes()


def _ppm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated P6 header")
        tokens.append(data[start:pos])
    return tokens, pos + 1


def decode_ppm(data: bytes) -> np.ndarray:
    tokens, pos = _ppm_tokens(data, 4)
    if tokens[0] != b"P6":
        raise FormatError(f"not a binary pixmap (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError("non-numeric P6 header field") from None
    if maxval != 255 or w < 1 or h < 1:
        raise FormatError(f"unsupported P6 geometry {w}x{h} maxval {maxval}")
    body = data[pos : pos + w * h * 3]
    if len(body) != w * h * 3:
        raise FormatError("truncated P6 raster")
    raster = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return dequantize(np.transpose(raster, (2, 0, 1)))


def write_ppm(path: str, image: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(image))


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


def image_grid(images: np.ndarray, cols: int = 8, pad: int = 1) -> np.ndarray:
    """Tile (N, 3, H, W) images into one (3, H', W') image with -1 borders."""
    n, c, h, w = images.shape
    rows = -(-n // cols)
    grid = -np.ones((c, rows * (h + pad) + pad, cols * (w + pad) + pad), dtype=np.float32)
    for i, img in enumerate(images):
        r, k = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + k * (w + pad)
        grid[:, y : y + h, x : x + w] = img
    return grid


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    seed: int = 0
    image_size: int = 32
    cond_dim: int = 32
    cond_len: int = 8
    timesteps: int = 100
    ddim_steps: int = 50
    lora_rank: int = 4
    lambda2: float = 0.01
    lambda3: float = 0.001
    lr: float = 1e-4
    iterations: int = 3000
    batch: int = 1
    k_images: int = 4
    out_dir: str = "data"
    deterministic: bool = True
    base_channels: int = 16
    pretrain_steps: int = 6000
    probe_steps: int = 800
    n_samples: int = 32
    use_adapter: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.lambda2 < 1.0:
            raise ConfigFileError(f"lambda2 must satisfy 0 <= lambda2 < 1, got {self.lambda2}")
        if self.lambda3 < 0 or self.lr <= 0:
            raise ConfigFileError("lambda3 must be >= 0 and lr > 0")
        positive = ("image_size", "cond_dim", "cond_len", "lora_rank", "iterations", "batch",
                    "k_images", "base_channels", "n_samples")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigFileError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.timesteps < 2:
            raise ConfigFileError("timesteps must be >= 2")
        if not 1 <= self.ddim_steps <= self.timesteps:
            raise ConfigFileError("ddim_steps must lie in 1..timesteps")
        if self.pretrain_steps < 0 or self.probe_steps < 0:
            raise ConfigFileError("step counts must be non-negative")

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    def replace(self, **changes) -> "RunConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return RunConfig(**values)


def _parse_value(name: str, raw: str, kind):
    try:
        if kind in (bool, "bool"):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigFileError(f"bad value for {name}: {raw!r}") from None


def loads_config(text: str) -> RunConfig:
    kinds = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ConfigFileError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigFileError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw, kinds[key])
    return RunConfig(**values)


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path) as fh:
        return loads_config(fh.read())


# ---------------------------------------------------------------------------
# CSV artifacts
# ---------------------------------------------------------------------------

MANIFEST_COLUMNS = ("image_path", "subject_id", "shape", "fill", "marker", "bg_color", "texture", "pos", "scale")
REPORT_COLUMNS = ("name", "value", "seed", "n")


def write_csv(path: str, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def read_csv(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
