"""In-memory rasters and bit-exact PPM (P6) / PFM (Pf) I/O.

Images are ``float64`` arrays of shape ``(height, width, 3)`` with
intensities in [0, 1]; depth maps are ``(height, width)`` arrays of finite,
nonnegative relative depths. Both are immutable once constructed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import InvalidDepth, InvalidImage, MalformedHeader, TruncatedData, UnsupportedMaxval

PathLike = str | os.PathLike


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Image:
    """RGB raster, row-major, intensities in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        a = _frozen(self.data)
        if a.ndim != 3 or a.shape[2] != 3 or a.shape[0] < 1 or a.shape[1] < 1:
            raise InvalidImage(f"expected (h, w, 3) raster, got shape {a.shape}")
        if not np.all(np.isfinite(a)) or a.min() < 0.0 or a.max() > 1.0:
            raise InvalidImage("intensities must lie in [0, 1]")
        object.__setattr__(self, "data", a)

    @classmethod
    def from_flat(cls, width: int, height: int, values) -> "Image":
        v = np.asarray(values, dtype=np.float64)
        if v.size != width * height * 3:
            raise InvalidImage(f"expected {width * height * 3} values, got {v.size}")
        return cls(v.reshape(height, width, 3))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Relative depth raster, row-major, finite and nonnegative."""

    data: np.ndarray

    def __post_init__(self):
        a = _frozen(self.data)
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise InvalidDepth(f"expected (h, w) raster, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise InvalidDepth("depth contains NaN or infinity")
        if a.min() < 0.0:
            raise InvalidDepth("depth contains negative values")
        object.__setattr__(self, "data", a)

    @classmethod
    def from_flat(cls, width: int, height: int, values) -> "DepthMap":
        v = np.asarray(values, dtype=np.float64)
        if v.size != width * height:
            raise InvalidDepth(f"expected {width * height} values, got {v.size}")
        return cls(v.reshape(height, width))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def __eq__(self, other):
        if not isinstance(other, DepthMap):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))

    __hash__ = None


class _HeaderReader:
    """Token reader for netpbm-style headers (whitespace and ``#`` comments)."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def token(self) -> bytes:
        buf, n = self.buf, len(self.buf)
        while self.pos < n:
            c = buf[self.pos : self.pos + 1]
            if c.isspace():
                self.pos += 1
            elif c == b"#":
                while self.pos < n and buf[self.pos : self.pos + 1] not in (b"\n", b"\r"):
                    self.pos += 1
            else:
                break
        start = self.pos
        while self.pos < n and not buf[self.pos : self.pos + 1].isspace() and buf[self.pos : self.pos + 1] != b"#":
            self.pos += 1
        if start == self.pos:
            raise MalformedHeader("unexpected end of header")
        return buf[start : self.pos]

    def int_token(self, what: str) -> int:
        tok = self.token()
        if not tok.isdigit():
            raise MalformedHeader(f"bad {what}: {tok!r}")
        return int(tok)


def load_ppm(path: PathLike) -> Image:
    """Read a binary P6 file with maxval 255."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] != b"P6":
        raise MalformedHeader(f"{path}: not a P6 file")
    rd = _HeaderReader(buf)
    rd.pos = 2
    if rd.pos < len(buf) and not buf[2:3].isspace():
        raise MalformedHeader(f"{path}: bad magic")
    width = rd.int_token("width")
    height = rd.int_token("height")
    maxval = rd.int_token("maxval")
    if width < 1 or height < 1:
        raise MalformedHeader(f"{path}: empty raster {width}x{height}")
    if maxval != 255:
        raise UnsupportedMaxval(f"{path}: maxval {maxval}, only 255 is supported")
    # exactly one whitespace byte separates the header from the raster
    if rd.pos >= len(buf) or not buf[rd.pos : rd.pos + 1].isspace():
        raise MalformedHeader(f"{path}: missing separator after maxval")
    start = rd.pos + 1
    need = width * height * 3
    payload = buf[start : start + need]
    if len(payload) < need:
        raise TruncatedData(f"{path}: expected {need} bytes of pixel data, got {len(payload)}")
    px = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return Image(px.astype(np.float64) / 255.0)


def quantize(img: Image) -> np.ndarray:
    """8-bit samples: round-half-up of v*255, clamped to [0, 255]."""
    q = np.floor(img.data * 255.0 + 0.5)
    return np.clip(q, 0, 255).astype(np.uint8)


def save_ppm(img: Image, path: PathLike) -> None:
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(quantize(img).tobytes())


def _read_line(buf: bytes, pos: int) -> tuple[bytes, int]:
    end = buf.find(b"\n", pos)
    if end < 0:
        raise MalformedHeader("unexpected end of header")
    return buf[pos:end].strip(), end + 1


def load_pfm(path: PathLike) -> DepthMap:
    """Read a grayscale PFM depth raster.

    The sign of the scale line selects endianness (negative = little-endian);
    rows are stored bottom-to-top and returned top-to-bottom. Values are
    multiplied by the scale magnitude.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, pos = _read_line(buf, 0)
    if magic == b"PF":
        raise MalformedHeader(f"{path}: color PFM is not supported")
    if magic != b"Pf":
        raise MalformedHeader(f"{path}: not a grayscale PFM file")
    dims, pos = _read_line(buf, pos)
    parts = dims.split()
    if len(parts) != 2 or not all(p.isdigit() for p in parts):
        raise MalformedHeader(f"{path}: bad dimensions line {dims!r}")
    width, height = int(parts[0]), int(parts[1])
    if width < 1 or height < 1:
        raise MalformedHeader(f"{path}: empty raster {width}x{height}")
    scale_line, pos = _read_line(buf, pos)
    try:
        scale = float(scale_line)
    except ValueError:
        raise MalformedHeader(f"{path}: bad scale line {scale_line!r}") from None
    if scale == 0.0 or not np.isfinite(scale):
        raise MalformedHeader(f"{path}: scale must be finite and nonzero")
    need = width * height * 4
    payload = buf[pos : pos + need]
    if len(payload) < need:
        raise TruncatedData(f"{path}: expected {need} bytes of depth data, got {len(payload)}")
    dtype = "<f4" if scale < 0 else ">f4"
    raw = np.frombuffer(payload, dtype=dtype).astype(np.float64).reshape(height, width)
    vals = raw[::-1] * abs(scale)
    if not np.all(np.isfinite(vals)):
        raise InvalidDepth(f"{path}: depth contains NaN or infinity")
    if vals.min() < 0.0:
        raise InvalidDepth(f"{path}: depth contains negative values")
    # -0.0 is a valid zero depth
    return DepthMap(vals + 0.0)


def save_pfm(d: DepthMap, path: PathLike) -> None:
    """Write little-endian float32 PFM with scale -1.0 (values rounded to f32)."""
    header = f"Pf\n{d.width} {d.height}\n-1.0\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(d.data[::-1], dtype="<f4").tobytes())
