"""Planar float images, PPM/PNG file I/O, cropping and edge padding."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np


class ImageIOError(OSError):
    pass


class UnsupportedChannels(ImageIOError):
    pass


class UnsupportedBitDepth(ImageIOError):
    pass


class OutOfBounds(ValueError):
    pass


@dataclass(frozen=True)
class ImageF32:
    """Planar (C, H, W) float32 image with samples in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError(f"expected (C, H, W) data, got shape {arr.shape}")
        if arr.size and (not np.isfinite(arr).all() or arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("image samples must lie in [0, 1]")
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "ImageF32":
        """Build from any float array, clipping into [0, 1]."""
        return cls(np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def dims(self) -> tuple[int, int]:
        return self.height, self.width

    def __eq__(self, other):
        if not isinstance(other, ImageF32):
            return NotImplemented
        return self.data.shape == other.data.shape and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True)
class CropSpec:
    x0: int
    y0: int
    size: int


# ------------------------------------------------------------------------ PPM


def _read_ppm_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos : pos + 1]
        if ch == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ImageIOError("truncated PPM header")
    return buf[start:pos], pos


def _decode_ppm(buf: bytes) -> ImageF32:
    magic, pos = _read_ppm_token(buf, 0)
    if magic in (b"P5", b"P2"):
        raise UnsupportedChannels("grayscale PGM images are not supported")
    if magic != b"P6":
        raise ImageIOError(f"unsupported PNM variant {magic!r}")
    try:
        width, pos = _read_ppm_token(buf, pos)
        height, pos = _read_ppm_token(buf, pos)
        maxval, pos = _read_ppm_token(buf, pos)
        w, h, maxv = int(width), int(height), int(maxval)
    except ValueError as exc:
        raise ImageIOError("malformed PPM header") from exc
    pos += 1  # single whitespace byte after maxval
    if maxv == 255:
        dtype, scale = np.dtype("u1"), 255.0
    elif maxv == 65535:
        dtype, scale = np.dtype(">u2"), 65535.0
    else:
        raise UnsupportedBitDepth(f"PPM maxval {maxv} is neither 255 nor 65535")
    count = w * h * 3
    payload = buf[pos : pos + count * dtype.itemsize]
    if len(payload) != count * dtype.itemsize:
        raise ImageIOError("truncated PPM payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(h, w, 3)
    return ImageF32((arr.astype(np.float64) / scale).transpose(2, 0, 1))


def _encode_ppm(img: ImageF32, bits: int) -> bytes:
    if img.channels != 3:
        raise UnsupportedChannels(f"PPM needs 3 channels, image has {img.channels}")
    maxv = 255 if bits == 8 else 65535
    q = np.rint(img.data.astype(np.float64) * maxv).transpose(1, 2, 0)
    arr = q.astype(">u2" if bits == 16 else "u1")
    return f"P6\n{img.width} {img.height}\n{maxv}\n".encode("ascii") + arr.tobytes()


# ------------------------------------------------------------------------ PNG


def _pil():
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise ImageIOError("PNG support needs Pillow (pip install 'artifact[png]')") from exc
    return Image


def _decode_png(path: str) -> ImageF32:
    Image = _pil()
    with Image.open(path) as im:
        im.load()
        mode = im.mode
        if mode in ("L", "LA", "1", "P", "I;16", "I;16B", "I"):
            raise UnsupportedChannels(f"PNG mode {mode} is not 3-channel RGB")
        if mode == "RGB":
            arr = np.asarray(im, dtype=np.float64) / 255.0
        else:
            raise UnsupportedChannels(f"PNG mode {mode} is not supported")
    return ImageF32(arr.transpose(2, 0, 1))


def _read_png_16bit(path: str) -> ImageF32 | None:
    # Pillow cannot represent 16-bit RGB; fall back to OpenCV when present
    try:
        import cv2
    except ImportError:
        return None
    arr = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if arr is None or arr.dtype != np.uint16:
        return None
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise UnsupportedChannels("16-bit PNG must have 3 channels")
    return ImageF32((arr[:, :, ::-1].astype(np.float64) / 65535.0).transpose(2, 0, 1))


def _png_bit_depth(head: bytes) -> int:
    # IHDR is always the first chunk: 8 signature + 8 chunk header + 8 dims
    return head[24] if len(head) > 24 else 8


# ---------------------------------------------------------------------- public


def load_image(path: str | os.PathLike) -> ImageF32:
    """Read an 8/16-bit binary PPM (P6) or RGB PNG into [0, 1] floats."""
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise ImageIOError(f"cannot read {path}: {exc}") from exc
    if buf[:8] == b"\x89PNG\r\n\x1a\n":
        if _png_bit_depth(buf) == 16:
            img = _read_png_16bit(path)
            if img is not None:
                return img
        return _decode_png(path)
    return _decode_ppm(buf)


def save_image(img: ImageF32, path: str | os.PathLike, bits: int = 8) -> None:
    """Write ``img`` as PPM, or PNG when the suffix is ``.png``."""
    path = os.fspath(path)
    if bits not in (8, 16):
        raise UnsupportedBitDepth(f"bit depth {bits}")
    try:
        if path.lower().endswith(".png"):
            if bits != 8:
                raise UnsupportedBitDepth("PNG output is 8-bit only")
            Image = _pil()
            arr = np.rint(img.data.astype(np.float64).transpose(1, 2, 0) * 255.0).astype(np.uint8)
            Image.fromarray(arr, "RGB").save(path)
        else:
            data = _encode_ppm(img, bits)
            with open(path, "wb") as fh:
                fh.write(data)
    except (OSError, ValueError) as exc:
        if isinstance(exc, ImageIOError):
            raise
        raise ImageIOError(f"cannot write {path}: {exc}") from exc


def extract_crop(img: ImageF32, spec: CropSpec) -> ImageF32:
    if spec.size < 1 or spec.x0 < 0 or spec.y0 < 0 or spec.x0 + spec.size > img.width or spec.y0 + spec.size > img.height:
        raise OutOfBounds(f"crop {spec} exceeds {img.width}x{img.height} image")
    return ImageF32(img.data[:, spec.y0 : spec.y0 + spec.size, spec.x0 : spec.x0 + spec.size].copy())


def pad_to_multiple(img: ImageF32, m: int) -> tuple[ImageF32, tuple[int, int]]:
    """Edge-replicate right/bottom so both dims are multiples of ``m``.

    Returns the padded image and the original (height, width).
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    h, w = img.dims
    ph, pw = -(-h // m) * m, -(-w // m) * m
    if (ph, pw) == (h, w):
        return img, (h, w)
    data = np.pad(img.data, ((0, 0), (0, ph - h), (0, pw - w)), mode="edge")
    return ImageF32(data), (h, w)


def unpad(img: ImageF32, dims: tuple[int, int]) -> ImageF32:
    h, w = dims
    return ImageF32(img.data[:, :h, :w].copy())


def to_batch(*images: ImageF32) -> np.ndarray:
    """Stack images into an (N, C, H, W) float64 array."""
    return np.stack([im.data for im in images]).astype(np.float64)
