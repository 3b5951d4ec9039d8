"""RGB rasters in [0, 1], PNG/PPM I/O, and the [-1, 1] model-space mapping."""

from __future__ import annotations

import io
import logging
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage

from .numerics import Tensor

log = logging.getLogger(__name__)

MIN_SIDE = 8


class ImageParseError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Image:
    """H x W x 3 float64 raster with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"Image needs an HxWx3 array, got {px.shape}")
        if px.shape[0] < MIN_SIDE or px.shape[1] < MIN_SIDE:
            raise ValueError(f"Image sides must be >= {MIN_SIDE}, got {px.shape[:2]}")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return 3

    @property
    def shape(self) -> tuple:
        return self.pixels.shape

    def __eq__(self, other):
        return isinstance(other, Image) and np.array_equal(self.pixels, other.pixels)

    def clipped(self) -> "Image":
        return Image(np.clip(self.pixels, 0.0, 1.0))


def _read_ppm(raw: bytes, path) -> np.ndarray:
    # P6: magic, width, height, maxval separated by whitespace (comments allowed)
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageParseError(f"{path}: truncated PPM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise ImageParseError(f"{path}: malformed PPM header {tokens!r}") from None
    if maxval != 255:
        raise ImageParseError(f"{path}: unsupported PPM maxval {maxval} (only 8-bit)")
    need = width * height * 3
    body = raw[pos:pos + need]
    if len(body) != need:
        raise ImageParseError(f"{path}: truncated PPM raster ({len(body)} of {need} bytes)")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3)


def load_image(path) -> Image:
    """Read an 8-bit RGB/RGBA PNG or a binary PPM (P6) into [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"P6":
        arr = _read_ppm(raw, path)
    else:
        try:
            with PILImage.open(io.BytesIO(raw)) as im:
                im.load()
                if im.format != "PNG":
                    raise ImageParseError(f"{path}: unsupported format {im.format}")
                if im.mode in ("RGB", "RGBA"):
                    arr = np.asarray(im)[:, :, :3]
                elif im.mode in ("L", "P", "LA"):
                    arr = np.asarray(im.convert("RGB"))
                else:
                    raise ImageParseError(f"{path}: unsupported PNG mode/bit depth {im.mode}")
        except ImageParseError:
            raise
        except Exception as exc:
            raise ImageParseError(f"{path}: cannot parse image ({exc})") from exc
    try:
        return Image(arr.astype(np.float64) / 255.0)
    except ValueError as exc:
        raise ImageParseError(f"{path}: {exc}") from exc


def to_bytes(img: Image) -> np.ndarray:
    px = img.pixels
    if px.min() < 0.0 or px.max() > 1.0:
        log.warning("pixel values outside [0,1] (min %.3f, max %.3f); clamping", px.min(), px.max())
    return np.clip(np.round(px * 255.0), 0, 255).astype(np.uint8)


def save_image(img: Image, path) -> None:
    """Write an 8-bit PNG (or P6 PPM when the path ends in .ppm)."""
    data = to_bytes(img)
    if os.fspath(path).lower().endswith(".ppm"):
        header = f"P6\n{img.width} {img.height}\n255\n".encode()
        with open(path, "wb") as fh:
            fh.write(header + data.tobytes())
        return
    PILImage.fromarray(data, mode="RGB").save(path, format="PNG")


def to_model_space(img: Image) -> Tensor:
    """[0,1] HxWx3 -> [-1,1] 1x3xHxW."""
    return Tensor(img.pixels.transpose(2, 0, 1)[None] * 2.0 - 1.0)


def from_model_space(t) -> Image:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if data.ndim == 4:
        data = data[0]
    return Image(np.clip((data.transpose(1, 2, 0) + 1.0) / 2.0, 0.0, 1.0))


def batch_to_model_space(images) -> Tensor:
    return Tensor(np.stack([im.pixels.transpose(2, 0, 1) for im in images]) * 2.0 - 1.0)


def batch_from_model_space(t) -> list:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    return [from_model_space(d[None]) for d in data]
