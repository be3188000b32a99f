"""Single-channel images and their file formats.

Two formats are supported: 8-bit binary portable graymaps (PGM, ``P5``) for
display-range data, and 32-bit portable floatmaps (PFM, ``Pf``) whose
round-trip is exact for float32-representable values. Depth maps default
to the float format so their precision survives I/O.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MalformedFile, ValidationError


@dataclass(eq=False)
class ModalImage:
    """Single-channel image with a modality tag; pixels are (height, width)."""

    pixels: np.ndarray
    modality: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=float)
        if self.pixels.ndim != 2 or self.pixels.size == 0:
            raise ValidationError("image pixels must form a non-empty 2-D array")
        if not np.all(np.isfinite(self.pixels)):
            raise ValidationError("image pixels must be finite")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def vector(self) -> np.ndarray:
        """Row-major (lexicographic) vectorization of the pixels."""
        return self.pixels.ravel()

    def scaled_unit(self) -> "ModalImage":
        """Affinely rescale the value range to [0, 1] (constant images map to 0)."""
        lo = float(self.pixels.min())
        hi = float(self.pixels.max())
        if hi - lo < 1e-30:
            return ModalImage(np.zeros_like(self.pixels), self.modality)
        return ModalImage((self.pixels - lo) / (hi - lo), self.modality)


def _token(raw: bytes, pos: int) -> tuple[bytes, int]:
    """Next whitespace-delimited token after optional whitespace and # comments."""
    n = len(raw)
    while pos < n:
        if raw[pos : pos + 1].isspace():
            pos += 1
        elif raw[pos : pos + 1] == b"#":
            while pos < n and raw[pos : pos + 1] != b"\n":
                pos += 1
        else:
            break
    if pos >= n:
        raise MalformedFile("unexpected end of header", offset=pos)
    start = pos
    while pos < n and not raw[pos : pos + 1].isspace():
        pos += 1
    return raw[start:pos], pos


def _int_token(raw: bytes, pos: int, what: str) -> tuple[int, int]:
    tok, end = _token(raw, pos)
    try:
        return int(tok), end
    except ValueError:
        raise MalformedFile(f"invalid {what} {tok!r}", offset=pos) from None


def read_image(path, modality: str = "") -> ModalImage:
    """Read a PGM (``P5``) or PFM (``Pf``) image; PGM values are scaled to [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"P5":
        return _read_pgm(raw, modality)
    if raw[:2] == b"Pf":
        return _read_pfm(raw, modality)
    raise MalformedFile(f"unknown magic {raw[:2]!r}", offset=0)


def write_image(image: ModalImage, path) -> None:
    """Write an image; the format is chosen by the path suffix (.pgm or .pfm)."""
    suffix = str(path).lower()
    if suffix.endswith(".pgm"):
        _write_pgm(image, path)
    elif suffix.endswith(".pfm"):
        _write_pfm(image, path)
    else:
        raise ValidationError(f"cannot infer image format from path {path!r}")


def _read_pgm(raw: bytes, modality: str) -> ModalImage:
    pos = 2
    width, pos = _int_token(raw, pos, "width")
    height, pos = _int_token(raw, pos, "height")
    maxval, pos = _int_token(raw, pos, "maxval")
    if width < 1 or height < 1:
        raise MalformedFile(f"invalid dimensions {width}x{height}", offset=2)
    if not 0 < maxval <= 255:
        raise MalformedFile(f"unsupported maxval {maxval}", offset=pos)
    pos += 1  # single whitespace byte between header and raster
    need = width * height
    if len(raw) - pos < need:
        raise MalformedFile(
            f"raster has {len(raw) - pos} bytes, expected {need}", offset=pos
        )
    data = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos)
    pixels = data.reshape(height, width).astype(float) / maxval
    return ModalImage(pixels, modality)


def _write_pgm(image: ModalImage, path) -> None:
    quantized = np.clip(np.round(image.pixels * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{image.width} {image.height}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(quantized.tobytes())


def _read_pfm(raw: bytes, modality: str) -> ModalImage:
    pos = 2
    width, pos = _int_token(raw, pos, "width")
    height, pos = _int_token(raw, pos, "height")
    tok, pos = _token(raw, pos)
    try:
        scale = float(tok)
    except ValueError:
        raise MalformedFile(f"invalid scale {tok!r}", offset=pos) from None
    if width < 1 or height < 1:
        raise MalformedFile(f"invalid dimensions {width}x{height}", offset=2)
    if scale == 0:
        raise MalformedFile("scale must be nonzero", offset=pos)
    pos += 1
    dtype = "<f4" if scale < 0 else ">f4"
    need = width * height * 4
    if len(raw) - pos < need:
        raise MalformedFile(
            f"raster has {len(raw) - pos} bytes, expected {need}", offset=pos
        )
    data = np.frombuffer(raw, dtype=dtype, count=width * height, offset=pos)
    pixels = data.reshape(height, width).astype(float)
    # PFM rasters are stored bottom row first.
    return ModalImage(np.flipud(pixels), modality)


def _write_pfm(image: ModalImage, path) -> None:
    header = f"Pf\n{image.width} {image.height}\n-1.0\n".encode("ascii")
    data = np.flipud(image.pixels).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())
