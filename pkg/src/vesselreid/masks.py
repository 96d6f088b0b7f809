"""Grayscale images, binary masks, PGM I/O, and view area ratios.

Images and masks are row-major 2-D numpy arrays. Masks are stored on disk as
binary PGM (P5, maxval 255) with values {0, 255}.
"""

import os
from dataclasses import dataclass

import numpy as np


class PgmError(ValueError):
    """Malformed PGM header or payload; the message names the byte offset."""


@dataclass
class GrayImage:
    """8-bit grayscale image, pixels row-major with shape (height, width)."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 2 or self.pixels.size == 0:
            raise ValueError(f"image must be a non-empty 2-D array, got shape {self.pixels.shape}")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass
class BitMask:
    """Boolean mask, same shape contract as GrayImage."""

    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 2 or self.bits.size == 0:
            raise ValueError(f"mask must be a non-empty 2-D array, got shape {self.bits.shape}")

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    def area(self) -> int:
        return int(self.bits.sum())


@dataclass
class ViewMaskSet:
    """Per-view masks (front, side, rear), all with one common shape."""

    front: BitMask
    side: BitMask
    rear: BitMask

    def __post_init__(self):
        shape = self.front.bits.shape
        if self.side.bits.shape != shape or self.rear.bits.shape != shape:
            raise ValueError("view masks must share one shape")


@dataclass
class AreaRatios:
    """View-mask areas divided by the foreground area, each in [0, 1]."""

    front: float
    side: float
    rear: float

    def __post_init__(self):
        for name in ("front", "side", "rear"):
            v = float(getattr(self, name))
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"area ratio {name}={v} outside [0, 1]")
            setattr(self, name, v)

    def as_array(self) -> np.ndarray:
        return np.array([self.front, self.side, self.rear], dtype=np.float64)


def _next_token(data: bytes, pos: int) -> tuple[bytes, int]:
    """Read one whitespace-delimited header token, skipping '#' comments."""
    n = len(data)
    while pos < n:
        c = data[pos : pos + 1]
        if c == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    if pos >= n:
        raise PgmError(f"unexpected end of header at byte {pos}")
    start = pos
    while pos < n and not data[pos : pos + 1].isspace():
        pos += 1
    return data[start:pos], pos


def load_pgm(path) -> GrayImage:
    """Load a binary PGM (P5, maxval 255) file."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] != b"P5":
        raise PgmError(f"{path}: not a binary PGM (magic mismatch at byte 0)")
    pos = 2
    fields = []
    for _ in range(3):
        token, pos = _next_token(data, pos)
        try:
            fields.append(int(token))
        except ValueError:
            raise PgmError(f"{path}: non-numeric header field at byte {pos - len(token)}") from None
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise PgmError(f"{path}: invalid dimensions {width}x{height} in header (byte {pos})")
    if maxval != 255:
        raise PgmError(f"{path}: unsupported maxval {maxval} at byte {pos}; only 255 is accepted")
    # Exactly one whitespace byte separates the header from the payload.
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise PgmError(f"{path}: missing whitespace after header at byte {pos}")
    pos += 1
    expected = width * height
    payload = data[pos : pos + expected]
    if len(payload) != expected:
        raise PgmError(
            f"{path}: truncated payload at byte {pos + len(payload)} "
            f"(expected {expected} pixel bytes, found {len(payload)})"
        )
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return GrayImage(pixels.copy())


def save_pgm(image: GrayImage, path) -> None:
    """Write a binary PGM (P5, maxval 255) file; round-trips bit-exact."""
    header = f"P5\n{image.width} {image.height}\n255\n".encode("ascii")
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(image.pixels.tobytes())
    os.replace(tmp, path)


def mask_to_gray(mask: BitMask) -> GrayImage:
    """Encode a mask as an 8-bit image with values {0, 255}."""
    return GrayImage(np.where(mask.bits, 255, 0).astype(np.uint8))


def gray_to_mask(image: GrayImage, threshold: int = 128) -> BitMask:
    """Decode a {0, 255}-valued image back to a mask."""
    return BitMask(image.pixels >= threshold)


def load_mask(path) -> BitMask:
    return gray_to_mask(load_pgm(path))


def save_mask(mask: BitMask, path) -> None:
    save_pgm(mask_to_gray(mask), path)


def binarize(prob_map: np.ndarray, threshold: float = 0.5) -> BitMask:
    """Threshold a real-valued field in [0, 1]; the threshold is inclusive."""
    prob_map = np.asarray(prob_map, dtype=np.float64)
    return BitMask(prob_map >= threshold)


def clip_views(views: ViewMaskSet, fg: BitMask) -> ViewMaskSet:
    """Intersect each view mask with the foreground mask."""
    if views.front.bits.shape != fg.bits.shape:
        raise ValueError(
            f"shape mismatch: views {views.front.bits.shape} vs foreground {fg.bits.shape}"
        )
    return ViewMaskSet(
        front=BitMask(views.front.bits & fg.bits),
        side=BitMask(views.side.bits & fg.bits),
        rear=BitMask(views.rear.bits & fg.bits),
    )


def compute_area_ratios(fg: BitMask, views: ViewMaskSet) -> AreaRatios:
    """Area of each view mask divided by the foreground mask area.

    The views are expected to be clipped to the foreground; ratios of
    pairwise-overlapping views may sum above 1.
    """
    if views.front.bits.shape != fg.bits.shape:
        raise ValueError(
            f"shape mismatch: views {views.front.bits.shape} vs foreground {fg.bits.shape}"
        )
    fg_area = fg.area()
    if fg_area == 0:
        raise ValueError("area ratios are undefined for an empty foreground mask")
    return AreaRatios(
        front=views.front.area() / fg_area,
        side=views.side.area() / fg_area,
        rear=views.rear.area() / fg_area,
    )
