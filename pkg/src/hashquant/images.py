"""Image container, binary PPM (P6) input/output, and synthetic test images."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class RenderTarget:
    """An image with float pixels in [0, 1], shape (height, width, channels)."""

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.shape != (self.height, self.width, self.pixels.shape[2]):
            raise ValueError(f"pixel array shape {self.pixels.shape} does not match {self.height}x{self.width}")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


def from_array(pixels: np.ndarray) -> RenderTarget:
    h, w = pixels.shape[:2]
    return RenderTarget(width=w, height=h, pixels=pixels)


def write_ppm(path, image: RenderTarget) -> None:
    """Write an 8-bit binary PPM (P6). Requires 3 channels."""
    if image.channels != 3:
        raise ValueError("PPM output requires 3 channels")
    data = np.clip(np.rint(image.pixels * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{image.width} {image.height}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> RenderTarget:
    """Read an 8-bit binary PPM (P6); pixel bytes map to [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()

    def tokens():
        i = 0
        while i < len(blob):
            while i < len(blob) and blob[i : i + 1].isspace():
                i += 1
            if i < len(blob) and blob[i : i + 1] == b"#":
                while i < len(blob) and blob[i] != 0x0A:
                    i += 1
                continue
            j = i
            while j < len(blob) and not blob[j : j + 1].isspace():
                j += 1
            if j > i:
                yield blob[i:j], j
            i = j

    it = tokens()
    try:
        magic, _ = next(it)
        if magic != b"P6":
            raise ValueError(f"not a binary PPM file (magic {magic!r})")
        (w, _), (h, _), (maxval, end) = next(it), next(it), next(it)
        width, height, maxval = int(w), int(h), int(maxval)
    except StopIteration:
        raise ValueError("truncated PPM header") from None
    if maxval != 255:
        raise ValueError(f"only maxval 255 supported, got {maxval}")
    start = end + 1  # single whitespace byte after maxval
    need = width * height * 3
    raw = blob[start : start + need]
    if len(raw) != need:
        raise ValueError("truncated PPM pixel data")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3).astype(np.float64) / 255.0
    return RenderTarget(width=width, height=height, pixels=pixels)


def checkerboard(size: int = 128, cell: int = 8, channels: int = 3) -> RenderTarget:
    """Black/white checkerboard, cell x cell squares."""
    idx = np.arange(size) // cell
    board = ((idx[:, None] + idx[None, :]) % 2).astype(np.float64)
    pixels = np.repeat(board[:, :, None], channels, axis=2)
    return RenderTarget(width=size, height=size, pixels=pixels)


def constant_image(width: int, height: int, value: float = 0.5, channels: int = 3) -> RenderTarget:
    return RenderTarget(width=width, height=height, pixels=np.full((height, width, channels), value))
