"""Grayscale image file IO: binary PGM (P5) input, 8-bit PNG input/output."""
from __future__ import annotations

import numpy as np
from PIL import Image

from .preprocess import GrayImage


def _read_pgm(path) -> GrayImage:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    # header tokens: magic, width, height, maxval; '#' starts a comment
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    width, height, maxval = tokens
    if maxval <= 0 or maxval > 65535:
        raise ValueError(f"{path}: invalid PGM maxval {maxval}")
    dtype = ">u2" if maxval > 255 else np.uint8
    raw = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos)
    return GrayImage(raw.reshape(height, width).astype(np.float64) / maxval)


def read_gray(path) -> GrayImage:
    """Read a grayscale image (PGM or PNG) as floats in [0, 1]."""
    if str(path).lower().endswith(".pgm"):
        return _read_pgm(path)
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return GrayImage(arr / 255.0)


def write_png(path, pixels):
    """Write a [0, 1] float image as 8-bit grayscale PNG."""
    arr = np.clip(np.asarray(pixels), 0.0, 1.0)
    Image.fromarray(np.rint(arr * 255.0).astype(np.uint8), mode="L").save(path)


def write_mask_png(path, bits):
    Image.fromarray(np.where(np.asarray(bits, bool), 255, 0).astype(np.uint8),
                    mode="L").save(path)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr >= 128


def mask_boundary(bits: np.ndarray) -> np.ndarray:
    """Set pixels with at least one unset 4-neighbor (or on the border)."""
    bits = np.asarray(bits, bool)
    interior = bits.copy()
    interior[1:, :] &= bits[:-1, :]
    interior[:-1, :] &= bits[1:, :]
    interior[:, 1:] &= bits[:, :-1]
    interior[:, :-1] &= bits[:, 1:]
    interior[0, :] = interior[-1, :] = False
    interior[:, 0] = interior[:, -1] = False
    return bits & ~interior


def write_overlay_png(path, pixels, bits):
    """Input image with the mask boundary drawn in red, as RGB PNG."""
    base = np.rint(np.clip(np.asarray(pixels), 0.0, 1.0) * 255.0).astype(np.uint8)
    rgb = np.stack([base, base, base], axis=-1)
    edge = mask_boundary(bits)
    rgb[edge] = (255, 32, 32)
    Image.fromarray(rgb, mode="RGB").save(path)
