"""Lossy JPEG round trip without entropy coding.

Quantization of the 8x8 block DCT is the only lossy step of baseline JPEG,
so skipping Huffman coding leaves the decoded pixels unchanged.
"""
from __future__ import annotations

import numpy as np
from scipy.fft import dctn, idctn

LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

CHROMA_TABLE = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=np.float64)


def scaled_table(base: np.ndarray, quality: int) -> np.ndarray:
    """IJG quality scaling of a quantization table, entries clamped to 1..255."""
    quality = int(quality)
    if not 1 <= quality <= 100:
        raise ValueError(f"jpeg quality must be in 1..100, got {quality}")
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    return np.clip(np.floor((base * scale + 50) / 100), 1, 255)


def rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128
    return np.stack([y, cb, cr])


def ycbcr_to_rgb(ycc: np.ndarray) -> np.ndarray:
    y, cb, cr = ycc[0], ycc[1] - 128, ycc[2] - 128
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([r, g, b])


def _quantize_plane(plane: np.ndarray, table: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    blocks = (plane - 128).reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3)
    coeffs = dctn(blocks, axes=(2, 3), norm="ortho")
    coeffs = np.round(coeffs / table) * table
    out = idctn(coeffs, axes=(2, 3), norm="ortho") + 128
    return out.transpose(0, 2, 1, 3).reshape(h, w)


def jpeg_roundtrip(img, quality: int) -> np.ndarray:
    """Encode and decode an RGB image ``[3,H,W]`` in [0, 1] at ``quality``.

    Sides that are not multiples of 8 are reflect-padded and cropped back.
    Samples are rounded to 8-bit levels on both ends, as a codec would.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"jpeg_roundtrip expects an RGB [3,H,W] image, got shape {img.shape}")
    luma, chroma = scaled_table(LUMA_TABLE, quality), scaled_table(CHROMA_TABLE, quality)
    h, w = img.shape[1:]
    ph, pw = (-h) % 8, (-w) % 8
    pixels = np.round(np.clip(img, 0, 1) * 255)
    if ph or pw:
        pixels = np.pad(pixels, ((0, 0), (0, ph), (0, pw)), mode="reflect" if min(h, w) > 1 else "edge")
    ycc = rgb_to_ycbcr(pixels)
    decoded = np.stack([_quantize_plane(ycc[0], luma),
                        _quantize_plane(ycc[1], chroma),
                        _quantize_plane(ycc[2], chroma)])
    rgb = np.clip(np.round(ycbcr_to_rgb(decoded)), 0, 255)[:, :h, :w]
    return (rgb / 255.0).astype(np.float32)
