"""Per-kind corruption generators.

Each generator maps a float64 image ``[C,H,W]`` in [0, 1], a parameter dict
and a seeded generator to a corrupted float64 image (not yet clamped).
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .jpeg import jpeg_roundtrip
from .plasma import diamond_square_field


def _per_channel(img: np.ndarray, fn) -> np.ndarray:
    return np.stack([fn(ch) for ch in img])


def _value_lift(img: np.ndarray) -> np.ndarray:
    # grayscale for snow whitening; single-channel images are their own gray
    if img.shape[0] == 3:
        return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    return img.mean(axis=0)


def disk_kernel(radius: float, supersample: int = 8) -> np.ndarray:
    """Disk of ``radius`` pixels with anti-aliased edge coverage, summing to 1."""
    r = max(float(radius), 1e-6)
    half = int(np.ceil(r))
    side = 2 * half + 1
    offsets = (np.arange(supersample) + 0.5) / supersample - 0.5
    ys = (np.arange(side)[:, None] - half + offsets[None, :]).ravel()
    yy, xx = np.meshgrid(ys, ys, indexing="ij")
    inside = (yy ** 2 + xx ** 2 <= r * r).astype(np.float64)
    k = inside.reshape(side, supersample, side, supersample).mean(axis=(1, 3))
    return k / k.sum()


def line_kernel(length: float, angle_deg: float, supersample: int = 8) -> np.ndarray:
    """Centred line segment of ``length`` pixels at ``angle_deg``, summing to 1."""
    length = max(float(length), 1.0)
    half = int(np.ceil(length / 2))
    side = 2 * half + 1
    k = np.zeros((side, side))
    t = np.deg2rad(angle_deg)
    n = int(np.ceil(length * supersample)) + 1
    s = np.linspace(-(length - 1) / 2, (length - 1) / 2, n)
    rows = np.clip(np.rint(half - s * np.sin(t)).astype(int), 0, side - 1)
    cols = np.clip(np.rint(half + s * np.cos(t)).astype(int), 0, side - 1)
    np.add.at(k, (rows, cols), 1.0)
    return k / k.sum()


def _convolve(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return _per_channel(img, lambda ch: ndimage.convolve(ch, kernel, mode="reflect"))


def _plasma(h: int, w: int, roughness: float, rng: np.random.Generator) -> np.ndarray:
    side = 1 << int(np.ceil(np.log2(max(h, w, 2))))
    field = diamond_square_field(side + 1, roughness, int(rng.integers(2 ** 32)))
    return field[:h, :w]


def gaussian_noise(img, p, rng):
    return img + rng.normal(0.0, p["sigma"], size=img.shape) if p["sigma"] > 0 else img.copy()


def shot_noise(img, p, rng):
    photons = p["photons"]
    return rng.poisson(img * photons) / photons


def impulse_noise(img, p, rng):
    u = rng.random(img.shape)
    out = img.copy()
    out[u < p["amount"] / 2] = 0.0
    out[(u >= p["amount"] / 2) & (u < p["amount"])] = 1.0
    return out


def defocus_blur(img, p, rng):
    out = _convolve(img, disk_kernel(p["radius"]))
    return _per_channel(out, lambda ch: ndimage.gaussian_filter(ch, p["alias_sigma"], mode="reflect"))


def glass_blur(img, p, rng):
    sigma, delta = p["sigma"], int(p["delta"])
    out = _per_channel(img, lambda ch: ndimage.gaussian_filter(ch, sigma, mode="reflect"))
    h, w = img.shape[1:]
    for _ in range(int(p["iterations"])):
        shifts = rng.integers(-delta, delta + 1, size=(h, w, 2))
        for r in range(h - 1, -1, -1):
            for c in range(w - 1, -1, -1):
                r2 = min(max(r + shifts[r, c, 0], 0), h - 1)
                c2 = min(max(c + shifts[r, c, 1], 0), w - 1)
                out[:, [r, r2], [c, c2]] = out[:, [r2, r], [c2, c]]
    return _per_channel(out, lambda ch: ndimage.gaussian_filter(ch, sigma, mode="reflect"))


def motion_blur(img, p, rng):
    angle = rng.uniform(-p["angle_range"], p["angle_range"])
    return _convolve(img, line_kernel(p["kernel_len"], angle))


def _zoom_center(ch: np.ndarray, factor: float) -> np.ndarray:
    h, w = ch.shape
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    return ndimage.affine_transform(ch, np.eye(2) / factor, offset=center - center / factor,
                                    order=1, mode="reflect")


def zoom_blur(img, p, rng):
    factors = np.arange(1.0, p["max_zoom"], p["zoom_step"])[1:]
    acc = img.copy()
    for z in factors:
        acc += _per_channel(img, lambda ch: _zoom_center(ch, z))
    return acc / (len(factors) + 1)


def snow(img, p, rng):
    h, w = img.shape[1:]
    flakes = (rng.random((h, w)) < p["density"]) * rng.uniform(0.5, 1.0, size=(h, w))
    streak = ndimage.convolve(flakes, line_kernel(p["streak_len"], rng.uniform(-135, -45)), mode="wrap")
    streak = streak / max(streak.max(), 1e-12) * p["intensity"]
    whitened = np.maximum(img, _value_lift(img)[None] * 1.5 + 0.5)
    base = p["mix"] * img + (1 - p["mix"]) * whitened
    return base + streak[None] + np.rot90(streak, 2)[None] * 0.5


def frost(img, p, rng):
    h, w = img.shape[1:]
    field = _plasma(h, w, p["roughness"], rng)
    cut = np.quantile(field, p["coverage_quantile"])
    crystals = np.clip((field - cut) / max(1 - cut, 1e-12), 0, 1)
    crystals = ndimage.gaussian_filter(crystals, 0.5)
    tint = np.array([0.85, 0.9, 1.0])[:, None, None] if img.shape[0] == 3 else 0.9
    return p["keep"] * img + p["frost_weight"] * crystals[None] * tint


def fog(img, p, rng):
    h, w = img.shape[1:]
    field = _plasma(h, w, p["roughness"], rng)
    peak = img.max()
    return (img + p["intensity"] * field[None]) * peak / (peak + p["intensity"])


def brightness(img, p, rng):
    if img.shape[0] != 3:
        return img + p["shift"]
    value = img.max(axis=0)
    lifted = np.clip(value + p["shift"], 0, 1)
    ratio = np.where(value > 0, lifted / np.maximum(value, 1e-12), 0.0)
    # black pixels have undefined hue; they become gray at the lifted value
    return np.where(value[None] > 0, img * ratio[None], lifted[None])


def contrast(img, p, rng):
    mean = img.mean()
    return (img - mean) * p["factor"] + mean


def elastic(img, p, rng):
    h, w = img.shape[1:]
    fields = []
    for _ in range(2):
        d = ndimage.gaussian_filter(rng.uniform(-1, 1, size=(h, w)), p["smooth_sigma"], mode="reflect")
        std = d.std()
        fields.append(d / std * p["alpha"] if std > 0 else d)
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    coords = [rr + fields[0], cc + fields[1]]
    return _per_channel(img, lambda ch: ndimage.map_coordinates(ch, coords, order=1, mode="reflect"))


def pixelate(img, p, rng):
    f = float(p["factor"])
    if f < 1:
        raise ValueError(f"pixelate factor must be >= 1, got {f}")
    h, w = img.shape[1:]
    sh, sw = max(int(round(h / f)), 1), max(int(round(w / f)), 1)
    # nearest sample at the centre of each coarse cell, then nearest back up
    rows = np.minimum(((np.arange(sh) + 0.5) * h / sh).astype(int), h - 1)
    cols = np.minimum(((np.arange(sw) + 0.5) * w / sw).astype(int), w - 1)
    small = img[:, rows][:, :, cols]
    up_r = np.minimum((np.arange(h) * sh / h).astype(int), sh - 1)
    up_c = np.minimum((np.arange(w) * sw / w).astype(int), sw - 1)
    return small[:, up_r][:, :, up_c]


def jpeg(img, p, rng):
    if img.shape[0] == 3:
        return jpeg_roundtrip(img, int(p["quality"])).astype(np.float64)
    return np.stack([jpeg_roundtrip(np.repeat(ch[None], 3, 0), int(p["quality"]))[0] for ch in img])


GENERATORS = {
    "gaussian_noise": gaussian_noise,
    "shot_noise": shot_noise,
    "impulse_noise": impulse_noise,
    "defocus_blur": defocus_blur,
    "glass_blur": glass_blur,
    "motion_blur": motion_blur,
    "zoom_blur": zoom_blur,
    "snow": snow,
    "frost": frost,
    "fog": fog,
    "brightness": brightness,
    "contrast": contrast,
    "elastic": elastic,
    "pixelate": pixelate,
    "jpeg": jpeg,
}
