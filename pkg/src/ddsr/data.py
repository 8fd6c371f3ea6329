"""Synthetic SR data: procedural HR images, degradations, paired patches.

Every random draw goes through ``np.random.default_rng`` seeded from an
explicit integer sequence, so a corpus or an LR set is a pure function of
its arguments.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

PROFILES = ("simulated", "realistic", "realistic-b")


# -- bicubic resampling --------------------------------------------------------

def cubic_kernel(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel; ``a=-0.5`` is Catmull-Rom."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def symmetric_index(j: np.ndarray, n: int) -> np.ndarray:
    """Half-sample symmetric boundary: ``-1 -> 0``, ``n -> n-1``."""
    period = 2 * n
    j = np.mod(j, period)
    return np.where(j < n, j, period - 1 - j)


@lru_cache(maxsize=64)
def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense ``[n_out, n_in]`` bicubic resampling operator.

    Pixel centers are aligned (``x_in = (i + 0.5) / s - 0.5``). When
    shrinking, the kernel is stretched by ``1/s`` to antialias, as MATLAB's
    ``imresize`` does. Rows are normalized to sum to one.
    """
    s = n_out / n_in
    k_scale = min(s, 1.0)
    half = 2.0 / k_scale
    mat = np.zeros((n_out, n_in))
    for i in range(n_out):
        center = (i + 0.5) / s - 0.5
        taps = np.arange(int(np.floor(center - half)), int(np.ceil(center + half)) + 1)
        w = cubic_kernel((center - taps) * k_scale)
        w /= w.sum()
        np.add.at(mat[i], symmetric_index(taps, n_in), w)
    mat.setflags(write=False)
    return mat


def resize(img: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bicubic resize over the last two axes."""
    H, W = img.shape[-2:]
    rh = resize_matrix(H, out_hw[0])
    rw = resize_matrix(W, out_hw[1])
    out = np.einsum("ih,...hw,jw->...ij", rh, img.astype(np.float64), rw, optimize=True)
    return out


def bicubic_down(img: np.ndarray, scale: int) -> np.ndarray:
    H, W = img.shape[-2:]
    if H % scale or W % scale:
        raise ValueError(f"image {H}x{W} is not divisible by scale {scale}")
    return resize(img, (H // scale, W // scale))


def bicubic_up(img: np.ndarray, scale: int) -> np.ndarray:
    H, W = img.shape[-2:]
    return resize(img, (H * scale, W * scale))


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with radius ``ceil(3 sigma)`` and symmetric borders."""
    if sigma <= 0:
        return img.astype(np.float64)
    radius = max(1, int(np.ceil(3 * sigma)))
    taps = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (taps / sigma) ** 2)
    k /= k.sum()
    out = img.astype(np.float64)
    for axis in (-2, -1):
        n = out.shape[axis]
        idx = symmetric_index(np.arange(n)[:, None] + taps[None, :], n)  # [n, taps]
        gathered = np.take(out, idx, axis=axis)  # axis expands into (n, taps)
        pos = out.ndim + axis + 1
        out = np.tensordot(gathered, k, axes=([pos], [0]))
    return out


# -- degradations ------------------------------------------------------------

@dataclass(frozen=True)
class DegradationSpec:
    """Recipe mapping HR images to LR images.

    ``simulated`` is bicubic only. The realistic profiles blur with a
    Gaussian whose sigma is drawn per image from ``blur_sigma_range``, then
    downsample bicubically, add Gaussian noise and clip to [0, 1].
    """

    profile: str = "simulated"
    blur_sigma_range: tuple[float, float] = (0.0, 0.0)
    noise_sigma: float = 0.0
    scale: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"unknown degradation profile {self.profile!r}; expected one of {PROFILES}")
        lo, hi = self.blur_sigma_range
        if lo < 0 or hi < lo:
            raise ValueError(f"bad blur sigma range {self.blur_sigma_range}")
        if not 0 <= self.noise_sigma <= 1:
            raise ValueError("noise sigma must lie in [0, 1]")
        if self.scale < 1:
            raise ValueError("scale must be positive")
        if self.profile == "simulated" and (hi > 0 or self.noise_sigma > 0):
            raise ValueError("the simulated profile is bicubic only (no blur, no noise)")

    @classmethod
    def preset(cls, profile: str, scale: int, seed: int = 0) -> DegradationSpec:
        if profile == "simulated":
            return cls("simulated", (0.0, 0.0), 0.0, scale, seed)
        if profile == "realistic":
            return cls("realistic", (0.8, 1.4), 0.01, scale, seed)
        if profile == "realistic-b":
            return cls("realistic-b", (1.2, 2.0), 0.02, scale, seed)
        raise ValueError(f"unknown degradation profile {profile!r}; expected one of {PROFILES}")

    def with_seed(self, seed: int) -> DegradationSpec:
        return replace(self, seed=seed)


def degrade(hr: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    """Degrade ``[N, C, H, W]`` (or ``[C, H, W]``) HR images into LR images.

    Image ``i`` draws its blur sigma and noise from ``default_rng([seed, i])``,
    so results do not depend on how a set is batched.
    """
    hr = np.asarray(hr, dtype=np.float64)
    single = hr.ndim == 3
    if single:
        hr = hr[None]
    H, W = hr.shape[-2:]
    if H % spec.scale or W % spec.scale:
        raise ValueError(f"HR size {H}x{W} is not divisible by scale {spec.scale}")
    out = np.empty(hr.shape[:2] + (H // spec.scale, W // spec.scale))
    lo, hi = spec.blur_sigma_range
    for i, img in enumerate(hr):
        if spec.profile == "simulated":
            out[i] = bicubic_down(img, spec.scale)
            continue
        rng = np.random.default_rng([spec.seed, i])
        sigma = rng.uniform(lo, hi)
        lr = bicubic_down(gaussian_blur(img, sigma), spec.scale)
        if spec.noise_sigma > 0:
            lr = lr + rng.normal(0.0, spec.noise_sigma, lr.shape)
        out[i] = np.clip(lr, 0.0, 1.0)
    return out[0] if single else out


# -- procedural HR corpus ------------------------------------------------------

def _grating(rng, yy, xx):
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(0.04, 0.22)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    return 0.5 + 0.5 * (np.sign(wave) if rng.random() < 0.4 else wave)


def _rectangles(rng, yy, xx, size):
    canvas = np.full(yy.shape, rng.uniform(0.2, 0.8))
    for _ in range(rng.integers(3, 9)):
        y0, x0 = rng.integers(0, size, 2)
        h, w = rng.integers(size // 10 + 1, size // 2 + 2, 2)
        canvas[(yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)] = rng.uniform(0, 1)
    return canvas


def _strokes(rng, yy, xx, size):
    """Thin horizontal and vertical bars in rows, loosely resembling text."""
    canvas = np.full(yy.shape, rng.uniform(0.7, 1.0))
    ink = rng.uniform(0.0, 0.3)
    line_h = int(rng.integers(6, 12))
    for top in range(int(rng.integers(1, 4)), size - line_h, line_h + int(rng.integers(2, 5))):
        x = int(rng.integers(0, 4))
        while x < size - 2:
            w = int(rng.integers(1, 3))
            if rng.random() < 0.7:
                canvas[top:top + line_h, x:x + w] = ink
            if rng.random() < 0.3:
                canvas[top + int(rng.integers(0, line_h)), x:x + int(rng.integers(2, 6))] = ink
            x += w + int(rng.integers(1, 4))
    return canvas


def _rings(rng, yy, xx, size):
    cy, cx = rng.uniform(0, size, 2)
    r = np.hypot(yy - cy, xx - cx)
    return 0.5 + 0.5 * np.cos(2 * np.pi * r * rng.uniform(0.05, 0.2))


def synthetic_image(size: int, rng: np.random.Generator, channels: int = 3) -> np.ndarray:
    """One ``[channels, size, size]`` image in [0, 1] mixing edges, gratings and strokes."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    makers = (
        lambda: _grating(rng, yy, xx),
        lambda: _rectangles(rng, yy, xx, size),
        lambda: _strokes(rng, yy, xx, size),
        lambda: _rings(rng, yy, xx, size),
    )
    first, second = rng.choice(len(makers), size=2, replace=False)
    base = makers[first]()
    detail = makers[second]()
    mix = rng.uniform(0.25, 0.6)
    luma = (1 - mix) * base + mix * detail
    tint_a, tint_b = rng.uniform(0.2, 1.0, (2, channels))
    grad = (xx / max(size - 1, 1))[None] if rng.random() < 0.5 else (yy / max(size - 1, 1))[None]
    tint = tint_a[:, None, None] * (1 - grad) + tint_b[:, None, None] * grad
    img = luma[None] * tint + 0.15 * (1 - tint) * rng.random()
    return np.clip(img, 0.0, 1.0)


def synthetic_corpus(n: int, size: int, seed: int, channels: int = 3) -> np.ndarray:
    """``[n, channels, size, size]`` procedural HR images; image ``i`` uses ``default_rng([seed, i])``."""
    if n < 0 or size < 1:
        raise ValueError("corpus needs n >= 0 and size >= 1")
    out = np.empty((n, channels, size, size))
    for i in range(n):
        out[i] = synthetic_image(size, np.random.default_rng([seed, i]), channels)
    return out


@dataclass
class PairedSet:
    """Aligned HR images and their degraded LR counterparts."""

    hr: np.ndarray
    lr: np.ndarray
    scale: int

    def __post_init__(self):
        if len(self.hr) != len(self.lr):
            raise ValueError("HR and LR sets differ in length")
        if self.hr.shape[-2] != self.lr.shape[-2] * self.scale or self.hr.shape[-1] != self.lr.shape[-1] * self.scale:
            raise ValueError(f"HR {self.hr.shape} and LR {self.lr.shape} do not match scale {self.scale}")

    def __len__(self) -> int:
        return len(self.hr)

    @classmethod
    def build(cls, hr: np.ndarray, spec: DegradationSpec) -> PairedSet:
        return cls(np.asarray(hr, dtype=np.float64), degrade(hr, spec), spec.scale)

    def subset(self, n: int) -> PairedSet:
        if n > len(self):
            raise ValueError(f"asked for {n} images from a set of {len(self)}")
        return PairedSet(self.hr[:n], self.lr[:n], self.scale)

    def astype(self, dtype) -> PairedSet:
        return PairedSet(self.hr.astype(dtype), self.lr.astype(dtype), self.scale)


class PatchSampler:
    """Random aligned LR/HR crops with flips, from one seeded stream."""

    def __init__(self, pairs: PairedSet, patch: int, batch: int, seed: int, dtype=np.float32):
        h, w = pairs.lr.shape[-2:]
        if patch > min(h, w):
            raise ValueError(f"LR patch {patch} larger than LR images {h}x{w}")
        self.pairs = pairs
        self.patch = patch
        self.batch = batch
        self.dtype = dtype
        self.rng = np.random.default_rng([seed, 99])

    def next(self) -> tuple[np.ndarray, np.ndarray]:
        p, s = self.patch, self.pairs.scale
        h, w = self.pairs.lr.shape[-2:]
        idx = self.rng.integers(0, len(self.pairs), self.batch)
        ys = self.rng.integers(0, h - p + 1, self.batch)
        xs = self.rng.integers(0, w - p + 1, self.batch)
        flips = self.rng.integers(0, 2, (self.batch, 2))
        lr_out, hr_out = [], []
        for i, y, x, (fy, fx) in zip(idx, ys, xs, flips):
            lr = self.pairs.lr[i, :, y:y + p, x:x + p]
            hr = self.pairs.hr[i, :, y * s:(y + p) * s, x * s:(x + p) * s]
            if fy:
                lr, hr = lr[:, ::-1], hr[:, ::-1]
            if fx:
                lr, hr = lr[:, :, ::-1], hr[:, :, ::-1]
            lr_out.append(lr)
            hr_out.append(hr)
        return np.stack(lr_out).astype(self.dtype), np.stack(hr_out).astype(self.dtype)


# -- named sets and image files --------------------------------------------------

ROLES = {"train": 1, "eval": 2}


def corpus_seed(seed: int, role: str, profile: str) -> int:
    """Integer seed of the synthetic set a ``(seed, role, profile)`` triple names.

    Training and held-out sets never share images, and each degradation
    profile gets its own HR images.
    """
    return seed * 1000 + ROLES[role] * 10 + PROFILES.index(profile)


def synthetic_pairs(profile: str, n: int, size: int, scale: int, seed: int, role: str = "train") -> PairedSet:
    code = corpus_seed(seed, role, profile)
    return PairedSet.build(synthetic_corpus(n, size, code), DegradationSpec.preset(profile, scale, code))


def read_png(path) -> np.ndarray:
    """``[3, H, W]`` float64 in [0, 1] from an 8-bit image file."""
    from PIL import Image

    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr.transpose(2, 0, 1) / 255.0


def quantize(img: np.ndarray) -> np.ndarray:
    """Clip to [0, 1] and round half up to 8 bits."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(img: np.ndarray, path) -> None:
    """Write ``[3, H, W]`` RGB or ``[H, W]`` gray values in [0, 1] as PNG."""
    from PIL import Image

    q = quantize(img)
    if q.ndim == 3:
        q = q.transpose(1, 2, 0)
    Image.fromarray(q).save(path, format="PNG")


def load_image_dir(path, scale: int) -> np.ndarray:
    """All PNGs in ``path`` as one ``[N, 3, S, S]`` HR stack.

    Images are center-cropped to the largest square that fits every file and
    divides by ``scale``.
    """
    from pathlib import Path

    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise FileNotFoundError(f"no PNG images in {path}")
    imgs = [read_png(f) for f in files]
    side = min(min(i.shape[1:]) for i in imgs)
    side -= side % scale
    if side < scale:
        raise ValueError(f"images in {path} are smaller than scale {scale}")
    out = []
    for img in imgs:
        top = (img.shape[1] - side) // 2
        left = (img.shape[2] - side) // 2
        out.append(img[:, top:top + side, left:left + side])
    return np.stack(out)
