"""Grayscale image handling, patching, noise and quality metrics."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LUMA_WEIGHTS = (0.299, 0.587, 0.114)  # BT.601

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class GrayImage:
    """Row-major grayscale pixels in [0, 1]; out-of-range input is clamped."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or min(v.shape) < 1:
            raise ValueError(f"image must be a non-empty 2-D array, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("image contains non-finite values")
        v = np.clip(v, 0.0, 1.0)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class PatchLayout:
    N: int
    rows: int
    cols: int
    width: int
    height: int

    @property
    def count(self) -> int:
        return self.rows * self.cols


def _values(img) -> np.ndarray:
    return img.values if isinstance(img, GrayImage) else np.asarray(img, dtype=np.float64)


def to_luma(rgb) -> GrayImage:
    """8-bit RGB (H, W, 3) to BT.601 luma in [0, 1]."""
    a = np.asarray(rgb)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) RGB array, got shape {a.shape}")
    r, g, b = (a[..., c].astype(np.float64) for c in range(3))
    wr, wg, wb = LUMA_WEIGHTS
    return GrayImage((wr * r + wg * g + wb * b) / 255.0)


def pad_and_patch(img, N: int) -> tuple[np.ndarray, PatchLayout]:
    """Zero-pad right/bottom to multiples of N and cut row-major N x N patches.

    Returns a ``(rows * cols, N, N)`` array and the layout needed to undo it.
    """
    v = _values(img)
    h, w = v.shape
    rows, cols = -(-h // N), -(-w // N)
    padded = np.zeros((rows * N, cols * N))
    padded[:h, :w] = v
    patches = padded.reshape(rows, N, cols, N).transpose(0, 2, 1, 3).reshape(-1, N, N)
    return patches, PatchLayout(N, rows, cols, w, h)


def stitch(patches, layout: PatchLayout) -> GrayImage:
    """Reassemble patches and crop away the padding."""
    p = np.asarray(patches, dtype=np.float64)
    if layout.count == 0:
        raise ValueError("layout has an empty patch grid")
    N = layout.N
    if p.shape != (layout.count, N, N):
        raise ValueError(f"expected {layout.count} patches of {N}x{N}, got shape {p.shape}")
    full = p.reshape(layout.rows, layout.cols, N, N).transpose(0, 2, 1, 3)
    full = full.reshape(layout.rows * N, layout.cols * N)
    return GrayImage(full[: layout.height, : layout.width])


def add_gaussian_noise(img, sigma: float, seed: int) -> GrayImage:
    """Add i.i.d. N(0, sigma^2) to every pixel, then clamp to [0, 1]."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    v = _values(img)
    if sigma == 0:
        return img if isinstance(img, GrayImage) else GrayImage(v)
    rng = np.random.default_rng(seed)
    return GrayImage(v + rng.normal(0.0, sigma, size=v.shape))


def _check_pair(a, b):
    a, b = _values(a), _values(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``inf``.

    Use ``data_range=255`` for images on the 8-bit scale.
    """
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def _blur_valid(x, w):
    k = w.size
    x = sliding_window_view(x, k, axis=0) @ w
    return sliding_window_view(x, k, axis=1) @ w


def ssim_map(a, b, data_range: float = 1.0) -> np.ndarray:
    a, b = _check_pair(a, b)
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    w = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _blur_valid(a, w), _blur_valid(b, w)
    var_a = _blur_valid(a * a, w) - mu_a**2
    var_b = _blur_valid(b * b, w) - mu_b**2
    cov = _blur_valid(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM over all full 11x11 Gaussian windows (sigma 1.5, K1 0.01, K2 0.03)."""
    a_, b_ = _check_pair(a, b)
    if a_.shape == b_.shape and np.array_equal(a_, b_):
        return 1.0
    return float(np.clip(ssim_map(a_, b_, data_range).mean(), -1.0, 1.0))


# --- file formats -----------------------------------------------------------


def _pgm_tokens(data: bytes):
    """Yield header tokens and the offset just past the last one."""
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise ValueError("truncated PGM header")
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte precedes the raster


def read_pgm(path) -> GrayImage:
    """Binary (P5) PGM, 8- or 16-bit."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, offset = _pgm_tokens(data)
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    width, height, maxval = (int(t) for t in tokens[1:])
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ValueError(f"{path}: bad PGM dimensions or maxval")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height
    if len(data) - offset < count * dtype.itemsize:
        raise ValueError(f"{path}: truncated PGM raster")
    raster = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    return GrayImage(raster.reshape(height, width).astype(np.float64) / maxval)


def write_pgm(path, img, maxval: int = 255) -> None:
    v = _values(img)
    q = np.rint(np.clip(v, 0, 1) * maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as fh:
        fh.write(f"P5\n{v.shape[1]} {v.shape[0]}\n{maxval}\n".encode("ascii"))
        fh.write(q.astype(dtype).tobytes())


def read_image(path) -> GrayImage:
    """PGM natively; other formats through Pillow when it is installed."""
    if os.fspath(path).lower().endswith((".pgm", ".pnm")):
        return read_pgm(path)
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise ValueError(f"{path}: only PGM is supported without Pillow") from exc
    with Image.open(path) as im:
        if im.mode in ("L", "I;16", "I"):
            a = np.asarray(im, dtype=np.float64)
            return GrayImage(a / (65535.0 if a.max() > 255 else 255.0))
        return to_luma(np.asarray(im.convert("RGB")))


def synthetic_image(width: int, height: int, seed: int, components: int = 6) -> GrayImage:
    """Smooth random test image quantised to multiples of 1/256.

    A sum of low-frequency oriented cosines plus a gradient, rescaled to
    [0.1, 0.9]. Dyadic pixel values make the Hadamard round trip exact.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    field = rng.normal() * xx / width + rng.normal() * yy / height
    for _ in range(components):
        fx, fy = rng.uniform(-1, 1, 2) * 2 * np.pi / 16
        field += rng.uniform(0.3, 1.0) * np.cos(fx * xx + fy * yy + rng.uniform(0, 2 * np.pi))
    field = (field - field.min()) / max(field.max() - field.min(), 1e-12)
    return GrayImage(np.round((0.1 + 0.8 * field) * 256) / 256)
