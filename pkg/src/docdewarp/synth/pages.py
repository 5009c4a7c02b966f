"""Built-in page and background generators, plus loaders for user images.

Generated pages are text-like: paragraphs of dark word bars, a title, the
odd ruled line and figure box. Feature sizes scale with the page size so a
64 px page looks like a shrunken 256 px one.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


def synthetic_page(rng: np.random.Generator, size: int = 256) -> np.ndarray:
    """An RGB float page in [0, 1] of shape ``(size, size, 3)``."""
    tint = np.array([1.0, 1.0, 1.0]) - rng.uniform(0.0, 0.08, size=3)
    ink = rng.uniform(0.0, 0.25, size=3)
    page = np.ones((size, size, 3)) * tint
    u = size / 256.0
    margin = int(round(rng.uniform(14, 26) * u))
    line_h = max(2, int(round(rng.uniform(6, 10) * u)))
    gap = max(2, int(round(line_h * rng.uniform(1.0, 1.5))))
    word_gap = max(2, int(round(8 * u)))
    y = margin

    def bar(y0, y1, x0, x1, color):
        page[max(y0, 0):min(y1, size), max(x0, 0):min(x1, size)] = color

    # title
    title_h = max(3, int(round(line_h * 1.8)))
    bar(y, y + title_h, margin, margin + int((size - 2 * margin) * rng.uniform(0.4, 0.8)), ink)
    y += title_h + 2 * gap
    while y < size - margin - line_h:
        block = rng.random()
        if block < 0.15 and y + int(50 * u) < size - margin:
            # figure: bordered box with a tinted fill
            fh = int(rng.uniform(30, 60) * u)
            fw = int((size - 2 * margin) * rng.uniform(0.4, 1.0))
            x0 = margin + int(rng.uniform(0, size - 2 * margin - fw + 1))
            t = max(1, int(round(3 * u)))
            bar(y, y + fh, x0, x0 + fw, ink)
            bar(y + t, y + fh - t, x0 + t, x0 + fw - t, rng.uniform(0.3, 0.9, size=3))
            y += fh + 2 * gap
        elif block < 0.25:
            # horizontal rule
            t = max(2, int(round(3 * u)))
            bar(y, y + t, margin, size - margin, ink)
            y += t + 2 * gap
        else:
            n_lines = int(rng.integers(2, 7))
            for li in range(n_lines):
                if y >= size - margin - line_h:
                    break
                x = margin + (int(3 * word_gap) if li == 0 else 0)
                right = size - margin if li < n_lines - 1 else margin + int((size - 2 * margin) * rng.uniform(0.3, 0.9))
                while x < right:
                    wlen = max(2, int(rng.uniform(8, 40) * u))
                    bar(y, y + line_h, x, min(x + wlen, right), ink)
                    x += wlen + word_gap
                y += line_h + gap
            y += gap
    return np.clip(page, 0.0, 1.0)


def synthetic_texture(rng: np.random.Generator, size: int = 256) -> np.ndarray:
    """A smooth, colored noise background in [0, 1]."""
    base = rng.uniform(0.05, 0.7, size=3)
    noise = rng.normal(size=(size, size, 3))
    sigma = rng.uniform(1.0, 6.0) * size / 256.0
    noise = ndimage.gaussian_filter(noise, sigma=(sigma, sigma, 0))
    noise /= noise.std() + 1e-12
    amp = rng.uniform(0.03, 0.15)
    tex = base + amp * noise
    if rng.random() < 0.5:
        # woven / striped variant
        period = rng.uniform(4, 16) * size / 256.0
        angle = rng.uniform(0, np.pi)
        yy, xx = np.mgrid[0:size, 0:size]
        stripes = np.sin((xx * np.cos(angle) + yy * np.sin(angle)) * 2 * np.pi / period)
        tex = tex + rng.uniform(0.02, 0.1) * stripes[..., None]
    return np.clip(tex, 0.0, 1.0)


def list_images(directory: str | os.PathLike) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"image directory not found: {d}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise FileNotFoundError(f"no images in {d}")
    return files


def load_rgb(path: str | os.PathLike, size: tuple[int, int] | None = None) -> np.ndarray:
    """Read an image as float RGB in [0, 1], optionally resized to ``(h, w)``."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None:
            im = im.resize((size[1], size[0]), Image.BILINEAR)
        return np.asarray(im, dtype=np.float64) / 255.0


def resize_rgb(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if img.shape[:2] == tuple(size):
        return img
    u8 = img.dtype == np.uint8
    im = Image.fromarray(img if u8 else to_uint8(img))
    out = np.asarray(im.resize((size[1], size[0]), Image.BILINEAR))
    return out if u8 else out.astype(np.float64) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
