"""Image I/O and overlap-masked quality metrics.

Images are (h, w, c) float64 arrays in [0, 1] with 1 or 3 channels;
masks are (h, w) uint8 arrays of exactly 0/1.  PNG goes through Pillow;
binary PPM (P6) and PGM (P5) are parsed directly so the test corpus
needs no codec at all.  Metrics operate on the float images, matching
the numerics of the differentiable path.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

PSNR_CAP = 99.0

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2

_LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


class ImageFormatError(ValueError):
    """Unsupported or corrupt image file."""


class EmptyMaskError(ValueError):
    """A masked metric needs at least one selected pixel."""


def check_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"expected (h, w, 1|3) image, got shape {img.shape}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return img


def check_mask(mask, shape) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.shape != shape:
        raise ValueError(f"mask shape {mask.shape} != image shape {shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask values must be exactly 0 or 1")
    return mask.astype(np.uint8)


# ---------------------------------------------------------------------------
# file formats


def load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    head = path.open("rb").read(8)
    if head[:2] in (b"P5", b"P6"):
        return _load_pnm(path)
    if head == b"\x89PNG\r\n\x1a\n":
        from PIL import Image

        with Image.open(path) as im:
            im = im.convert("L" if im.mode in ("1", "L", "I;16", "I") else "RGB")
            arr = np.asarray(im, dtype=np.float64) / 255.0
        return arr[:, :, None] if arr.ndim == 2 else arr
    raise ImageFormatError(f"{path}: not a PNG, PPM (P6), or PGM (P5) file")


def save_image(img, path) -> None:
    img = check_image(img)
    path = Path(path)
    data = np.round(img * 255.0).clip(0, 255).astype(np.uint8)
    suffix = path.suffix.lower()
    if suffix == ".png":
        from PIL import Image

        Image.fromarray(data[:, :, 0] if data.shape[2] == 1 else data).save(path)
    elif suffix in (".ppm", ".pgm"):
        _save_pnm(data, path, suffix)
    else:
        raise ImageFormatError(f"unsupported output format {suffix!r}")


def _load_pnm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    # header: magic, width, height, maxval, separated by whitespace/comments
    tokens = []
    pos = 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n)*\s*(\S+)").match(raw, pos)
        if not m:
            raise ImageFormatError(f"{path}: truncated header")
        tokens.append(m.group(2))
        pos = m.end()
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ImageFormatError(f"{path}: only maxval 255 supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    pos += 1  # single whitespace byte after maxval
    expected = w * h * channels
    body = raw[pos:pos + expected]
    if len(body) != expected:
        raise ImageFormatError(f"{path}: expected {expected} pixel bytes, got {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, channels)
    return arr.astype(np.float64) / 255.0


def _save_pnm(data: np.ndarray, path: Path, suffix: str) -> None:
    h, w, c = data.shape
    if suffix == ".ppm":
        if c == 1:
            data = np.repeat(data, 3, axis=2)
        header = b"P6\n%d %d\n255\n" % (w, h)
    else:
        if c == 3:
            raise ImageFormatError("PGM holds a single channel; convert to luma first")
        header = b"P5\n%d %d\n255\n" % (w, h)
    path.write_bytes(header + data.tobytes())


# ---------------------------------------------------------------------------
# conversions and metrics


def to_luma(img) -> np.ndarray:
    """ITU-R 601 luma; single-channel input passes through."""
    img = check_image(img)
    if img.shape[2] == 1:
        return img
    return (img @ _LUMA_WEIGHTS)[:, :, None]


def average_fusion(a, b) -> np.ndarray:
    a, b = check_image(a), check_image(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return (a + b) / 2.0


def psnr_masked(a, b, mask) -> float:
    """PSNR over mask==1 pixels (all channels), peak 1.0, capped at 99 dB."""
    a, b = check_image(a), check_image(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mask = check_mask(mask, a.shape[:2])
    sel = mask == 1
    if not sel.any():
        raise EmptyMaskError("mask selects no pixels")
    mse = float(np.mean((a[sel] - b[sel]) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def ssim_masked(a, b, mask) -> float:
    """Mean SSIM over 11x11 Gaussian windows (sigma 1.5) on luminance,
    averaged over fully interior window centres where mask==1."""
    a, b = check_image(a), check_image(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mask = check_mask(mask, a.shape[:2])
    la = to_luma(a)[:, :, 0]
    lb = to_luma(b)[:, :, 0]
    h, w = la.shape
    half = _SSIM_WINDOW // 2
    if h < _SSIM_WINDOW or w < _SSIM_WINDOW:
        raise ValueError(f"image {h}x{w} smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} SSIM window")
    centre_sel = mask[half:h - half, half:w - half] == 1
    if not centre_sel.any():
        raise EmptyMaskError("mask selects no interior window centres")
    win = _gaussian_window(_SSIM_WINDOW, _SSIM_SIGMA)

    def stats(x):
        v = np.lib.stride_tricks.sliding_window_view(x, (_SSIM_WINDOW, _SSIM_WINDOW))
        return np.einsum("hwij,ij->hw", v, win, optimize=True)

    mu_a = stats(la)
    mu_b = stats(lb)
    var_a = stats(la * la) - mu_a ** 2
    var_b = stats(lb * lb) - mu_b ** 2
    cov = stats(la * lb) - mu_a * mu_b
    num = (2 * mu_a * mu_b + _SSIM_C1) * (2 * cov + _SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    return float(np.mean((num / den)[centre_sel]))
