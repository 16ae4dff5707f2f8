"""Per-pixel just-noticeable-difference thresholds for a reference image.

Pixel-domain model: luminance adaptation from the 5x5 mean background
plus contrast masking from four directional gradient operators, fused
with the usual nonlinear-additivity overlap term.  Outputs live in the
same [0, 1] intensity units as the images; internally the classical
formulas run on a [0, 255] scale.
"""

from __future__ import annotations

import numpy as np

from .imaging import check_image, to_luma

OVERLAP_COEFF = 0.3

# directional 5x5 masking operators (applied with a 1/16 normalisation)
GRADIENT_KERNELS = np.array([
    [[0, 0, 0, 0, 0],
     [1, 3, 8, 3, 1],
     [0, 0, 0, 0, 0],
     [-1, -3, -8, -3, -1],
     [0, 0, 0, 0, 0]],
    [[0, 0, 1, 0, 0],
     [0, 8, 3, 0, 0],
     [1, 3, 0, -3, -1],
     [0, 0, -3, -8, 0],
     [0, 0, -1, 0, 0]],
    [[0, 0, 1, 0, 0],
     [0, 0, 3, 8, 0],
     [-1, -3, 0, 3, 1],
     [0, -8, -3, 0, 0],
     [0, 0, -1, 0, 0]],
    [[0, 1, 0, -1, 0],
     [0, 3, 0, -3, 0],
     [0, 8, 0, -8, 0],
     [0, 3, 0, -3, 0],
     [0, 1, 0, -1, 0]],
], dtype=np.float64)


def _windows5(x: np.ndarray) -> np.ndarray:
    """All 5x5 neighbourhoods with edge replication at the borders."""
    padded = np.pad(x, 2, mode="edge")
    return np.lib.stride_tricks.sliding_window_view(padded, (5, 5))


def luminance_adaptation(luma) -> np.ndarray:
    """Visibility threshold from mean background luminance: high in dark
    regions, minimal near mid-gray, mildly rising toward white."""
    luma = to_luma(check_image(luma))[:, :, 0]
    bg = _windows5(luma * 255.0).mean(axis=(2, 3))
    dark = 17.0 * (1.0 - np.sqrt(bg / 127.0)) + 3.0
    bright = 3.0 * (bg - 127.0) / 128.0 + 3.0
    return np.where(bg <= 127.0, dark, bright) / 255.0


def contrast_masking(luma) -> np.ndarray:
    """Threshold from local activity: 0.115 * G**0.8 where G is the
    maximal absolute directional gradient response."""
    luma = to_luma(check_image(luma))[:, :, 0]
    wins = _windows5(luma * 255.0)
    responses = np.einsum("hwij,kij->khw", wins, GRADIENT_KERNELS, optimize=True) / 16.0
    grad = np.abs(responses).max(axis=0)
    return 0.115 * grad ** 0.8 / 255.0


def jnd_map(img) -> np.ndarray:
    """Fused (h, w) threshold map for a 1- or 3-channel image."""
    luma = to_luma(check_image(img))
    la = luminance_adaptation(luma)
    cm = contrast_masking(luma)
    fused = la + cm - OVERLAP_COEFF * np.minimum(la, cm)
    return np.maximum(fused, 0.0)
