"""Residual / inverse-illumination arithmetic between shadow and shadow-free images.

A shadow image I and its shadow-free counterpart are linked two ways:

  additive:        shadow_free = I + residual          (residual in [-1, 1])
  multiplicative:  shadow_free = I * inverse_illum     (inverse_illum in [0, S_MAX])

Targets are derived here; the same arithmetic recomposes predicted maps
back into displayable images (clamped to [0, 1]). Everything is pure
numpy on (H, W, 3) arrays.
"""

from __future__ import annotations

import warnings

import numpy as np

from .errors import DomainError, ShapeError

# The multiplicative target shadow_free / shadow is singular at black
# pixels. The denominator floor matches 8-bit quantization and S_MAX
# bounds the dynamic range so L1 training stays stable.
EPS_DEFAULT = 1.0 / 255.0
S_MAX = 10.0


class OtsuDegenerateWarning(UserWarning):
    """Otsu thresholding fell back to an all-zero mask (constant score field)."""


def _check_pair(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def gt_residual(shadow: np.ndarray, shadow_free: np.ndarray) -> np.ndarray:
    """Additive correction shadow_free - shadow, elementwise in [-1, 1]."""
    _check_pair(shadow, shadow_free, "gt_residual")
    return shadow_free - shadow


def gt_inverse_illumination(
    shadow: np.ndarray, shadow_free: np.ndarray, eps: float = EPS_DEFAULT
) -> np.ndarray:
    """Multiplicative gain shadow_free / max(shadow, eps), clamped to [0, S_MAX]."""
    _check_pair(shadow, shadow_free, "gt_inverse_illumination")
    if eps <= 0:
        raise DomainError(f"eps must be positive, got {eps}")
    return np.clip(shadow_free / np.maximum(shadow, eps), 0.0, S_MAX)


def apply_residual(shadow: np.ndarray, res: np.ndarray) -> np.ndarray:
    """Recompose shadow + residual, clamped to a displayable [0, 1] image."""
    _check_pair(shadow, res, "apply_residual")
    return np.clip(shadow + res, 0.0, 1.0)


def apply_illumination(shadow: np.ndarray, illum: np.ndarray) -> np.ndarray:
    """Recompose shadow * inverse_illumination, clamped to [0, 1]."""
    _check_pair(shadow, illum, "apply_illumination")
    return np.clip(shadow * illum, 0.0, 1.0)


def shadow_score(map_: np.ndarray, kind: str) -> np.ndarray:
    """Per-pixel shadow evidence from a predicted map.

    residual maps score by channel-mean |v| (shadow pixels need a large
    correction); illumination maps by channel-mean (v - 1) clamped below
    at 0 (shadow pixels need brightening, gain > 1).
    """
    if map_.ndim != 3 or map_.shape[2] != 3:
        raise ShapeError(f"map: expected (H, W, 3), got {map_.shape}")
    if kind == "residual":
        return np.abs(map_).mean(axis=2)
    if kind == "illumination":
        return np.maximum(map_ - 1.0, 0.0).mean(axis=2)
    raise DomainError(f"unknown map kind {kind!r}")


def otsu_threshold(score: np.ndarray, bins: int = 256) -> float | None:
    """Threshold maximizing between-class variance of the score histogram.

    Returns None for a constant score field. The threshold is the bin
    edge: pixels strictly above it are foreground.
    """
    lo, hi = float(score.min()), float(score.max())
    if hi <= lo:
        return None
    hist, edges = np.histogram(score, bins=bins, range=(lo, hi))
    hist = hist.astype(np.float64)
    total = hist.sum()
    centers = (edges[:-1] + edges[1:]) / 2.0

    w0 = np.cumsum(hist)
    w1 = total - w0
    sum0 = np.cumsum(hist * centers)
    mu0 = np.divide(sum0, w0, out=np.zeros_like(sum0), where=w0 > 0)
    mu1 = np.divide(sum0[-1] - sum0, w1, out=np.zeros_like(sum0), where=w1 > 0)
    between = w0 * w1 * (mu0 - mu1) ** 2
    # ignore splits that leave one class empty
    between[(w0 == 0) | (w1 == 0)] = -1.0
    k = int(np.argmax(between))
    if between[k] <= 0:
        return None
    return float(edges[k + 1])


def extract_shadow_mask(
    map_: np.ndarray,
    kind: str,
    method: str = "otsu",
    tau: float | None = None,
) -> np.ndarray:
    """Binarize a residual or illumination map into an (H, W) {0, 1} shadow mask.

    method "otsu" picks the threshold from a 256-bin score histogram;
    method "fixed" uses tau. A constant score field under otsu falls back
    to an all-zero mask with an OtsuDegenerateWarning.
    """
    score = shadow_score(map_, kind)
    if method == "otsu":
        thr = otsu_threshold(score)
        if thr is None:
            warnings.warn(
                "otsu: constant score field, returning all-zero mask",
                OtsuDegenerateWarning,
                stacklevel=2,
            )
            return np.zeros(score.shape, dtype=np.uint8)
    elif method == "fixed":
        if tau is None:
            raise DomainError("method 'fixed' requires tau")
        thr = float(tau)
    else:
        raise DomainError(f"unknown mask method {method!r}")
    return (score > thr).astype(np.uint8)


def residual_to_visual(res: np.ndarray) -> np.ndarray:
    """Affine map of a [-1, 1] residual to a displayable [0, 1] image."""
    return np.clip((res + 1.0) / 2.0, 0.0, 1.0)


def illumination_to_visual(illum: np.ndarray) -> np.ndarray:
    """Affine map of a [0, S_MAX] illumination gain to [0, 1]."""
    return np.clip(illum / S_MAX, 0.0, 1.0)
