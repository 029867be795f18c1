"""Image I/O and sRGB <-> CIELAB conversion.

Images are float arrays of shape (H, W, 3) with values in [0, 1],
sRGB-encoded. Lab arrays are float64 of the same shape with
L in [0, 100] and a, b roughly in [-128, 128].

Conversion pins the IEC 61966-2-1 sRGB transfer function
(linear-segment threshold 0.04045), the D65 reference white
(0.95047, 1.0, 1.08883) and the CIE 1976 L*a*b* formulas with the
exact rational constants epsilon = 216/24389 and kappa = 24389/27.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .errors import DomainError, FormatError, ShapeError

# sRGB (linear, D65) -> XYZ. Rows sum exactly to the reference white in
# decimal so the white point lands on L*=100, a*=b*=0.
RGB_TO_XYZ = np.array(
    [
        [0.4124564391, 0.3575760776, 0.1804374833],
        [0.2126728514, 0.7151521553, 0.0721749933],
        [0.0193338956, 0.1191920259, 0.9503040785],
    ],
    dtype=np.float64,
)
XYZ_TO_RGB = np.linalg.inv(RGB_TO_XYZ)

WHITE_POINT = np.array([0.95047, 1.0, 1.08883], dtype=np.float64)

_LAB_EPSILON = 216.0 / 24389.0
_LAB_KAPPA = 24389.0 / 27.0
_SRGB_LINEAR_THRESHOLD = 0.04045


def check_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    """Validate an (H, W, 3) array with values in [0, 1]; returns it clipped.

    Raises ShapeError for bad shapes and DomainError for values outside
    [0, 1] beyond float slack.
    """
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"{name}: expected (H, W, 3), got {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ShapeError(f"{name}: empty spatial extent {img.shape}")
    if not np.isfinite(img).all():
        raise DomainError(f"{name}: non-finite values")
    lo, hi = float(img.min()), float(img.max())
    if lo < -1e-6 or hi > 1.0 + 1e-6:
        raise DomainError(f"{name}: values outside [0, 1] (min {lo}, max {hi})")
    return np.clip(img, 0.0, 1.0)


def load_image(path, target_size: tuple[int, int] | None = None) -> np.ndarray:
    """Decode an 8-bit RGB PNG/JPEG into a float32 (H, W, 3) array in [0, 1].

    target_size is (height, width); when given, a bilinear resize is applied
    after normalization. Unreadable files raise OSError, non-RGB files
    raise FormatError.
    """
    with Image.open(path) as im:
        im.load()
        if im.mode != "RGB":
            raise FormatError(f"{path}: expected 8-bit RGB, got mode {im.mode!r}")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if target_size is not None:
        arr = resize_bilinear(arr, target_size)
    return arr


def resize_bilinear(img: np.ndarray, target_size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize to (height, width), corner alignment off."""
    h, w = int(target_size[0]), int(target_size[1])
    if h < 1 or w < 1:
        raise ShapeError(f"target_size must be positive, got {target_size}")
    if img.shape[:2] == (h, w):
        return img
    channels = [
        np.asarray(
            Image.fromarray(np.ascontiguousarray(img[:, :, c], dtype=np.float32), mode="F").resize(
                (w, h), Image.BILINEAR
            )
        )
        for c in range(3)
    ]
    return np.clip(np.stack(channels, axis=2), 0.0, 1.0)


def save_image(img: np.ndarray, path) -> None:
    """Write a [0, 1] image as an 8-bit 3-channel PNG (no alpha).

    Round trip through load_image differs by at most 1/510 per value.
    """
    img = check_image(img)
    codes = np.round(img * 255.0).astype(np.uint8)
    Image.fromarray(codes, mode="RGB").save(path)


def _srgb_to_linear(v: np.ndarray) -> np.ndarray:
    return np.where(
        v <= _SRGB_LINEAR_THRESHOLD,
        v / 12.92,
        ((v + 0.055) / 1.055) ** 2.4,
    )


def _linear_to_srgb(v: np.ndarray) -> np.ndarray:
    v = np.clip(v, 0.0, None)
    return np.where(
        v <= 0.0031308,
        v * 12.92,
        1.055 * v ** (1.0 / 2.4) - 0.055,
    )


def _lab_f(t: np.ndarray) -> np.ndarray:
    return np.where(t > _LAB_EPSILON, np.cbrt(t), (_LAB_KAPPA * t + 16.0) / 116.0)


def _lab_f_inverse(f: np.ndarray) -> np.ndarray:
    f3 = f**3
    return np.where(f3 > _LAB_EPSILON, f3, (116.0 * f - 16.0) / _LAB_KAPPA)


def srgb_to_lab(img: np.ndarray) -> np.ndarray:
    """Convert an sRGB image in [0, 1] to CIE 1976 L*a*b* under D65.

    Pure and deterministic; arithmetic runs in float64. Gray inputs map to
    a* = b* = 0 and the white/black points to (100, 0, 0) / (0, 0, 0).
    """
    img = check_image(img).astype(np.float64)
    linear = _srgb_to_linear(img)
    xyz = linear @ RGB_TO_XYZ.T
    f = _lab_f(xyz / WHITE_POINT)
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    lab = np.empty_like(img)
    lab[..., 0] = 116.0 * fy - 16.0
    lab[..., 1] = 500.0 * (fx - fy)
    lab[..., 2] = 200.0 * (fy - fz)
    return lab


def lab_to_srgb(lab: np.ndarray) -> np.ndarray:
    """Invert srgb_to_lab; out-of-gamut values are clipped to [0, 1].

    Exact round trip holds only for Lab triples that came from valid sRGB.
    """
    lab = np.asarray(lab, dtype=np.float64)
    if lab.ndim != 3 or lab.shape[2] != 3:
        raise ShapeError(f"lab: expected (H, W, 3), got {lab.shape}")
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    xyz = np.stack([_lab_f_inverse(fx), _lab_f_inverse(fy), _lab_f_inverse(fz)], axis=-1)
    xyz = xyz * WHITE_POINT
    linear = xyz @ XYZ_TO_RGB.T
    return np.clip(_linear_to_srgb(linear), 0.0, 1.0)


def quantize_to_8bit(img: np.ndarray) -> np.ndarray:
    """Snap values to the 8-bit code lattice (round(v*255)/255)."""
    img = check_image(img)
    return np.round(img * 255.0) / 255.0
