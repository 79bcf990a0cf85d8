"""sRGB / XYZ / CIELAB / LCh conversions and the grayscale-grade calibration.

All array functions take colors on the last axis, shape ``(..., 3)``, and
operate in float64 unless given float32 input.  XYZ is scaled so that the
reference white has ``Y = 100``.
"""

from __future__ import annotations

import threading
from typing import NamedTuple

import numpy as np


class RgbColor(NamedTuple):
    r: float
    g: float
    b: float


class XyzColor(NamedTuple):
    x: float
    y: float
    z: float


class LabColor(NamedTuple):
    l: float
    a: float
    b: float


class WhitePoint(NamedTuple):
    xn: float
    yn: float
    zn: float


def white_from_xy(x: float, y: float) -> WhitePoint:
    """Reference white with ``Y = 100`` from its CIE 1931 chromaticity."""
    return WhitePoint(100.0 * x / y, 100.0, 100.0 * (1.0 - x - y) / y)


# D65 under the 2 degree observer.  The 10 degree white is provided for
# callers that want to match a 10 degree display characterization.
D65 = white_from_xy(0.3127, 0.3290)
D65_10 = white_from_xy(0.31382, 0.33100)


def _rgb_to_xyz_matrix() -> np.ndarray:
    # Built from the sRGB primaries so that (1, 1, 1) lands exactly on D65.
    prim = np.array([[0.64, 0.33], [0.30, 0.60], [0.15, 0.06]])
    xyz = np.stack([prim[:, 0] / prim[:, 1], np.ones(3),
                    (1.0 - prim[:, 0] - prim[:, 1]) / prim[:, 1]])
    scale = np.linalg.solve(xyz, np.asarray(D65) / 100.0)
    return xyz * scale


RGB_TO_XYZ = _rgb_to_xyz_matrix()
XYZ_TO_RGB = np.linalg.inv(RGB_TO_XYZ)

def _as_float(x) -> np.ndarray:
    # float32 stays float32 (training path); everything else goes to float64.
    x = np.asarray(x)
    return x if x.dtype == np.float32 else x.astype(np.float64)


_EPS = (6.0 / 29.0) ** 3
_KAPPA = 1.0 / (3.0 * (6.0 / 29.0) ** 2)


class ClampCounter:
    """Thread-safe tally of sRGB components clamped into [0, 1] on decode."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.count = 0

    def add(self, n: int) -> None:
        if n:
            with self._lock:
                self.count += int(n)

    def reset(self) -> int:
        with self._lock:
            n, self.count = self.count, 0
        return n


clamp_counter = ClampCounter()


def srgb_to_linear(c):
    """Decode gamma-encoded sRGB components to linear light.

    Out-of-range inputs are clamped to [0, 1] and tallied in
    :data:`clamp_counter`.
    """
    c = _as_float(c)
    out_of_range = (c < 0.0) | (c > 1.0)
    n_bad = int(np.count_nonzero(out_of_range))
    if n_bad:
        clamp_counter.add(n_bad)
        c = np.clip(c, 0.0, 1.0)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(c):
    """Inverse of :func:`srgb_to_linear` (no clamping)."""
    c = _as_float(c)
    safe = np.maximum(c, 0.0031308)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * safe ** (1.0 / 2.4) - 0.055)


def srgb_to_xyz(rgb):
    lin = srgb_to_linear(rgb)
    return 100.0 * lin @ RGB_TO_XYZ.T.astype(lin.dtype)


def xyz_to_srgb(xyz, clip: bool = True):
    """XYZ (Y=100 white) to gamma-encoded sRGB.

    Returns ``(rgb, n_clipped)`` where ``n_clipped`` counts components that
    fell outside [0, 1] before clipping.  With ``clip=False`` nothing is
    clipped but the count is still reported.
    """
    xyz = np.asarray(xyz, dtype=float)
    lin = (xyz / 100.0) @ XYZ_TO_RGB.T
    bad = (lin < -1e-9) | (lin > 1.0 + 1e-9)
    n_clipped = int(np.count_nonzero(bad))
    if clip:
        lin = np.clip(lin, 0.0, 1.0)
    return linear_to_srgb(lin), n_clipped


def _f(t):
    return np.where(t > _EPS, np.cbrt(t), _KAPPA * t + 4.0 / 29.0)


def _f_inv(t):
    return np.where(t > 6.0 / 29.0, t ** 3, (t - 4.0 / 29.0) / _KAPPA)


def xyz_to_lab(xyz, white: WhitePoint = D65):
    xyz = _as_float(xyz)
    w = np.asarray(white, dtype=xyz.dtype)
    fx, fy, fz = np.moveaxis(_f(xyz / w), -1, 0)
    return np.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-1)


def lab_to_xyz(lab, white: WhitePoint = D65):
    lab = _as_float(lab)
    l, a, b = np.moveaxis(lab, -1, 0)
    fy = (l + 16.0) / 116.0
    f = np.stack([fy + a / 500.0, fy, fy - b / 200.0], axis=-1)
    return _f_inv(f) * np.asarray(white, dtype=lab.dtype)


def srgb_to_lab(rgb, white: WhitePoint = D65):
    """Gamma-encoded sRGB in [0, 1] to CIELAB relative to ``white``."""
    return xyz_to_lab(srgb_to_xyz(rgb), white)


def lab_to_srgb(lab, white: WhitePoint = D65, clip: bool = True):
    """CIELAB to sRGB; returns ``(rgb, n_clipped)`` like :func:`xyz_to_srgb`."""
    return xyz_to_srgb(lab_to_xyz(lab, white), clip=clip)


def srgb_to_lab_vjp(rgb, grad_lab, white: WhitePoint = D65):
    """Vector-Jacobian product of :func:`srgb_to_lab` at ``rgb``.

    Components outside [0, 1] get zero gradient (they are clamped on decode).
    """
    rgb = np.asarray(rgb, dtype=float)
    g = np.asarray(grad_lab, dtype=float)
    inside = (rgb >= 0.0) & (rgb <= 1.0)
    c = np.clip(rgb, 0.0, 1.0)
    lin = np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)
    dlin = np.where(c <= 0.04045, 1.0 / 12.92, 2.4 / 1.055 * ((c + 0.055) / 1.055) ** 1.4)
    t = 100.0 * lin @ RGB_TO_XYZ.T / np.asarray(white)
    df = np.where(t > _EPS, 1.0 / (3.0 * np.cbrt(np.maximum(t, _EPS)) ** 2), _KAPPA)
    gl, ga, gb = np.moveaxis(g, -1, 0)
    # L = 116 fy - 16, a = 500 (fx - fy), b = 200 (fy - fz)
    g_f = np.stack([500.0 * ga, 116.0 * gl - 500.0 * ga + 200.0 * gb, -200.0 * gb], axis=-1)
    g_xyz = g_f * df / np.asarray(white)
    g_lin = 100.0 * g_xyz @ RGB_TO_XYZ
    return np.where(inside, g_lin * dlin, 0.0)


def lab_to_lch(lab):
    """CIELAB to (L, C, h) with hue in degrees on [0, 360); h = 0 when C = 0."""
    lab = np.asarray(lab, dtype=float)
    l, a, b = np.moveaxis(lab, -1, 0)
    chroma = np.hypot(a, b)
    hue = np.degrees(np.arctan2(b, a)) % 360.0
    hue = np.where(chroma == 0.0, 0.0, hue)
    return np.stack([l, chroma, hue], axis=-1)


# Exponential fit of the measured grayscale-pair differences.
GRADE_SCALE = 1.6036
GRADE_RATE = 0.5391
GRADE_OFFSET = -1.2943


def grade_to_delta_v(g):
    """Map a continuous grayscale grade in [0, 4] to a CIELAB-unit difference."""
    g = np.asarray(g, dtype=float)
    if np.any(~np.isfinite(g)) or np.any((g < 0.0) | (g > 4.0)):
        raise ValueError(f"grade must lie in [0, 4], got {g.min()}..{g.max()}")
    out = GRADE_SCALE * np.exp(GRADE_RATE * g) + GRADE_OFFSET
    return float(out) if out.ndim == 0 else out
