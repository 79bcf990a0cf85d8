"""Classical color-difference formulas and their per-pixel image application.

The scalar formulas are vectorized: ``lab1`` and ``lab2`` are arrays of
shape ``(..., 3)`` and the result has shape ``(...)``.  CIE94 and CMC treat
the first argument as the reference color, so they are not symmetric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .colorspace import D65, WhitePoint, lab_to_xyz, srgb_to_lab, xyz_to_lab


def _split(lab):
    lab = np.asarray(lab, dtype=float)
    return lab[..., 0], lab[..., 1], lab[..., 2]


def delta_e76(lab1, lab2):
    """CIELAB 1976 difference: Euclidean distance in L*a*b*."""
    d = np.asarray(lab1, dtype=float) - np.asarray(lab2, dtype=float)
    return np.sqrt(np.sum(d * d, axis=-1))


def delta_e94(lab1, lab2, kl: float = 1.0, kc: float = 1.0, kh: float = 1.0):
    """CIE94 with graphic-arts constants (K1=0.045, K2=0.015).

    Chroma weights use the chroma of ``lab1`` (the reference).
    """
    l1, a1, b1 = _split(lab1)
    l2, a2, b2 = _split(lab2)
    c1 = np.hypot(a1, b1)
    c2 = np.hypot(a2, b2)
    dl = l1 - l2
    dc = c1 - c2
    dh_sq = np.maximum((a1 - a2) ** 2 + (b1 - b2) ** 2 - dc * dc, 0.0)
    sc = 1.0 + 0.045 * c1
    sh = 1.0 + 0.015 * c1
    return np.sqrt((dl / kl) ** 2 + (dc / (kc * sc)) ** 2 + dh_sq / (kh * sh) ** 2)


def delta_e_cmc(lab1, lab2, l: float = 2.0, c: float = 1.0):
    """CMC(l:c) difference with ``lab1`` as the reference (standard) color."""
    l1, a1, b1 = _split(lab1)
    l2, a2, b2 = _split(lab2)
    c1 = np.hypot(a1, b1)
    c2 = np.hypot(a2, b2)
    dl = l1 - l2
    dc = c1 - c2
    dh_sq = np.maximum((a1 - a2) ** 2 + (b1 - b2) ** 2 - dc * dc, 0.0)

    h1 = np.degrees(np.arctan2(b1, a1)) % 360.0
    sl = np.where(l1 < 16.0, 0.511, 0.040975 * l1 / (1.0 + 0.01765 * l1))
    sc = 0.0638 * c1 / (1.0 + 0.0131 * c1) + 0.638
    c1_4 = c1 ** 4
    f = np.sqrt(c1_4 / (c1_4 + 1900.0))
    t = np.where(
        (h1 >= 164.0) & (h1 <= 345.0),
        0.56 + np.abs(0.2 * np.cos(np.radians(h1 + 168.0))),
        0.36 + np.abs(0.4 * np.cos(np.radians(h1 + 35.0))),
    )
    sh = sc * (f * t + 1.0 - f)
    return np.sqrt((dl / (l * sl)) ** 2 + (dc / (c * sc)) ** 2 + dh_sq / sh ** 2)


def ciede2000(lab1, lab2, kl: float = 1.0, kc: float = 1.0, kh: float = 1.0):
    """CIEDE2000 color difference (symmetric in its arguments)."""
    l1, a1, b1 = _split(lab1)
    l2, a2, b2 = _split(lab2)

    c_bar = 0.5 * (np.hypot(a1, b1) + np.hypot(a2, b2))
    c_bar7 = c_bar ** 7
    g = 0.5 * (1.0 - np.sqrt(c_bar7 / (c_bar7 + 25.0 ** 7)))
    a1p = (1.0 + g) * a1
    a2p = (1.0 + g) * a2
    c1p = np.hypot(a1p, b1)
    c2p = np.hypot(a2p, b2)
    h1p = np.degrees(np.arctan2(b1, a1p)) % 360.0
    h2p = np.degrees(np.arctan2(b2, a2p)) % 360.0
    h1p = np.where((a1p == 0.0) & (b1 == 0.0), 0.0, h1p)
    h2p = np.where((a2p == 0.0) & (b2 == 0.0), 0.0, h2p)

    chromatic = (c1p * c2p) != 0.0
    # Signed hue angle from the cross and dot products avoids rounding
    # the 180-degree boundary differently for h1 and h2.
    cross = a1p * b2 - b1 * a2p
    dot = a1p * a2p + b1 * b2
    dhp = np.degrees(np.arctan2(cross, dot))
    antipodal = np.abs(dhp) == 180.0
    dhp = np.where(antipodal, np.where(h2p >= h1p, 180.0, -180.0), dhp)
    dhp = np.where(chromatic, dhp, 0.0)

    dlp = l2 - l1
    dcp = c2p - c1p
    dhp_big = 2.0 * np.sqrt(c1p * c2p) * np.sin(np.radians(dhp) / 2.0)

    l_bar = 0.5 * (l1 + l2)
    c_barp = 0.5 * (c1p + c2p)
    # Mean hue: h1 + dh/2 reproduces the three-branch rule exactly.
    h_barp = np.where(chromatic, (h1p + 0.5 * dhp) % 360.0, h1p + h2p)

    t = (1.0
         - 0.17 * np.cos(np.radians(h_barp - 30.0))
         + 0.24 * np.cos(np.radians(2.0 * h_barp))
         + 0.32 * np.cos(np.radians(3.0 * h_barp + 6.0))
         - 0.20 * np.cos(np.radians(4.0 * h_barp - 63.0)))
    d_theta = 30.0 * np.exp(-(((h_barp - 275.0) / 25.0) ** 2))
    c_barp7 = c_barp ** 7
    r_c = 2.0 * np.sqrt(c_barp7 / (c_barp7 + 25.0 ** 7))
    l50 = (l_bar - 50.0) ** 2
    s_l = 1.0 + 0.015 * l50 / np.sqrt(20.0 + l50)
    s_c = 1.0 + 0.045 * c_barp
    s_h = 1.0 + 0.015 * c_barp * t
    r_t = -np.sin(np.radians(2.0 * d_theta)) * r_c

    tl = dlp / (kl * s_l)
    tc = dcp / (kc * s_c)
    th = dhp_big / (kh * s_h)
    return np.sqrt(np.maximum(tl * tl + tc * tc + th * th + r_t * tc * th, 0.0))


@dataclass(frozen=True)
class CdFormula:
    """A classical formula with its weighting parameters.

    Use the constructors :meth:`de76`, :meth:`cie94`, :meth:`cmc` and
    :meth:`ciede2000`.
    """

    kind: str
    params: tuple = ()

    def __post_init__(self):
        if self.kind not in _FORMULAS:
            raise ValueError(f"unknown formula {self.kind!r}")
        if any(not (p > 0) for p in self.params):
            raise ValueError(f"{self.kind} weights must be > 0, got {self.params}")

    @classmethod
    def de76(cls) -> "CdFormula":
        return cls("de76")

    @classmethod
    def cie94(cls, kl=1.0, kc=1.0, kh=1.0) -> "CdFormula":
        return cls("cie94", (kl, kc, kh))

    @classmethod
    def cmc(cls, l=2.0, c=1.0) -> "CdFormula":
        return cls("cmc", (l, c))

    @classmethod
    def ciede2000(cls, kl=1.0, kc=1.0, kh=1.0) -> "CdFormula":
        return cls("ciede2000", (kl, kc, kh))

    def __call__(self, lab1, lab2):
        return _FORMULAS[self.kind](lab1, lab2, *self.params)


_FORMULAS = {
    "de76": delta_e76,
    "cie94": delta_e94,
    "cmc": delta_e_cmc,
    "ciede2000": ciede2000,
}


# --- S-CIELAB ---------------------------------------------------------------

# XYZ -> opponent (luminance, red-green, blue-yellow).
XYZ_TO_OPP = np.array([
    [0.279, 0.720, -0.107],
    [-0.449, 0.290, -0.077],
    [0.086, -0.590, 0.501],
])
OPP_TO_XYZ = np.linalg.inv(XYZ_TO_OPP)

# (spread in degrees, weight) per Gaussian; weights of each channel sum to 1.
SCIELAB_COMPONENTS = (
    ((0.05, 1.00327), (0.225, 0.114416), (7.0, -0.117686)),
    ((0.0685, 0.616725), (0.826, 0.383275)),
    ((0.0920, 0.567885), (0.6451, 0.432115)),
)


def display_pixels_per_degree(width_px: int = 4096, height_px: int = 2160,
                              diagonal_in: float = 31.1,
                              distance_mm: float = 1000.0) -> float:
    """Samples per degree of visual angle for a flat panel viewed head-on.

    Defaults: a 31.1-inch 4096x2160 panel at one meter, which gives about
    102.3 pixels per degree.
    """
    pitch_mm = diagonal_in * 25.4 / math.hypot(width_px, height_px)
    return 2.0 * distance_mm * math.tan(math.radians(0.5)) / pitch_mm


@dataclass(frozen=True)
class ScielabConfig:
    """Spatial pre-filter settings.

    Each Gaussian is truncated where its two-sided tail mass drops below
    ``tail_mass`` and at most ``max_radius_deg`` degrees from the center,
    then renormalized to unit sum.
    """

    pixels_per_degree: float = field(default_factory=display_pixels_per_degree)
    tail_mass: float = 1e-4
    max_radius_deg: float = 0.5
    white: WhitePoint = D65

    def __post_init__(self):
        if not self.pixels_per_degree > 0:
            raise ValueError("pixels_per_degree must be > 0")
        if not 0 < self.tail_mass < 1:
            raise ValueError("tail_mass must lie in (0, 1)")
        if not self.max_radius_deg > 0:
            raise ValueError("max_radius_deg must be > 0")


def _gauss_1d(spread_px: float, cfg: ScielabConfig) -> np.ndarray:
    from scipy.special import erfcinv

    # exp(-x^2 / s^2): two-sided tail beyond r is erfc(r / s)
    radius = math.ceil(spread_px * float(erfcinv(cfg.tail_mass)))
    radius = max(0, min(radius, math.floor(cfg.max_radius_deg * cfg.pixels_per_degree)))
    x = np.arange(-radius, radius + 1, dtype=float)
    g = np.exp(-(x / max(spread_px, 1e-12)) ** 2)
    return g / g.sum()


def scielab_filters(cfg: ScielabConfig) -> list[list[tuple[float, np.ndarray]]]:
    """Per opponent channel, the list of ``(weight, 1-D kernel)`` components."""
    return [
        [(w, _gauss_1d(s * cfg.pixels_per_degree, cfg)) for s, w in comps]
        for comps in SCIELAB_COMPONENTS
    ]


def scielab_kernels(cfg: ScielabConfig) -> list[np.ndarray]:
    """The three 2-D opponent-channel kernels, each with unit sum."""
    kernels = []
    for comps in scielab_filters(cfg):
        size = max(len(g) for _, g in comps)
        k = np.zeros((size, size))
        for w, g in comps:
            off = (size - len(g)) // 2
            k[off:off + len(g), off:off + len(g)] += w * np.outer(g, g)
        kernels.append(k / k.sum())
    return kernels


def kernel_support(cfg: ScielabConfig) -> int:
    return max(len(g) for comps in scielab_filters(cfg) for _, g in comps)


def opponent_filter(opp, cfg: ScielabConfig):
    """Low-pass each opponent channel of an ``(H, W, 3)`` image.

    Boundaries are replicate-padded, so constant images are fixed points.
    """
    opp = np.asarray(opp, dtype=float)
    if opp.ndim != 3 or opp.shape[-1] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {opp.shape}")
    support = kernel_support(cfg)
    if min(opp.shape[:2]) < support:
        raise ValueError(
            f"image {opp.shape[0]}x{opp.shape[1]} is smaller than the "
            f"{support}-pixel filter support")
    out = np.empty_like(opp)
    for ch, comps in enumerate(scielab_filters(cfg)):
        plane = opp[..., ch]
        acc = np.zeros_like(plane)
        for w, g in comps:
            tmp = correlate1d(plane, g, axis=0, mode="nearest")
            acc += w * correlate1d(tmp, g, axis=1, mode="nearest")
        out[..., ch] = acc
    return out


def scielab_prefilter(lab, cfg: ScielabConfig | None = None):
    """Spatially filter a CIELAB image in opponent space; returns CIELAB."""
    cfg = cfg or ScielabConfig()
    xyz = lab_to_xyz(np.asarray(lab, dtype=float), cfg.white)
    opp = opponent_filter(xyz @ XYZ_TO_OPP.T, cfg)
    return xyz_to_lab(opp @ OPP_TO_XYZ.T, cfg.white)


@dataclass
class CdMap:
    """Per-pixel color differences with their mean."""

    values: np.ndarray
    mean: float

    @classmethod
    def from_values(cls, values) -> "CdMap":
        values = np.asarray(values)
        return cls(values, float(np.mean(values, dtype=np.float64)))


def image_cd(a, b, formula: CdFormula, spatial: ScielabConfig | None = None,
             white: WhitePoint = D65) -> CdMap:
    """Per-pixel classical CD between two sRGB images in [0, 1].

    With ``spatial`` set, both images go through the S-CIELAB pre-filter
    before the formula is applied.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 3 or a.shape[-1] != 3:
        raise ValueError(f"expected (H, W, 3) sRGB images, got {a.shape}")
    lab_a = srgb_to_lab(a, white)
    lab_b = srgb_to_lab(b, white)
    if spatial is not None:
        lab_a = scielab_prefilter(lab_a, spatial)
        lab_b = scielab_prefilter(lab_b, spatial)
    return CdMap.from_values(formula(lab_a, lab_b))
