import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdnet import classical_cd as cd
from cdnet.colorspace import srgb_to_lab
from conftest import load_ciede2000_pairs

PAIRS = load_ciede2000_pairs()

lab_elems = st.tuples(st.floats(0, 100), st.floats(-128, 128), st.floats(-128, 128))


def ciede2000_reference(lab1, lab2):
    """Scalar CIEDE2000 with the textbook conditional hue rules."""
    L1, a1, b1 = lab1
    L2, a2, b2 = lab2
    C1, C2 = math.hypot(a1, b1), math.hypot(a2, b2)
    Cb = (C1 + C2) / 2
    G = 0.5 * (1 - math.sqrt(Cb ** 7 / (Cb ** 7 + 25 ** 7)))
    a1p, a2p = (1 + G) * a1, (1 + G) * a2
    C1p, C2p = math.hypot(a1p, b1), math.hypot(a2p, b2)
    h1p = math.degrees(math.atan2(b1, a1p)) % 360 if C1p else 0.0
    h2p = math.degrees(math.atan2(b2, a2p)) % 360 if C2p else 0.0
    dLp, dCp = L2 - L1, C2p - C1p
    if C1p * C2p == 0:
        dhp = 0.0
    elif abs(h2p - h1p) <= 180:
        dhp = h2p - h1p
    elif h2p - h1p > 180:
        dhp = h2p - h1p - 360
    else:
        dhp = h2p - h1p + 360
    dHp = 2 * math.sqrt(C1p * C2p) * math.sin(math.radians(dhp / 2))
    Lbp, Cbp = (L1 + L2) / 2, (C1p + C2p) / 2
    if C1p * C2p == 0:
        hbp = h1p + h2p
    elif abs(h1p - h2p) <= 180:
        hbp = (h1p + h2p) / 2
    elif h1p + h2p < 360:
        hbp = (h1p + h2p + 360) / 2
    else:
        hbp = (h1p + h2p - 360) / 2
    T = (1 - 0.17 * math.cos(math.radians(hbp - 30)) + 0.24 * math.cos(math.radians(2 * hbp))
         + 0.32 * math.cos(math.radians(3 * hbp + 6)) - 0.20 * math.cos(math.radians(4 * hbp - 63)))
    dtheta = 30 * math.exp(-(((hbp - 275) / 25) ** 2))
    Rc = 2 * math.sqrt(Cbp ** 7 / (Cbp ** 7 + 25 ** 7))
    Sl = 1 + 0.015 * (Lbp - 50) ** 2 / math.sqrt(20 + (Lbp - 50) ** 2)
    Sc = 1 + 0.045 * Cbp
    Sh = 1 + 0.015 * Cbp * T
    Rt = -math.sin(math.radians(2 * dtheta)) * Rc
    return math.sqrt((dLp / Sl) ** 2 + (dCp / Sc) ** 2 + (dHp / Sh) ** 2
                     + Rt * (dCp / Sc) * (dHp / Sh))


def test_ciede2000_hand_derived_pair_1():
    # pair 1: (50, 2.6772, -79.7751) vs (50, 0, -82.7485), derived by hand:
    # Cb = 81.2843, G = 6.507e-5, a1' = 2.67737, C1' = 79.8200, C2' = 82.7485
    # h1' = 271.9222, h2' = 270, dh' = -1.9222, dH' = -2.7264, hb' = 270.9611
    # T = 0.6907, dtheta = 29.2271, S_C = 4.6578, S_H = 1.8421, R_T = -1.7042
    # dC'/S_C = 0.62873, dH'/S_H = -1.48004
    # dE^2 = 0.62873^2 + 1.48004^2 + (-1.7042)(0.62873)(-1.48004) = 4.1718
    tc, th, rt = 2.9285 / 4.6578, -2.7264 / 1.8421, -1.7042
    hand = math.sqrt(tc * tc + th * th + rt * tc * th)
    assert hand == pytest.approx(2.0425, abs=2e-4)
    L = PAIRS[0]
    assert ciede2000_reference(L[:3], L[3:6]) == pytest.approx(2.0425, abs=1e-4)
    assert float(cd.ciede2000(L[:3], L[3:6])) == pytest.approx(2.0425, abs=1e-4)


def test_ciede2000_hand_derived_pair_17():
    # pair 17: (50, 2.5, 0) vs (73, 25, -18): mostly a lightness step
    # dL' = 23, Lb' = 61.5, S_L = 1 + 0.015*132.25/sqrt(152.25) = 1.1608, dL'/S_L = 19.81
    lab1, lab2 = (50.0, 2.5, 0.0), (73.0, 25.0, -18.0)
    s_l = 1 + 0.015 * 11.5 ** 2 / math.sqrt(20 + 11.5 ** 2)
    assert s_l == pytest.approx(1.1608, abs=1e-4)
    assert ciede2000_reference(lab1, lab2) == pytest.approx(27.1492, abs=1e-4)
    assert float(cd.ciede2000(lab1, lab2)) == pytest.approx(27.1492, abs=1e-4)


@pytest.mark.parametrize("i", range(len(PAIRS)))
def test_ciede2000_reference_pairs(i):
    r = PAIRS[i]
    assert abs(float(cd.ciede2000(r[:3], r[3:6])) - r[6]) <= 1e-4
    assert abs(float(cd.ciede2000(r[3:6], r[:3])) - r[6]) <= 1e-4


def test_ciede2000_vectorized_matches_scalar_oracle(rng):
    a = np.column_stack([rng.uniform(0, 100, 500), rng.uniform(-100, 100, (500, 2))])
    b = np.column_stack([rng.uniform(0, 100, 500), rng.uniform(-100, 100, (500, 2))])
    got = cd.ciede2000(a, b)
    want = [ciede2000_reference(x, y) for x, y in zip(a, b)]
    np.testing.assert_allclose(got, want, atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(lab_elems, lab_elems)
def test_ciede2000_symmetric_and_nonnegative(p, q):
    d1, d2 = float(cd.ciede2000(p, q)), float(cd.ciede2000(q, p))
    assert d1 >= 0
    assert d1 == pytest.approx(d2, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(lab_elems)
def test_identity_all_formulas(p):
    for f in (cd.CdFormula.de76(), cd.CdFormula.cie94(), cd.CdFormula.cmc(),
              cd.CdFormula.ciede2000()):
        assert float(f(p, p)) == pytest.approx(0.0, abs=1e-9)


def test_de76_is_euclidean():
    assert float(cd.delta_e76((50, 0, 0), (53, 4, 0))) == pytest.approx(5.0)


def test_cie94_known_value():
    # dL = 0, C1 = 50 so S_C = 1 + 0.045*50 = 3.25, dC = 5 -> 5/3.25
    assert float(cd.delta_e94((50, 50, 0), (50, 55, 0))) == pytest.approx(5 / 3.25)


def test_cmc_known_value_and_asymmetry():
    # lightness-only step at L1 = 50: S_L = 0.040975*50/(1+0.01765*50)
    s_l = 0.040975 * 50 / (1 + 0.01765 * 50)
    assert float(cd.delta_e_cmc((50, 0, 0), (52, 0, 0))) == pytest.approx(2 / (2 * s_l))
    p, q = (50, 40, 10), (60, 10, 40)
    assert abs(float(cd.delta_e_cmc(p, q)) - float(cd.delta_e_cmc(q, p))) > 1e-3


def test_formula_weights_must_be_positive():
    with pytest.raises(ValueError):
        cd.CdFormula.cie94(kl=0)
    with pytest.raises(ValueError):
        cd.CdFormula("nope")


# --- S-CIELAB -------------------------------------------------------------------

def test_pixels_per_degree_default():
    assert cd.display_pixels_per_degree() == pytest.approx(102.3, abs=0.1)


def test_scielab_kernels_have_unit_sum():
    for k in cd.scielab_kernels(cd.ScielabConfig()):
        assert k.sum() == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(k, k.T, atol=1e-15)


def test_scielab_constant_image_is_fixed_point():
    cfg = cd.ScielabConfig(pixels_per_degree=20)
    lab = np.broadcast_to([40.0, 20.0, -10.0], (40, 40, 3))
    np.testing.assert_allclose(cd.scielab_prefilter(lab, cfg), lab, atol=1e-9)


def test_scielab_blurs_chroma_more_than_luminance():
    cfg = cd.ScielabConfig(pixels_per_degree=40)
    opp = np.zeros((64, 64, 3))
    opp[(np.arange(64) // 4) % 2 == 0] = 1.0  # 5 cycles/degree stripes
    out = cd.opponent_filter(opp, cfg)
    mid = out[24:40, 30]
    contrast = mid.max(axis=0) - mid.min(axis=0)
    assert contrast[1] < contrast[0] and contrast[2] < contrast[0]


def test_scielab_rejects_small_images():
    with pytest.raises(ValueError, match="smaller"):
        cd.opponent_filter(np.zeros((8, 8, 3)), cd.ScielabConfig())


def test_image_cd_shape_mismatch():
    with pytest.raises(ValueError):
        cd.image_cd(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)), cd.CdFormula.de76())


def test_image_cd_mean_of_map(rng):
    a, b = rng.uniform(0, 1, (2, 6, 7, 3))
    m = cd.image_cd(a, b, cd.CdFormula.ciede2000())
    assert m.values.shape == (6, 7)
    assert m.mean == pytest.approx(m.values.mean())
    want = np.mean([ciede2000_reference(x, y) for x, y in
                    zip(srgb_to_lab(a).reshape(-1, 3), srgb_to_lab(b).reshape(-1, 3))])
    assert m.mean == pytest.approx(want, abs=1e-9)
