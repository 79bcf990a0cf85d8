import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdnet import dataset as ds
from cdnet.classical_cd import CdFormula, image_cd
from cdnet.colorspace import D65

HEADER = "ref_path,test_path,delta_v,aligned,content_id\n"


def _images(tmp_path, n=2):
    paths = []
    for i in range(n):
        p = tmp_path / f"im{i}.png"
        ds.write_png(p, np.full((4, 4, 3), i / max(n - 1, 1)))
        paths.append(p.name)
    return paths


def test_manifest_empty(tmp_path):
    f = tmp_path / "m.csv"
    f.write_text(HEADER)
    assert ds.load_manifest(f) == []


def test_manifest_three_rows_in_order(tmp_path):
    a, b = _images(tmp_path)
    f = tmp_path / "m.csv"
    f.write_text(HEADER + f"{a},{b},1.5,1,s1\n{b},{a},0,0,s2\n{a},{a},3,true,s1\n")
    recs = ds.load_manifest(f)
    assert [r.delta_v for r in recs] == [1.5, 0.0, 3.0]
    assert [r.aligned for r in recs] == [True, False, True]
    assert recs[0].ref_path == str(tmp_path / a)
    assert all(r.split == "unassigned" for r in recs)


def test_manifest_negative_delta_v_names_row(tmp_path):
    a, b = _images(tmp_path)
    f = tmp_path / "m.csv"
    f.write_text(HEADER + f"{a},{b},1,1,s\n{a},{b},-1,1,s\n")
    with pytest.raises(ds.ManifestError, match=r":3: column delta_v"):
        ds.load_manifest(f)


def test_manifest_parse_errors(tmp_path):
    a, b = _images(tmp_path)
    f = tmp_path / "m.csv"
    f.write_text(HEADER + f"{a},{b},abc,1,s\n")
    with pytest.raises(ds.ManifestError, match=r":2: column delta_v: not a number"):
        ds.load_manifest(f)
    f.write_text(HEADER + f"{a},{b},1,maybe,s\n")
    with pytest.raises(ds.ManifestError, match="column aligned"):
        ds.load_manifest(f)
    f.write_text(HEADER + f"{a},{b},1,1,\n")
    with pytest.raises(ds.ManifestError, match="content_id"):
        ds.load_manifest(f)
    f.write_text("ref_path,test_path,delta_v\n")
    with pytest.raises(ds.ManifestError, match="missing column"):
        ds.load_manifest(f)


def test_manifest_missing_files_reported_with_rows(tmp_path):
    a, _ = _images(tmp_path)
    f = tmp_path / "m.csv"
    f.write_text(HEADER + f"{a},{a},1,1,s\n{a},gone.png,1,1,s\n")
    with pytest.raises(ds.ManifestError, match="line 3 test_path=gone.png"):
        ds.load_manifest(f)
    assert len(ds.load_manifest(f, check_files=False)) == 2


def test_manifest_write_roundtrip(tmp_path):
    a, b = _images(tmp_path)
    recs = [ds.PairRecord(str(tmp_path / a), str(tmp_path / b), 2.25, True, "c1", "train", "p1")]
    ds.write_manifest(tmp_path / "out.csv", recs)
    assert ds.load_manifest(tmp_path / "out.csv") == recs


def test_pair_record_invariants():
    with pytest.raises(ValueError):
        ds.PairRecord("a", "b", -0.1, True, "c")
    with pytest.raises(ValueError):
        ds.PairRecord("a", "b", 1.0, True, "")


def test_png_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, (5, 6, 3)).astype(np.uint8)
    ds.write_png(tmp_path / "x.png", img)
    back = ds.read_image(tmp_path / "x.png")
    assert back.dtype == np.float32
    np.testing.assert_array_equal(np.rint(back * 255).astype(np.uint8), img)


# --- subjective scores -------------------------------------------------------

def test_all_grade_two():
    ratings = {f"p{i}": [(f"s{j}", 2.0) for j in range(10)] for i in range(5)}
    res = ds.process_raw_scores(ratings)
    assert all(abs(v - 3.42) <= 0.005 for v in res.delta_v.values())
    assert res.outlier_ratings == 0
    assert not any(s.rejected for s in res.subjects)


def test_outlier_by_hand():
    # 20 ratings of grade 2 plus one of 4 (as differences, 3.4188 and 12.5569)
    dv2 = 1.6036 * math.exp(0.5391 * 2) - 1.2943
    dv4 = 1.6036 * math.exp(0.5391 * 4) - 1.2943
    vals = [dv2] * 20 + [dv4]
    mean = sum(vals) / 21
    sd = math.sqrt(sum((x - mean) ** 2 for x in vals) / 20)
    # |dv4 - mean| = 8.703, 3 sd = 5.983, so it is an outlier
    assert abs(dv4 - mean) > 3 * sd
    ratings = {"p": [(f"s{j}", 2.0) for j in range(20)] + [("odd", 4.0)]}
    res = ds.process_raw_scores(ratings)
    assert res.outlier_ratings == 1
    assert res.delta_v["p"] == pytest.approx(dv2)
    assert [s for s in res.subjects if s.subject_id == "odd"][0].rejected


def test_few_ratings_cannot_be_outliers():
    # with n ratings one value deviates at most (n-1)/sqrt(n) sd: n=5 gives 1.79 sd
    ratings = {"p": [("a", 0.0), ("b", 0.0), ("c", 0.0), ("d", 0.0), ("e", 4.0)]}
    assert ds.process_raw_scores(ratings).outlier_ratings == 0


def _panel(n_pairs, bad_pairs):
    """20 consistent subjects; subject 'x' is wild on the first ``bad_pairs`` pairs."""
    ratings = {}
    for i in range(n_pairs):
        items = [(f"s{j}", 1.0) for j in range(20)]
        items.append(("x", 4.0 if i < bad_pairs else 1.0))
        ratings[f"p{i:03d}"] = items
    return ratings


def test_subject_rejection_threshold():
    res = ds.process_raw_scores(_panel(100, 6))
    x = [s for s in res.subjects if s.subject_id == "x"][0]
    assert x.outlier_count == 6 and x.total_count == 100 and x.rejected
    res = ds.process_raw_scores(_panel(100, 5))
    x = [s for s in res.subjects if s.subject_id == "x"][0]
    assert x.outlier_rate == 0.05 and not x.rejected


def test_pair_with_no_valid_ratings_errors():
    with pytest.raises(ValueError, match="at least 2"):
        ds.process_raw_scores({"p": [("a", 1.0)]})


def test_rejected_subject_ratings_dropped():
    ratings = _panel(10, 1)  # x: 10% outliers -> rejected
    for i in range(1, 10):
        ratings[f"p{i:03d}"][-1] = ("x", 1.5)  # not an outlier on the rest
    res = ds.process_raw_scores(ratings)
    one = 1.6036 * math.exp(0.5391) - 1.2943
    assert all(v == pytest.approx(one) for v in res.delta_v.values())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_scores_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    ratings = {f"p{i}": [(f"s{j}", float(rng.uniform(0, 4))) for j in range(8)] for i in range(6)}
    ratings["p0"].append(("s0", 4.0))
    shuffled = {k: [v[i] for i in rng.permutation(len(v))] for k, v in
                reversed(list(ratings.items()))}
    a, b = ds.process_raw_scores(ratings), ds.process_raw_scores(shuffled)
    assert a.delta_v.keys() == b.delta_v.keys()
    for k in a.delta_v:
        assert a.delta_v[k] == pytest.approx(b.delta_v[k], rel=1e-12)
    assert a.subjects == b.subjects


def test_load_ratings(tmp_path):
    f = tmp_path / "r.csv"
    f.write_text("pair_id,subject_id,grade\np1,a,2\np1,b,2.5\n")
    assert ds.load_ratings(f) == {"p1": [("a", 2.0), ("b", 2.5)]}
    f.write_text("pair_id,subject_id,grade\np1,a,5\n")
    with pytest.raises(ds.ManifestError, match="outside"):
        ds.load_ratings(f)


# --- splits and crops -----------------------------------------------------------

def _recs(n_contents, per=3):
    return [ds.PairRecord(f"r{c}", f"t{c}_{k}", 1.0, True, f"c{c}")
            for c in range(n_contents) for k in range(per)]


def test_split_ten_contents():
    out = ds.split_content_independent(_recs(10), seed=4)
    per_split = {s: {r.content_id for r in out if r.split == s} for s in ds.SPLITS}
    assert [len(per_split[s]) for s in ds.SPLITS] == [7, 1, 2]


@settings(max_examples=50, deadline=None)
@given(st.integers(3, 40), st.integers(0, 10_000))
def test_split_is_partition_by_content(n, seed):
    recs = _recs(n, 2)
    out = ds.split_content_independent(recs, seed=seed)
    assert len(out) == len(recs)
    seen = {}
    for r in out:
        assert seen.setdefault(r.content_id, r.split) == r.split
    assert out == ds.split_content_independent(recs, seed=seed)


def test_split_errors():
    with pytest.raises(ValueError):
        ds.split_content_independent(_recs(2))
    with pytest.raises(ValueError):
        ds.split_content_independent(_recs(10), fractions=(0.5, 0.1, 0.1))


def test_seeds_change_split():
    splits = {tuple(r.split for r in ds.split_content_independent(_recs(10), seed=s))
              for s in range(10)}
    assert len(splits) > 1


def test_crop_shared_offset(rng):
    a = rng.uniform(size=(1024, 1024, 3))
    b = a + 1.0
    ca, cb, off = ds.sample_crop(a, b, 768, 7)
    assert ca.shape == (768, 768, 3)
    np.testing.assert_allclose(cb - ca, 1.0, atol=1e-12)
    t, l = off
    np.testing.assert_array_equal(ca, a[t:t + 768, l:l + 768])
    assert ds.sample_crop(a, b, 768, 7)[2] == off


def test_crop_identity_and_errors(rng):
    a = rng.uniform(size=(32, 32, 3))
    ca, _, off = ds.sample_crop(a, a, 32, 0)
    assert off == (0, 0) and np.array_equal(ca, a)
    with pytest.raises(ValueError, match="smaller"):
        ds.sample_crop(a, a, 33, 0)
    with pytest.raises(ValueError):
        ds.sample_crop(a, a[:, :31], 16, 0)


# --- patches --------------------------------------------------------------------

def test_render_white_patch():
    img, _, n = ds.render_patch_pair(tuple(D65), tuple(D65), "xyz")
    assert img.shape == (128, 128, 3)
    np.testing.assert_allclose(img, 1.0, atol=1e-9)
    assert n == 0


def test_identical_patches_zero_cd():
    a, b, _ = ds.render_patch_pair((50, 10, -20), (50, 10, -20))
    for f in (CdFormula.de76(), CdFormula.ciede2000(), CdFormula.cmc()):
        assert image_cd(a, b, f).mean == 0


def test_rendered_patch_de76_matches_scalar():
    p, q = (60.0, 20.0, 10.0), (55.0, 15.0, 20.0)
    a, b, n = ds.render_patch_pair(p, q)
    assert n == 0
    a8 = ds.to_uint8(a) / 255.0
    b8 = ds.to_uint8(b) / 255.0
    measured = image_cd(a8, b8, CdFormula.de76()).mean
    assert abs(measured - float(np.linalg.norm(np.subtract(p, q)))) <= 0.5


def test_out_of_gamut_patch_counted():
    _, _, n = ds.render_patch_pair((50, 150, 0), (50, 0, 0))
    assert n > 0


def test_patch_set_csv(tmp_path):
    f = tmp_path / "p.csv"
    f.write_text("pair_id,p1,p2,p3,q1,q2,q3,space,delta_v\n"
                 "a,50,0,0,52,0,0,lab,2\nb,20,21,22,30,31,32,xyz,\n")
    pairs = ds.load_patch_set(f)
    assert pairs[0].space == "lab" and pairs[0].delta_v == 2.0
    assert pairs[1].q == (30.0, 31.0, 32.0) and pairs[1].delta_v is None
    f.write_text("pair_id,p1,p2,p3,q1,q2,q3,space\na,1,2,3,4,5,6,rgb\n")
    with pytest.raises(ds.ManifestError, match="space"):
        ds.load_patch_set(f)


def test_synthetic_dataset(tmp_path):
    recs = ds.make_synthetic_dataset(tmp_path, n_contents=3, pairs_per_content=2, size=16,
                                     seed=1, misaligned_fraction=0.5)
    loaded = ds.load_manifest(tmp_path / "manifest.csv")
    assert len(loaded) == 6
    for r, l in zip(recs, loaded):
        assert l.delta_v == r.delta_v
        a, b = ds.load_pair_images(l)
        assert image_cd(a, b, CdFormula.ciede2000()).mean == pytest.approx(l.delta_v, abs=1e-5)
