"""Annotated image pairs: manifests, subjective-score processing, splits,
crops, color-patch rendering, and a synthetic pair generator.

Manifest CSV columns: ``ref_path, test_path, delta_v, aligned, content_id``
(optional ``split`` and ``pair_id``).  Relative image paths resolve against
the manifest's directory.  Raw ratings CSV: ``pair_id, subject_id, grade``.
Patch-set CSV: ``pair_id, p1, p2, p3, q1, q2, q3, space`` with ``space`` in
``{xyz, lab}`` and an optional ``delta_v`` column.
"""

from __future__ import annotations

import csv
import os
import tempfile
from collections import defaultdict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .colorspace import D65, WhitePoint, grade_to_delta_v, lab_to_xyz, xyz_to_srgb

MANIFEST_COLUMNS = ("ref_path", "test_path", "delta_v", "aligned", "content_id")
SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class PairRecord:
    ref_path: str
    test_path: str
    delta_v: float
    aligned: bool
    content_id: str
    split: str = "unassigned"
    pair_id: str = ""

    def __post_init__(self):
        if not self.delta_v >= 0:
            raise ValueError(f"delta_v must be >= 0, got {self.delta_v}")
        if not self.content_id:
            raise ValueError("content_id must be nonempty")
        if self.split not in SPLITS + ("unassigned",):
            raise ValueError(f"unknown split {self.split!r}")


_TRUE = {"1", "true", "yes", "y", "t"}
_FALSE = {"0", "false", "no", "n", "f"}


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in _TRUE:
        return True
    if t in _FALSE:
        return False
    raise ValueError(f"not a boolean: {text!r}")


def load_manifest(path, check_files: bool = True) -> list[PairRecord]:
    """Parse and validate a manifest; rows are returned in file order.

    Errors name the 1-based file line (header is line 1) and column.
    """
    path = Path(path)
    base = path.parent
    records = []
    missing = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        absent = [c for c in MANIFEST_COLUMNS if c not in cols]
        if absent:
            raise ManifestError(f"{path}: missing column(s) {', '.join(absent)}")
        for line, row in enumerate(reader, start=2):
            try:
                dv_text = row["delta_v"]
                try:
                    dv = float(dv_text)
                except (TypeError, ValueError):
                    raise ManifestError(f"{path}:{line}: column delta_v: not a number: {dv_text!r}")
                if not np.isfinite(dv) or dv < 0:
                    raise ManifestError(f"{path}:{line}: column delta_v: must be a finite "
                                        f"value >= 0, got {dv_text}")
                try:
                    aligned = _parse_bool(row["aligned"] or "")
                except ValueError as exc:
                    raise ManifestError(f"{path}:{line}: column aligned: {exc}")
                content = (row["content_id"] or "").strip()
                if not content:
                    raise ManifestError(f"{path}:{line}: column content_id: empty")
                split = (row.get("split") or "unassigned").strip() or "unassigned"
                if split not in SPLITS + ("unassigned",):
                    raise ManifestError(f"{path}:{line}: column split: unknown split {split!r}")
                rec = PairRecord(
                    ref_path=str(base / row["ref_path"].strip()),
                    test_path=str(base / row["test_path"].strip()),
                    delta_v=dv, aligned=aligned, content_id=content, split=split,
                    pair_id=(row.get("pair_id") or "").strip() or str(line - 1))
            except (AttributeError, KeyError) as exc:
                raise ManifestError(f"{path}:{line}: malformed row") from exc
            if check_files:
                for col in ("ref_path", "test_path"):
                    if not os.path.exists(getattr(rec, col)):
                        missing.append(f"line {line} {col}={row[col]}")
            records.append(rec)
    if missing:
        raise ManifestError(f"{path}: missing image files: " + "; ".join(missing))
    return records


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".",
                               prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def manifest_text(records: Sequence[PairRecord], base=None) -> str:
    import io

    buf = io.StringIO()
    cols = list(MANIFEST_COLUMNS) + ["split", "pair_id"]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in records:
        ref, test = r.ref_path, r.test_path
        if base is not None:
            ref = os.path.relpath(ref, base)
            test = os.path.relpath(test, base)
        w.writerow([ref, test, repr(float(r.delta_v)), int(r.aligned), r.content_id,
                    r.split, r.pair_id])
    return buf.getvalue()


def write_manifest(path, records: Sequence[PairRecord]) -> None:
    path = Path(path)
    atomic_write_text(path, manifest_text(records, base=path.parent.resolve()))


# --- images -------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    """8-bit image file -> float32 ``(H, W, 3)`` sRGB in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / np.float32(255.0)


def to_uint8(img) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=float) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, img) -> None:
    """Write an ``(H, W, 3)`` float image in [0, 1] or a uint8 array, atomically."""
    path = Path(path)
    arr = img if np.asarray(img).dtype == np.uint8 else to_uint8(img)
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".",
                               prefix=path.name, suffix=".tmp.png")
    os.close(fd)
    try:
        Image.fromarray(arr).save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_pair_images(rec: PairRecord) -> tuple[np.ndarray, np.ndarray]:
    return read_image(rec.ref_path), read_image(rec.test_path)


class ImageCache:
    """Loads each image file once and keeps it in memory."""

    def __init__(self):
        self._images: dict[str, np.ndarray] = {}

    def __call__(self, rec: PairRecord) -> tuple[np.ndarray, np.ndarray]:
        return self.get(rec.ref_path), self.get(rec.test_path)

    def get(self, path: str) -> np.ndarray:
        img = self._images.get(path)
        if img is None:
            img = self._images[path] = read_image(path)
        return img


# --- subjective scores -----------------------------------------------------------

@dataclass
class SubjectReport:
    subject_id: str
    outlier_count: int
    total_count: int
    rejected: bool

    @property
    def outlier_rate(self) -> float:
        return self.outlier_count / self.total_count if self.total_count else 0.0


@dataclass
class ScoreResult:
    delta_v: dict
    subjects: list
    outlier_ratings: int
    total_ratings: int

    @property
    def outlier_fraction(self) -> float:
        return self.outlier_ratings / self.total_ratings if self.total_ratings else 0.0


def load_ratings(path) -> dict[str, list[tuple[str, float]]]:
    """Raw ratings CSV -> ``{pair_id: [(subject_id, grade), ...]}``."""
    out: dict[str, list] = defaultdict(list)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"pair_id", "subject_id", "grade"}
        if not need <= set(reader.fieldnames or []):
            raise ManifestError(f"{path}: ratings need columns pair_id, subject_id, grade")
        for line, row in enumerate(reader, start=2):
            try:
                g = float(row["grade"])
            except (TypeError, ValueError):
                raise ManifestError(f"{path}:{line}: column grade: not a number: {row['grade']!r}")
            if not 0.0 <= g <= 4.0:
                raise ManifestError(f"{path}:{line}: column grade: {g} outside [0, 4]")
            out[row["pair_id"].strip()].append((row["subject_id"].strip(), g))
    return dict(out)


def process_raw_scores(ratings: dict, sigmas: float = 3.0,
                       max_outlier_rate: float = 0.05) -> ScoreResult:
    """Grades -> perceptual differences with outlier removal.

    Per pair, each grade is mapped to a difference; values farther than
    ``sigmas`` sample standard deviations from the pair mean are outliers
    (single pass).  Subjects whose outlier rate exceeds ``max_outlier_rate``
    are rejected and all their ratings dropped.  Ground truth is the mean
    of the remaining non-outlier ratings.
    """
    flagged: dict[str, list[tuple[str, float, bool]]] = {}
    per_subject_out: dict[str, int] = defaultdict(int)
    per_subject_total: dict[str, int] = defaultdict(int)
    n_out = n_total = 0
    for pair_id in sorted(ratings):
        items = ratings[pair_id]
        if len(items) < 2:
            raise ValueError(f"pair {pair_id!r} has {len(items)} rating(s); need at least 2")
        dv = np.asarray(grade_to_delta_v([g for _, g in items]), dtype=float).ravel()
        mu = dv.mean()
        sd = dv.std(ddof=1)
        outl = np.abs(dv - mu) > sigmas * sd if sd > 0 else np.zeros(dv.size, bool)
        flagged[pair_id] = [(s, float(v), bool(o)) for (s, _), v, o in zip(items, dv, outl)]
        for (s, _), o in zip(items, outl):
            per_subject_total[s] += 1
            per_subject_out[s] += int(o)
        n_out += int(outl.sum())
        n_total += dv.size

    subjects = []
    for s in sorted(per_subject_total):
        tot, bad = per_subject_total[s], per_subject_out[s]
        subjects.append(SubjectReport(s, bad, tot, bad / tot > max_outlier_rate))
    rejected = {r.subject_id for r in subjects if r.rejected}

    delta_v = {}
    empty = []
    for pair_id, items in flagged.items():
        keep = [v for s, v, o in items if not o and s not in rejected]
        if not keep:
            empty.append(pair_id)
            continue
        delta_v[pair_id] = float(np.mean(keep))
    if empty:
        raise ValueError("no valid ratings left for pair(s): " + ", ".join(empty))
    return ScoreResult(delta_v, subjects, n_out, n_total)


# --- splits and crops ---------------------------------------------------------

def split_content_independent(records: Sequence[PairRecord],
                              fractions: tuple = (0.7, 0.1, 0.2),
                              seed: int = 0) -> list[PairRecord]:
    """Assign train/val/test so that no content id spans two splits.

    Fractions apply to content ids, rounded by largest remainder.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ValueError(f"fractions must be three nonnegative values summing to 1, got {fractions}")
    contents = sorted({r.content_id for r in records})
    n = len(contents)
    wanted = sum(1 for f in fractions if f > 0)
    if n < wanted:
        raise ValueError(f"{n} content id(s) cannot fill {wanted} splits")
    raw = [f * n for f in fractions]
    counts = [int(np.floor(x)) for x in raw]
    order = sorted(range(3), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    for i in range(3):
        # every split with a positive fraction gets at least one content
        if fractions[i] > 0 and counts[i] == 0:
            donor = max(range(3), key=lambda j: counts[j])
            counts[donor] -= 1
            counts[i] += 1
    perm = np.random.default_rng(seed).permutation(n)
    assign = {}
    start = 0
    for name, k in zip(SPLITS, counts):
        for idx in perm[start:start + k]:
            assign[contents[idx]] = name
        start += k
    return [replace(r, split=assign[r.content_id]) for r in records]


def sample_crop(a, b, size: int, rng) -> tuple[np.ndarray, np.ndarray, tuple[int, int]]:
    """Crop both images of a pair at one shared random offset."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"pair shapes differ: {a.shape} vs {b.shape}")
    h, w = a.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} is smaller than the {size}x{size} crop")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    sl = (slice(top, top + size), slice(left, left + size))
    return a[sl], b[sl], (top, left)


# --- color patches ---------------------------------------------------------------

@dataclass
class PatchPair:
    pair_id: str
    p: tuple
    q: tuple
    space: str
    delta_v: float | None = None


def load_patch_set(path) -> list[PatchPair]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = ["pair_id", "p1", "p2", "p3", "q1", "q2", "q3", "space"]
        missing = [c for c in need if c not in (reader.fieldnames or [])]
        if missing:
            raise ManifestError(f"{path}: missing column(s) {', '.join(missing)}")
        has_dv = "delta_v" in reader.fieldnames
        for line, row in enumerate(reader, start=2):
            space = row["space"].strip().lower()
            if space not in ("xyz", "lab"):
                raise ManifestError(f"{path}:{line}: column space: expected xyz or lab, got {space!r}")
            try:
                p = tuple(float(row[f"p{i}"]) for i in (1, 2, 3))
                q = tuple(float(row[f"q{i}"]) for i in (1, 2, 3))
                dv = float(row["delta_v"]) if has_dv and row["delta_v"] not in ("", None) else None
            except ValueError as exc:
                raise ManifestError(f"{path}:{line}: {exc}") from exc
            out.append(PatchPair(row["pair_id"].strip(), p, q, space, dv))
    return out


def render_patch(color, space: str = "lab", size: int = 128,
                 white: WhitePoint = D65) -> tuple[np.ndarray, int]:
    """Constant ``size x size`` sRGB patch of one color; returns (image, n_clipped)."""
    c = np.asarray(color, dtype=float)
    if space == "lab":
        xyz = lab_to_xyz(c, white)
    elif space == "xyz":
        xyz = c
    else:
        raise ValueError(f"space must be 'lab' or 'xyz', got {space!r}")
    rgb, n_clipped = xyz_to_srgb(xyz)
    img = np.broadcast_to(rgb, (size, size, 3)).astype(np.float64)
    return img, n_clipped


def render_patch_pair(p, q, space: str = "lab", size: int = 128,
                      white: WhitePoint = D65) -> tuple[np.ndarray, np.ndarray, int]:
    """Two homogeneous patches; the count reports clipped sRGB components."""
    a, na = render_patch(p, space, size, white)
    b, nb = render_patch(q, space, size, white)
    return a, b, na + nb


# --- synthetic data -----------------------------------------------------------------

def synthetic_content(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth random scene: colored Gaussian blobs on a tinted gradient."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.zeros((size, size, 3)) + rng.uniform(0.2, 0.8, 3)
    for _ in range(6):
        cx, cy = rng.uniform(0, 1, 2)
        s = rng.uniform(0.05, 0.3)
        img += rng.uniform(-0.5, 0.5, 3) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2)
                                                  / (2 * s * s))[..., None]
    img += rng.uniform(-0.3, 0.3, 3) * xx[..., None]
    img += rng.normal(0, 0.03, img.shape)
    return np.clip(img, 0, 1)


def synthetic_distortion(rng: np.random.Generator, img: np.ndarray) -> np.ndarray:
    """Global lightness shift, chroma scaling and a/b offsets in CIELAB."""
    from .colorspace import lab_to_srgb, srgb_to_lab

    lab = srgb_to_lab(img)
    k = rng.uniform(0, 1)
    dl = rng.normal(0, 8) * k
    da, db = rng.normal(0, 8, 2) * k
    sat = 1 + rng.normal(0, 0.3) * k
    out = lab.copy()
    out[..., 0] += dl
    out[..., 1] = out[..., 1] * sat + da
    out[..., 2] = out[..., 2] * sat + db
    return lab_to_srgb(out)[0]


def make_synthetic_dataset(out_dir, n_contents: int = 10, pairs_per_content: int = 20,
                           size: int = 256, seed: int = 0,
                           misaligned_fraction: float = 0.0,
                           formula=None) -> list[PairRecord]:
    """Write PNG pairs plus ``manifest.csv`` with ground truth from a classical formula.

    Ground truth is the pixel-mean CIEDE2000 (or ``formula``) of the
    8-bit images as written.  Misaligned pairs shift the test image by a
    small offset before computing the ground truth.
    """
    from .classical_cd import CdFormula, image_cd

    formula = formula or CdFormula.ciede2000()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for c in range(n_contents):
        big = synthetic_content(rng, size + 8)
        ref = to_uint8(big[4:4 + size, 4:4 + size])
        ref_path = out / f"c{c:03d}_ref.png"
        write_png(ref_path, ref)
        for k in range(pairs_per_content):
            shifted = rng.uniform() < misaligned_fraction
            src = big
            if shifted:
                dy, dx = rng.integers(-2, 3, 2)
                src = np.roll(big, (int(dy), int(dx)), axis=(0, 1))
            test = to_uint8(synthetic_distortion(rng, src)[4:4 + size, 4:4 + size])
            test_path = out / f"c{c:03d}_t{k:03d}.png"
            write_png(test_path, test)
            dv = image_cd(ref / 255.0, test / 255.0, formula).mean
            records.append(PairRecord(str(ref_path), str(test_path), dv, not shifted,
                                      f"c{c:03d}", pair_id=f"c{c:03d}_t{k:03d}"))
    write_manifest(out / "manifest.csv", records)
    return records
