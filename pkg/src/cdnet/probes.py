"""Empirical metric checks: reference recovery by projected descent,
triangle-inequality sampling, and axiom (non-negativity, symmetry,
identity) sampling.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import nn_core as nn
from .colorspace import D65, srgb_to_lab, srgb_to_lab_vjp


# --- differentiable classical metric ------------------------------------------

class De76Metric:
    """Pixel-mean CIELAB (1976) distance with an analytic pixel gradient."""

    def __init__(self, white=D65):
        self.white = white

    def __call__(self, x, y) -> float:
        d = srgb_to_lab(x, self.white) - srgb_to_lab(y, self.white)
        return float(np.sqrt((d * d).sum(-1)).mean())

    def per_pixel(self, x, y) -> np.ndarray:
        d = srgb_to_lab(x, self.white) - srgb_to_lab(y, self.white)
        return np.sqrt((d * d).sum(-1))

    def with_grad(self, x, y) -> tuple[float, np.ndarray]:
        y = np.asarray(y, dtype=float)
        d = srgb_to_lab(y, self.white) - srgb_to_lab(x, self.white)
        n = np.sqrt((d * d).sum(-1))
        safe = np.where(n > 0, n, 1.0)
        g_lab = np.where((n > 0)[..., None], d / safe[..., None], 0.0) / n.size
        return float(n.mean()), srgb_to_lab_vjp(y, g_lab, self.white)


# --- reference recovery ---------------------------------------------------------

INIT_MODES = ("noise", "altered-image", "custom")


@dataclass
class RecoveryConfig:
    steps: int = 2000
    step_size: float = 1e-2
    init: str = "noise"
    clamp: tuple = (0.0, 1.0)
    threshold: float = 0.0  # stop once the CD falls to this value (0 runs all steps)
    noise_sigma: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.steps <= 0 or self.step_size <= 0:
            raise ValueError("steps and step_size must be positive")
        if self.init not in INIT_MODES:
            raise ValueError(f"init must be one of {INIT_MODES}, got {self.init!r}")
        lo, hi = self.clamp
        if not lo < hi:
            raise ValueError(f"bad clamp range {self.clamp}")


def initial_image(x, cfg: RecoveryConfig, custom=None) -> np.ndarray:
    """Starting point: Gaussian noise about mid-gray, a tone-altered copy of
    the reference, or a user image."""
    x = np.asarray(x, dtype=float)
    lo, hi = cfg.clamp
    if cfg.init == "noise":
        rng = np.random.default_rng(cfg.seed)
        y = 0.5 + cfg.noise_sigma * rng.standard_normal(x.shape)
    elif cfg.init == "altered-image":
        y = x ** 1.8 * np.array([1.0, 0.85, 0.7])
    else:
        if custom is None:
            raise ValueError("init='custom' needs an initial image")
        y = np.asarray(custom, dtype=float)
    return np.clip(y, lo, hi)


@dataclass
class RecoveryResult:
    image: np.ndarray
    trajectory: np.ndarray  # CD of the iterate before each step, then the final one

    def trajectory_csv(self) -> str:
        lines = ["step,delta_e"] + [f"{i},{float(v)!r}" for i, v in enumerate(self.trajectory)]
        return "\n".join(lines) + "\n"


def recover_reference(metric, x, y0, cfg: RecoveryConfig | None = None) -> RecoveryResult:
    """Minimize ``metric(x, y)`` over the pixels of ``y`` by projected Adam.

    ``metric.with_grad(x, y)`` must return the CD and its gradient with
    respect to ``y``.
    """
    cfg = cfg or RecoveryConfig()
    x = np.asarray(x, dtype=float)
    y = np.array(y0, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"reference {x.shape} and initial image {y.shape} differ")
    lo, hi = cfg.clamp
    np.clip(y, lo, hi, out=y)
    state = nn.AdamState(lr=cfg.step_size)
    traj = []
    for step in range(cfg.steps):
        value, g = metric.with_grad(x, y)
        traj.append(value)
        if value <= cfg.threshold:
            break
        g = np.asarray(g, dtype=float)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient at step {step}")
        nn.adam_step({"y": y}, {"y": g}, state)
        np.clip(y, lo, hi, out=y)
    else:
        traj.append(metric.with_grad(x, y)[0])
    return RecoveryResult(y, np.asarray(traj))


# --- triangle inequality ----------------------------------------------------------

@dataclass
class TripletReport:
    triplets: int
    violations: int
    max_margin: float  # largest d(x,z) - d(x,y) - d(y,z) beyond tolerance, else 0
    tolerance: float
    worst: tuple = ()  # (group, i, j, k) of the largest violation

    def row(self) -> dict:
        return {"triplets": self.triplets, "violations": self.violations,
                "max_margin": self.max_margin, "tolerance": self.tolerance}


def triangle_probe(metric: Callable, groups: Mapping[str, Sequence[np.ndarray]],
                   samples: int = 100_000, seed: int = 0,
                   tolerance: float = 1e-6) -> TripletReport:
    """Sample same-content triplets (x, y, z) of distinct images and count
    ``d(x,z) > d(x,y) + d(y,z) + tolerance``.

    Groups are drawn with probability proportional to their triplet count.
    Distances are memoized per ordered pair, so large sample counts on
    small groups cost one metric call per pair.
    """
    names = sorted(k for k, v in groups.items() if len(v) >= 3)
    if not names:
        raise ValueError("no content group has 3 or more images")
    rng = np.random.default_rng(seed)
    sizes = np.array([len(groups[k]) for k in names], dtype=float)
    weight = sizes * (sizes - 1) * (sizes - 2)
    counts = rng.multinomial(samples, weight / weight.sum())
    violations = 0
    max_margin = 0.0
    worst: tuple = ()
    for name, n_g, count in zip(names, sizes.astype(int), counts):
        if count == 0:
            continue
        imgs = groups[name]
        memo: dict[tuple[int, int], float] = {}

        def dist(i, j):
            key = (i, j)
            v = memo.get(key)
            if v is None:
                v = memo[key] = float(metric(imgs[i], imgs[j]))
            return v

        # distinct triplets: sample i, then j != i, then k not in {i, j}
        i = rng.integers(0, n_g, count)
        j = (i + rng.integers(1, n_g, count)) % n_g
        k = rng.integers(0, n_g - 2, count)
        lo, hi = np.minimum(i, j), np.maximum(i, j)
        k = k + (k >= lo)
        k = k + (k >= hi)
        for a, b, c in zip(i.tolist(), j.tolist(), k.tolist()):
            margin = dist(a, c) - dist(a, b) - dist(b, c)
            if margin > tolerance:
                violations += 1
                if margin > max_margin:
                    max_margin = margin
                    worst = (name, a, b, c)
    return TripletReport(int(samples), violations, max_margin, tolerance, worst)


# --- axioms -------------------------------------------------------------------

@dataclass
class AxiomReport:
    pairs: int
    negative: int = 0
    asymmetric: int = 0
    nonzero_self: int = 0
    max_asymmetry: float = 0.0
    max_self: float = 0.0
    min_value: float = float("inf")
    tolerance: float = 1e-6
    examples: list = field(default_factory=list)  # first few failing pair indices

    @property
    def failures(self) -> int:
        return self.negative + self.asymmetric + self.nonzero_self

    def row(self) -> dict:
        d = asdict(self)
        d.pop("examples")
        return d


def random_image_pairs(shape=(16, 16, 3)) -> Callable:
    """Pair sampler drawing two independent uniform sRGB images."""

    def sample(rng):
        return rng.uniform(0, 1, shape), rng.uniform(0, 1, shape)

    return sample


def axiom_probe(metric: Callable, sampler: Callable, count: int = 10_000, seed: int = 0,
                tolerance: float = 1e-6) -> AxiomReport:
    """Check d >= 0, |d(x,y) - d(y,x)| <= tol and d(x,x) <= tol on sampled pairs."""
    rng = np.random.default_rng(seed)
    rep = AxiomReport(count, tolerance=tolerance)
    for n in range(count):
        x, y = sampler(rng)
        dxy = float(metric(x, y))
        dyx = float(metric(y, x))
        dxx = float(metric(x, x))
        bad = False
        if min(dxy, dyx, dxx) < 0:
            rep.negative += 1
            bad = True
        asym = abs(dxy - dyx)
        if asym > tolerance:
            rep.asymmetric += 1
            bad = True
        if abs(dxx) > tolerance:
            rep.nonzero_self += 1
            bad = True
        rep.max_asymmetry = max(rep.max_asymmetry, asym)
        rep.max_self = max(rep.max_self, abs(dxx))
        rep.min_value = min(rep.min_value, dxy, dyx, dxx)
        if bad and len(rep.examples) < 10:
            rep.examples.append(n)
    return rep


def report_csv(row: dict) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n")
    w.writeheader()
    w.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()
