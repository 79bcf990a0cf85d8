"""Agreement statistics between predicted (E) and perceptual (V) differences.

STRESS with its scale factor, PLCC after a four-parameter logistic
linearization, SRCC with average ranks, and per-subset report assembly
(perfectly aligned / non-aligned / all).
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.optimize import least_squares
from scipy.special import expit
from scipy.stats import rankdata


class DegenerateInputError(ValueError):
    """Inputs for which a statistic is undefined."""


def _pair(e, v, min_len: int):
    e = np.asarray(e, dtype=float).ravel()
    v = np.asarray(v, dtype=float).ravel()
    if e.shape != v.shape:
        raise ValueError(f"length mismatch: {e.size} predictions vs {v.size} targets")
    if e.size < min_len:
        raise DegenerateInputError(f"need at least {min_len} pairs, got {e.size}")
    if not (np.all(np.isfinite(e)) and np.all(np.isfinite(v))):
        raise DegenerateInputError("non-finite values")
    return e, v


def stress(e, v) -> float:
    """STRESS in [0, 100]; 0 means E is an exact positive multiple of V."""
    e, v = _pair(e, v, 2)
    ev = float(np.dot(e, v))
    vv = float(np.dot(v, v))
    if vv == 0.0:
        raise DegenerateInputError("all targets are zero")
    if abs(ev) < 1e-12:
        raise DegenerateInputError("sum(E*V) is zero; scale factor undefined")
    f = float(np.dot(e, e)) / ev
    resid = e - f * v
    return 100.0 * float(np.sqrt(np.dot(resid, resid) / (f * f * vv)))


def _pearson(x, y) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    den = np.sqrt(np.dot(xc, xc) * np.dot(yc, yc))
    if den == 0.0:
        raise DegenerateInputError("zero variance")
    return float(np.clip(np.dot(xc, yc) / den, -1.0, 1.0))


def logistic(e, eta):
    e = np.asarray(e, dtype=float)
    h1, h2, h3, h4 = eta
    return (h1 - h2) * expit((e - h3) / abs(h4)) + h2


@dataclass
class LogisticFit:
    eta: tuple
    fitted: np.ndarray
    converged: bool
    iterations: int


def fit_logistic(e, v, max_iter: int = 2000, rtol: float = 1e-10) -> LogisticFit:
    """Least-squares fit of the four-parameter logistic mapping E onto V.

    Levenberg-Marquardt from ``eta = (max V, min V, median E, std E)``.
    ``converged`` is False when the iteration cap was hit; the best
    parameters found so far are still returned.
    """
    e, v = _pair(e, v, 4)
    scale = float(np.std(e))
    if scale == 0.0:
        raise DegenerateInputError("constant predictions; logistic is unidentifiable")
    x0 = np.array([v.max(), v.min(), np.median(e), scale])
    if x0[0] == x0[1]:
        x0[0] += 1e-6

    def resid(eta):
        return logistic(e, eta) - v

    def jac(eta):
        h1, h2, h3, h4 = eta
        a = abs(h4) if h4 != 0 else 1e-300
        s = expit((e - h3) / a)
        ds = s * (1.0 - s)
        d_h3 = -(h1 - h2) * ds / a
        d_h4 = -(h1 - h2) * ds * (e - h3) / (a * a) * np.sign(h4 if h4 != 0 else 1.0)
        return np.column_stack([s, 1.0 - s, d_h3, d_h4])

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = least_squares(resid, x0, jac=jac, method="lm", ftol=rtol, xtol=rtol,
                            gtol=1e-15, max_nfev=max_iter)
    eta = tuple(float(x) for x in res.x)
    return LogisticFit(eta, logistic(e, eta), bool(res.status > 0), int(res.nfev))


def plcc(e, v, linearize: bool = True) -> float:
    e, v = _pair(e, v, 2)
    if linearize:
        e = fit_logistic(e, v).fitted
    return _pearson(e, v)


def srcc(e, v) -> float:
    """Spearman correlation as Pearson on average ranks.

    Without ties this equals ``1 - 6 sum d^2 / (M (M^2 - 1))``.
    """
    e, v = _pair(e, v, 2)
    if np.all(e == e[0]) or np.all(v == v[0]):
        raise DegenerateInputError("all-equal vector has no ranking")
    return _pearson(rankdata(e), rankdata(v))


@dataclass
class EvalReport:
    subset: str
    m: int
    stress: float
    plcc: float
    srcc: float
    eta: tuple = ()
    method: str = ""

    def row(self) -> dict:
        return {"method": self.method, "subset": self.subset, "m": self.m,
                "stress": self.stress, "plcc": self.plcc, "srcc": self.srcc,
                "eta1": self.eta[0], "eta2": self.eta[1],
                "eta3": self.eta[2], "eta4": self.eta[3]}


def report_from_scores(e, v, subset: str = "all", method: str = "") -> EvalReport:
    e, v = _pair(e, v, 2)
    fit = fit_logistic(e, v) if e.size >= 4 else None
    lin = fit.fitted if fit is not None else e
    return EvalReport(subset, int(e.size), stress(e, v), _pearson(lin, v), srcc(e, v),
                      fit.eta if fit is not None else (np.nan,) * 4, method)


SUBSETS = ("aligned", "non_aligned", "all")


def evaluate(metric: Callable, records: Sequence, load_pair: Callable | None = None,
             method: str = "", subsets: Iterable[str] = SUBSETS) -> list[EvalReport]:
    """Score ``metric(a, b)`` over records and report each nonempty subset.

    ``load_pair(record) -> (a, b)`` supplies the images; records need
    ``delta_v`` and ``aligned`` attributes.  Subsets with fewer than two
    pairs are skipped, except when ``all`` itself is too small, which
    raises.
    """
    if not records:
        raise DegenerateInputError("empty record subset")
    if load_pair is None:
        from .dataset import load_pair_images as load_pair
    scores = np.array([metric(*load_pair(r)) for r in records], dtype=float)
    truth = np.array([r.delta_v for r in records], dtype=float)
    aligned = np.array([bool(r.aligned) for r in records])
    masks = {"aligned": aligned, "non_aligned": ~aligned, "all": np.ones_like(aligned)}
    out = []
    for name in subsets:
        mask = masks[name]
        if name != "all" and mask.sum() < 2:
            continue
        out.append(report_from_scores(scores[mask], truth[mask], name, method))
    return out


def reports_to_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    fields = ["method", "subset", "m", "stress", "plcc", "srcc", "eta1", "eta2", "eta3", "eta4"]
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()


def format_table(reports: Sequence[EvalReport]) -> str:
    """Method rows by subset column groups of STRESS / PLCC / SRCC."""
    methods: list[str] = []
    subsets: list[str] = []
    cell = {}
    for r in reports:
        if r.method not in methods:
            methods.append(r.method)
        if r.subset not in subsets:
            subsets.append(r.subset)
        cell[r.method, r.subset] = r
    width = max([len("Method")] + [len(m) for m in methods])
    head1 = "Method".ljust(width) + "".join(f" | {s:^26}" for s in subsets)
    head2 = " " * width + " | STRESS   PLCC     SRCC    " * len(subsets)
    lines = [head1, head2.rstrip(), "-" * len(head1)]
    for m in methods:
        row = m.ljust(width)
        for s in subsets:
            r = cell.get((m, s))
            row += " | " + ("-" * 26 if r is None else
                            f"{r.stress:7.3f}  {r.plcc:6.3f}   {r.srcc:6.3f} ")
        lines.append(row)
    return "\n".join(lines)
