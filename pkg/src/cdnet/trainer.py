"""CD-Net training: Adam on mean squared CD error with step learning-rate
decay, per-epoch validation at full image size, and best-by-STRESS
checkpoint selection.

Batches are accumulated one pair at a time (each pair's loss term is
scaled by 1/B before its backward pass), which gives the exact gradient
of the batch-mean loss without holding B graphs in memory.  Pairs whose
reference crops are identical share one pass through the reference.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
import time
from dataclasses import asdict, astuple, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import model
from . import nn_core as nn
from .dataset import ImageCache, PairRecord, atomic_write_text, sample_crop, split_content_independent
from .evaluator import DegenerateInputError, EvalReport, evaluate, report_from_scores, stress


class TrainingAbort(FloatingPointError):
    """Non-finite loss or gradient; carries the epoch and batch index."""

    def __init__(self, epoch: int, batch: int, detail: str):
        super().__init__(f"epoch {epoch}, batch {batch}: {detail}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 8
    epochs: int = 100
    lr_halving_period: int = 50
    crop: int = 768
    seed: int = 0
    train_fraction: float = 0.7
    val_fraction: float = 0.1
    test_fraction: float = 0.2
    checkpoint_dir: str = ""
    loss: str = "mse"
    # Optional early stop once both running train STRESS and validation
    # STRESS fall below these (0 disables).
    target_train_stress: float = 0.0
    target_val_stress: float = 0.0
    manifest: str = ""

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "epochs", "lr_halving_period", "crop"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        fr = self.fractions
        if any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be nonnegative and sum to 1, got {fr}")
        if self.loss not in ("mse", "mae"):
            raise ValueError(f"loss must be 'mse' or 'mae', got {self.loss!r}")

    @property
    def fractions(self) -> tuple:
        return (self.train_fraction, self.val_fraction, self.test_fraction)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        """Parse ``key = value`` lines; ``#`` starts a comment."""
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for n, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {n}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"config line {n}: unknown key {key!r}")
            kind = types[key]
            try:
                kw[key] = (int(value) if kind == "int" else
                           float(value) if kind == "float" else value)
            except ValueError:
                raise ValueError(f"config line {n}: {key} expects {kind}, got {value!r}")
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for a 0-based epoch index."""
    return cfg.learning_rate / 2.0 ** (epoch // cfg.lr_halving_period)


def mse_loss(pred, target, kind: str = "mse") -> nn.Tensor:
    """Mean of squared (or absolute) differences between predicted and target CDs.

    ``pred`` is a sequence of scalar tensors (or floats); targets are floats.
    """
    pred = [p if isinstance(p, nn.Tensor) else nn.Tensor(np.float64(p)) for p in pred]
    target = list(np.asarray(target, dtype=float).ravel())
    if len(pred) != len(target):
        raise ValueError(f"{len(pred)} predictions vs {len(target)} targets")
    if not pred:
        raise ValueError("empty batch")
    op = nn.square if kind == "mse" else nn.absolute
    terms = [op(p - np.asarray(t, dtype=p.dtype)) for p, t in zip(pred, target)]
    return nn.mean(nn.stack(terms))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_stress: float
    val_stress: float
    val_plcc: float
    val_srcc: float
    lr: float
    seconds: float
    # STRESS of the end-of-epoch model over the whole training split; only
    # computed when early-stop targets are set and the validation target is met
    train_stress_full: float = float("nan")


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1

    def __len__(self) -> int:
        return len(self.epochs)

    @property
    def val_stress(self) -> list:
        return [e.val_stress for e in self.epochs]

    @property
    def train_loss(self) -> list:
        return [e.train_loss for e in self.epochs]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_stress", "val_plcc", "val_srcc", "lr",
                    "train_stress", "train_stress_full"])
        for e in self.epochs:
            w.writerow([e.epoch] + [repr(float(x)) for x in (
                e.train_loss, e.val_stress, e.val_plcc, e.val_srcc, e.lr, e.train_stress,
                e.train_stress_full)])
        return buf.getvalue()

    def same_values(self, other: "TrainHistory") -> bool:
        """Equality ignoring wall-clock time."""
        strip = lambda h: [astuple(replace(e, seconds=0.0)) for e in h.epochs]
        return (self.best_epoch == other.best_epoch and len(self) == len(other)
                and all(np.array_equal(a, b, equal_nan=True)
                        for a, b in zip(strip(self), strip(other))))


def _safe(fn, *args) -> float:
    try:
        return float(fn(*args))
    except DegenerateInputError:
        return float("nan")


def _group_by_reference(batch, load_pair, crop: int, rng) -> list:
    """Crop every pair (in batch order), then group pairs with identical reference crops."""
    groups: dict[bytes, tuple] = {}
    for rec in batch:
        a, b = load_pair(rec)
        a, b, _ = sample_crop(a, b, crop, rng)
        a = np.ascontiguousarray(a)
        key = hashlib.blake2b(a.tobytes(), digest_size=16).digest() + str(a.shape).encode()
        groups.setdefault(key, (a, []))[1].append((rec, b))
    return list(groups.values())


def _accumulate_batch(params: model.CdNetParams, groups, n: int,
                      loss: str = "mse") -> tuple[float, list[float]]:
    """Add the gradient of the batch-mean loss to ``params``; returns (loss, predictions).

    ``groups`` comes from :func:`_group_by_reference`.  Each reference is
    transformed once; its feature gradient is summed over the pairs that
    share it and then propagated back through the reference branch.
    """
    dtype = params.metric_l.dtype
    total, values = 0.0, []
    for a, members in groups:
        fa_tape = model.transform_tensor(model.as_input(a, dtype), params)
        fa = nn.Tensor(fa_tape.data, requires_grad=True)
        for rec, b in members:
            fb = model.transform_tensor(model.as_input(b, dtype), params)
            value, _ = model.features_cd_tensor(fa, fb, params, eps=model.TRAIN_EPS)
            term = nn.mul(mse_loss([value], [rec.delta_v], loss), np.asarray(1.0 / n, dtype=dtype))
            if not np.isfinite(term.data):
                raise FloatingPointError(f"non-finite loss for pair {rec.pair_id!r}")
            nn.backward(term)
            total += float(term.data)
            values.append(float(value.data))
        if fa.grad is not None:
            nn.backward(fa_tape, fa.grad)
    return total, values


def _scores(params, records, load_pair) -> list[float]:
    # shared reference images are transformed once
    metric = model.CdNetMetric(params, cache_size=64)
    return [metric(*load_pair(r)) for r in records]


def _validate(params, records, load_pair) -> tuple[float, float, float]:
    if len(records) < 2:
        return (float("nan"),) * 3
    e = _scores(params, records, load_pair)
    v = [r.delta_v for r in records]
    try:
        rep = report_from_scores(e, v)
        return rep.stress, rep.plcc, rep.srcc
    except DegenerateInputError:
        return _safe(stress, e, v), float("nan"), float("nan")


def assign_splits(records: Sequence[PairRecord], cfg: TrainConfig) -> list[PairRecord]:
    if all(r.split != "unassigned" for r in records):
        return list(records)
    return split_content_independent(records, cfg.fractions, cfg.seed)


def train(cfg: TrainConfig, records: Sequence[PairRecord],
          load_pair: Callable | None = None,
          progress: Callable[[EpochRecord], None] | None = None,
          arch: model.ArchConfig | None = None) -> tuple[model.Checkpoint, TrainHistory]:
    """Train from scratch; returns the best-validation checkpoint and history.

    Records without split labels are split by content with ``cfg.seed``.
    """
    records = assign_splits(records, cfg)
    train_set = [r for r in records if r.split == "train"]
    val_set = [r for r in records if r.split == "val"]
    if not train_set:
        raise ValueError("no training pairs")
    load_pair = load_pair or ImageCache()
    rng = np.random.default_rng(cfg.seed)
    params = model.build(cfg.seed, arch)
    named = params.named()
    arrays = {k: t.data for k, t in named.items()}
    state = nn.AdamState(lr=cfg.learning_rate)
    history = TrainHistory()
    best = None
    best_stress = math.inf
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    targets = cfg.target_train_stress > 0 and cfg.target_val_stress > 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        state.lr = lr_at(epoch, cfg)
        order = rng.permutation(len(train_set))
        losses, preds, targets = [], [], []
        for bi, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [train_set[i] for i in order[start:start + cfg.batch_size]]
            params.zero_grad()
            groups = _group_by_reference(batch, load_pair, cfg.crop, rng)
            try:
                batch_loss, values = _accumulate_batch(params, groups, len(batch), cfg.loss)
            except FloatingPointError as exc:
                raise TrainingAbort(epoch, bi, str(exc)) from exc
            for (rec, _), v in zip((m for _, ms in groups for m in ms), values):
                preds.append(v)
                targets.append(rec.delta_v)
            if not math.isfinite(batch_loss):
                raise TrainingAbort(epoch, bi, f"non-finite loss {batch_loss}")
            try:
                nn.adam_step(arrays, {k: t.grad for k, t in named.items()}, state)
            except FloatingPointError as exc:
                raise TrainingAbort(epoch, bi, str(exc)) from exc
            losses.append((batch_loss, len(batch)))
        train_loss = sum(l * n for l, n in losses) / sum(n for _, n in losses)
        tr_stress = _safe(stress, preds, targets)
        vs, vp, vr = _validate(params, val_set, load_pair) if val_set else (float("nan"),) * 3
        # the running train STRESS mixes predictions from every state the model
        # passed through this epoch, so the stop rule re-scores the training split
        full = float("nan")
        if targets and vs < cfg.target_val_stress:
            full = _safe(stress, _scores(params, train_set, load_pair),
                         [r.delta_v for r in train_set])
        stop = targets and full < cfg.target_train_stress
        rec = EpochRecord(epoch, train_loss, tr_stress, vs, vp, vr, state.lr,
                          time.perf_counter() - t0, full)
        history.epochs.append(rec)
        score = vs if math.isfinite(vs) else tr_stress
        # a model that meets both targets is the one returned
        if best is None or score < best_stress or stop:
            best_stress = score
            best = params.copy()
            history.best_epoch = epoch
            if ckpt_dir is not None:
                model.save(ckpt_dir / "best.ckpt", _checkpoint(best, cfg, history))
        if progress is not None:
            progress(rec)
        if stop:
            break

    ckpt = _checkpoint(best, cfg, history)
    if ckpt_dir is not None:
        model.save(ckpt_dir / "best.ckpt", ckpt)
        atomic_write_text(ckpt_dir / "history.csv", history.to_csv())
        atomic_write_text(ckpt_dir / "config.txt", cfg.to_text())
    return ckpt, history


def _checkpoint(params, cfg: TrainConfig, history: TrainHistory) -> model.Checkpoint:
    best = history.epochs[history.best_epoch]
    # output location does not change the result, so it stays out of the hash
    settings = {k: v for k, v in asdict(cfg).items() if k != "checkpoint_dir"}
    meta = {"config_hash": model.config_hash(settings), "seed": cfg.seed,
            "best_epoch": history.best_epoch, "val_stress": best.val_stress}
    return model.Checkpoint(params, meta)


@dataclass
class CrossValResult:
    per_repeat: list  # list[list[EvalReport]]
    mean: list  # list[EvalReport]


def cross_validate(cfg: TrainConfig, records: Sequence[PairRecord], repeats: int = 10,
                   load_pair: Callable | None = None,
                   progress: Callable | None = None) -> CrossValResult:
    """Re-split with seeds ``seed + i``, train, and evaluate on each test split."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    load_pair = load_pair or ImageCache()
    unassigned = [replace(r, split="unassigned") for r in records]
    per_repeat = []
    for i in range(repeats):
        c = replace(cfg, seed=cfg.seed + i,
                    checkpoint_dir=str(Path(cfg.checkpoint_dir) / f"repeat{i}")
                    if cfg.checkpoint_dir else "")
        split = split_content_independent(unassigned, c.fractions, c.seed)
        ckpt, _ = train(c, split, load_pair, progress)
        test = [r for r in split if r.split == "test"]
        metric = lambda a, b, p=ckpt.params: model.overall_cd(a, b, p)[0]
        per_repeat.append(evaluate(metric, test, load_pair, method=f"cdnet[{i}]"))
    return CrossValResult(per_repeat, mean_reports(per_repeat, method="cdnet"))


def mean_reports(per_repeat: Sequence[Sequence[EvalReport]], method: str = "") -> list[EvalReport]:
    """Arithmetic mean of each statistic per subset across repeats."""
    by_subset: dict[str, list[EvalReport]] = {}
    for reports in per_repeat:
        for r in reports:
            by_subset.setdefault(r.subset, []).append(r)
    out = []
    for subset, rs in by_subset.items():
        out.append(EvalReport(subset, int(round(np.mean([r.m for r in rs]))),
                              float(np.mean([r.stress for r in rs])),
                              float(np.mean([r.plcc for r in rs])),
                              float(np.mean([r.srcc for r in rs])),
                              (np.nan,) * 4, method))
    return out
