"""Command-line interface.

Exit codes: 0 success, 1 configuration error, 2 I/O or input-format error,
3 image dimension mismatch, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
import tempfile
from dataclasses import fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from . import dataset, evaluator, model, probes, trainer
from .classical_cd import CdFormula, CdMap, ScielabConfig, image_cd

EXIT_CONFIG, EXIT_IO, EXIT_DIMS, EXIT_NUMERIC = 1, 2, 3, 4
METRIC_CHOICES = "de76 | cie94 | cmc | ciede2000 | scielab | cdnet:<checkpoint>"


class ConfigError(Exception):
    pass


class DimensionError(Exception):
    pass


# --- metrics --------------------------------------------------------------------

class Metric:
    """Named image metric: ``metric(a, b) -> float`` plus ``cd_map``."""

    def __init__(self, name: str, cd_map: Callable[[np.ndarray, np.ndarray], CdMap],
                 scalar: Callable | None = None):
        self.name = name
        self.cd_map = cd_map
        self._scalar = scalar

    def __call__(self, a, b) -> float:
        if self._scalar is not None:
            return float(self._scalar(a, b))
        return self.cd_map(a, b).mean


def resolve_metric(selector: str) -> Metric:
    sel = selector.strip()
    classical = {"de76": CdFormula.de76, "cie94": CdFormula.cie94,
                 "cmc": CdFormula.cmc, "ciede2000": CdFormula.ciede2000}
    if sel in classical:
        f = classical[sel]()
        return Metric(sel, lambda a, b: image_cd(a, b, f))
    if sel == "scielab":
        f = CdFormula.ciede2000()
        cfg = ScielabConfig()
        return Metric(sel, lambda a, b: image_cd(a, b, f, spatial=cfg))
    if sel.startswith("cdnet:"):
        path = sel.split(":", 1)[1]
        if not path:
            raise ConfigError("cdnet metric needs a checkpoint path: cdnet:<checkpoint>")
        ckpt = model.load(path)
        cached = model.CdNetMetric(ckpt.params, cache_size=64)
        return Metric(sel, lambda a, b: model.overall_cd(a, b, ckpt.params)[1], scalar=cached)
    raise ConfigError(f"unknown metric {selector!r}; expected {METRIC_CHOICES}")


# --- output helpers -----------------------------------------------------------

def _read_pair(path_a, path_b) -> tuple[np.ndarray, np.ndarray]:
    a = dataset.read_image(path_a)
    b = dataset.read_image(path_b)
    if a.shape != b.shape:
        raise DimensionError(f"image dimensions differ: {path_a} is {a.shape[1]}x{a.shape[0]}, "
                             f"{path_b} is {b.shape[1]}x{b.shape[0]}")
    return a, b


def render_map(values: np.ndarray, ceiling: float = 10.0, normalize: str = "ceiling") -> np.ndarray:
    """CD map -> uint8 grayscale by linear scaling (``ceiling`` maps to 255)."""
    v = np.asarray(values, dtype=float)
    if normalize == "per-map":
        top = float(v.max()) if v.size else 0.0
    else:
        top = ceiling
    if top <= 0:
        return np.zeros(v.shape, np.uint8)
    return np.clip(np.rint(v / top * 255.0), 0, 255).astype(np.uint8)


def _write_gray_png(path, arr: np.ndarray) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".",
                               prefix=path.name, suffix=".tmp.png")
    os.close(fd)
    try:
        Image.fromarray(arr, mode="L").save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _rows_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return buf.getvalue()


# --- subcommands --------------------------------------------------------------------

def cmd_cd(args) -> int:
    metric = resolve_metric(args.metric)
    a, b = _read_pair(args.image_a, args.image_b)
    if args.map_out:
        m = metric.cd_map(a, b)
        _write_gray_png(args.map_out, render_map(m.values, args.ceiling, args.normalize))
        value = m.mean if not args.metric.startswith("cdnet:") else metric(a, b)
    else:
        value = metric(a, b)
    print(f"{value:.4f}")
    return 0


def cmd_map(args) -> int:
    args.map_out = args.out
    return cmd_cd(args)


_TRAIN_FIELDS = {f.name: f for f in fields(trainer.TrainConfig)}


def cmd_train(args) -> int:
    base = trainer.TrainConfig.from_file(args.config) if args.config else None
    kw = dict(vars(base)) if base is not None else {}
    for name in _TRAIN_FIELDS:
        v = getattr(args, name, None)
        if v is not None:
            kw[name] = v
    if args.out:
        kw["checkpoint_dir"] = args.out
    try:
        cfg = trainer.TrainConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if not cfg.manifest:
        raise ConfigError("train needs a manifest (config key 'manifest' or --manifest)")
    if not cfg.checkpoint_dir:
        raise ConfigError("train needs an output directory (config key 'checkpoint_dir' or --out)")
    records = dataset.load_manifest(cfg.manifest)

    def progress(e):
        if not args.quiet:
            print(f"epoch {e.epoch:3d}  loss {e.train_loss:.4f}  train STRESS {e.train_stress:.2f}"
                  f"  val STRESS {e.val_stress:.2f}  lr {e.lr:.2e}", file=sys.stderr, flush=True)

    _, hist = trainer.train(cfg, records, progress=progress)
    print(f"best epoch {hist.best_epoch}  val STRESS {hist.epochs[hist.best_epoch].val_stress:.4f}")
    print(f"checkpoint {Path(cfg.checkpoint_dir) / 'best.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    metrics = [resolve_metric(m) for m in args.metric]
    records = dataset.load_manifest(args.manifest)
    if args.split:
        records = [r for r in records if r.split == args.split]
    cache = dataset.ImageCache()
    reports = []
    for m in metrics:
        reports += evaluator.evaluate(m, records, cache, method=m.name)
    dataset.atomic_write_text(args.out, evaluator.reports_to_csv(reports))
    table = evaluator.format_table(reports)
    if args.table:
        dataset.atomic_write_text(args.table, table + "\n")
    print(table)
    return 0


def cmd_prep(args) -> int:
    ratings = dataset.load_ratings(args.ratings)
    result = dataset.process_raw_scores(ratings)
    pairs = {}
    with open(args.pairs, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"pair_id", "ref_path", "test_path", "aligned", "content_id"}
        if not need <= set(reader.fieldnames or []):
            raise dataset.ManifestError(f"{args.pairs}: pairs file needs columns "
                                        + ", ".join(sorted(need)))
        for row in reader:
            pairs[row["pair_id"].strip()] = row
    missing = sorted(set(result.delta_v) - set(pairs))
    if missing:
        raise dataset.ManifestError(f"{args.pairs}: no entry for rated pair(s) {', '.join(missing)}")
    out = Path(args.out)
    pairs_base = Path(args.pairs).resolve().parent
    records = []
    for pid, dv in result.delta_v.items():
        row = pairs[pid]
        records.append(dataset.PairRecord(
            str(pairs_base / row["ref_path"].strip()), str(pairs_base / row["test_path"].strip()),
            dv, dataset._parse_bool(row["aligned"]), row["content_id"].strip(), pair_id=pid))
    dataset.write_manifest(out, records)
    if args.subjects:
        rows = [{"subject_id": s.subject_id, "outlier_count": s.outlier_count,
                 "total_count": s.total_count, "outlier_rate": f"{s.outlier_rate:.4f}",
                 "rejected": int(s.rejected)} for s in result.subjects]
        dataset.atomic_write_text(args.subjects, _rows_csv(rows))
    n_rej = sum(s.rejected for s in result.subjects)
    print(f"{len(records)} pairs, {result.outlier_ratings}/{result.total_ratings} outlier ratings,"
          f" {n_rej} subject(s) rejected")
    return 0


def cmd_synth(args) -> int:
    recs = dataset.make_synthetic_dataset(args.out, args.contents, args.pairs, args.size,
                                          args.seed, args.misaligned)
    print(f"{len(recs)} pairs written to {Path(args.out) / 'manifest.csv'}")
    return 0


def _recovery_metric(selector: str):
    if selector == "de76":
        return probes.De76Metric()
    if selector.startswith("cdnet:"):
        return model.CdNetMetric(model.load(selector.split(":", 1)[1]).params)
    raise ConfigError(f"recovery needs a differentiable metric (de76 or cdnet:<ckpt>), got {selector!r}")


def cmd_probe(args) -> int:
    if args.kind == "recovery":
        if not args.ref:
            raise ConfigError("probe recovery needs --ref")
        metric = _recovery_metric(args.metric)
        x = dataset.read_image(args.ref).astype(float)
        try:
            cfg = probes.RecoveryConfig(steps=args.steps, step_size=args.step_size, init=args.init,
                                        threshold=args.threshold, seed=args.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        custom = dataset.read_image(args.init_image) if args.init_image else None
        if custom is not None and custom.shape != x.shape:
            raise DimensionError("initial image and reference differ in size")
        y0 = probes.initial_image(x, cfg, custom)
        res = probes.recover_reference(metric, x, y0, cfg)
        if args.out_image:
            dataset.write_png(args.out_image, res.image)
        if args.trajectory:
            dataset.atomic_write_text(args.trajectory, res.trajectory_csv())
        row = {"steps": len(res.trajectory) - 1, "initial": float(res.trajectory[0]),
               "final": float(res.trajectory[-1])}
        if isinstance(metric, probes.De76Metric):
            row["max_pixel_de76"] = float(metric.per_pixel(x, res.image).max())
    elif args.kind == "triangle":
        if not args.manifest:
            raise ConfigError("probe triangle needs --manifest")
        metric = resolve_metric(args.metric)
        groups = manifest_groups(dataset.load_manifest(args.manifest))
        rep = probes.triangle_probe(metric, groups, args.samples, args.seed, args.tolerance)
        row = rep.row()
    else:
        metric = resolve_metric(args.metric)
        rep = probes.axiom_probe(metric, probes.random_image_pairs((args.size, args.size, 3)),
                                 args.count, args.seed, args.tolerance)
        row = rep.row()
    text = probes.report_csv(row)
    if args.out:
        dataset.atomic_write_text(args.out, text)
    print(text, end="")
    return 0


def manifest_groups(records) -> dict[str, list[np.ndarray]]:
    """Distinct images per content id, in first-seen order."""
    paths: dict[str, list[str]] = {}
    for r in records:
        lst = paths.setdefault(r.content_id, [])
        for p in (r.ref_path, r.test_path):
            if p not in lst:
                lst.append(p)
    cache = dataset.ImageCache()
    return {c: [cache.get(p) for p in ps] for c, ps in paths.items()}


def cmd_patch_eval(args) -> int:
    metrics = [resolve_metric(m) for m in args.metric]
    patches = dataset.load_patch_set(args.patches)
    rows = []
    scores = {m.name: [] for m in metrics}
    clipped_total = 0
    for pp in patches:
        a, b, n_clip = dataset.render_patch_pair(pp.p, pp.q, pp.space, args.size)
        clipped_total += n_clip
        row = {"pair_id": pp.pair_id, "clipped": n_clip}
        for m in metrics:
            v = m(a, b)
            scores[m.name].append(v)
            row[m.name] = f"{v:.4f}"
        rows.append(row)
    dataset.atomic_write_text(args.out, _rows_csv(rows))
    print(f"{len(patches)} patch pairs, {clipped_total} clipped sRGB component(s)")
    truth = [pp.delta_v for pp in patches]
    if all(t is not None for t in truth) and len(truth) >= 2:
        reports = [evaluator.report_from_scores(scores[m.name], truth, "all", m.name)
                   for m in metrics]
        if args.report:
            dataset.atomic_write_text(args.report, evaluator.reports_to_csv(reports))
        print(evaluator.format_table(reports))
    return 0


# --- parser ---------------------------------------------------------------------

def _add_map_flags(p):
    p.add_argument("--ceiling", type=float, default=10.0,
                   help="CD value rendered as white (default: 10)")
    p.add_argument("--normalize", choices=("ceiling", "per-map"), default="ceiling",
                   help="'per-map' scales each map by its own maximum (default: ceiling)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cdnet", description="Image color-difference measures.")
    sub = ap.add_subparsers(dest="command", required=True)
    seed = argparse.ArgumentParser(add_help=False)
    seed.add_argument("--seed", type=int, default=0, help="seed for all randomness (default: 0)")
    metric_help = f"metric selector: {METRIC_CHOICES}"

    p = sub.add_parser("cd", help="overall CD of two images")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("--metric", default="ciede2000", help=metric_help + " (default: ciede2000)")
    p.add_argument("--map-out", help="also write the CD map as a grayscale PNG")
    _add_map_flags(p)
    p.set_defaults(func=cmd_cd)

    p = sub.add_parser("map", help="write the CD map of two images")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("--out", required=True, help="output PNG")
    p.add_argument("--metric", default="ciede2000", help=metric_help + " (default: ciede2000)")
    _add_map_flags(p)
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("train", help="train CD-Net", parents=[seed])
    p.set_defaults(seed=None)
    p.add_argument("config", nargs="?", help="key = value config file (flags override it)")
    p.add_argument("--out", help="checkpoint directory")
    p.add_argument("--quiet", action="store_true")
    defaults = trainer.TrainConfig()
    for name, f in _TRAIN_FIELDS.items():
        if name in ("seed", "checkpoint_dir"):
            continue
        kind = {"int": int, "float": float}.get(f.type, str)
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=kind, default=None,
                       help=f"(default: {getattr(defaults, name)!r})")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="STRESS / PLCC / SRCC report over a manifest")
    p.add_argument("manifest")
    p.add_argument("--metric", action="append", required=True, help=metric_help + "; repeatable")
    p.add_argument("--out", required=True, help="report CSV")
    p.add_argument("--table", help="also write the text table here")
    p.add_argument("--split", choices=dataset.SPLITS, help="only records of this split")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("prep", help="raw ratings -> manifest with ground-truth differences")
    p.add_argument("ratings", help="CSV: pair_id, subject_id, grade")
    p.add_argument("--pairs", required=True,
                   help="CSV: pair_id, ref_path, test_path, aligned, content_id")
    p.add_argument("--out", required=True, help="manifest CSV")
    p.add_argument("--subjects", help="subject report CSV")
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("synth", help="generate a synthetic pair set", parents=[seed])
    p.add_argument("out")
    p.add_argument("--contents", type=int, default=10, help="(default: 10)")
    p.add_argument("--pairs", type=int, default=20, help="pairs per content (default: 20)")
    p.add_argument("--size", type=int, default=256, help="(default: 256)")
    p.add_argument("--misaligned", type=float, default=0.0,
                   help="fraction of shifted test images (default: 0)")
    p.set_defaults(func=cmd_synth)

    rc = probes.RecoveryConfig()
    p = sub.add_parser("probe", help="metric property probes", parents=[seed])
    p.add_argument("kind", choices=("recovery", "triangle", "axioms"))
    p.add_argument("--metric", default="de76", help=metric_help + " (default: de76)")
    p.add_argument("--out", help="report CSV")
    p.add_argument("--ref", help="recovery: reference image")
    p.add_argument("--out-image", help="recovery: recovered PNG")
    p.add_argument("--trajectory", help="recovery: trajectory CSV")
    p.add_argument("--steps", type=int, default=rc.steps, help=f"(default: {rc.steps})")
    p.add_argument("--step-size", type=float, default=rc.step_size,
                   help=f"(default: {rc.step_size})")
    p.add_argument("--init", choices=probes.INIT_MODES, default=rc.init,
                   help=f"(default: {rc.init})")
    p.add_argument("--init-image", help="recovery: initial image for --init custom")
    p.add_argument("--threshold", type=float, default=rc.threshold,
                   help=f"stop at this CD (default: {rc.threshold})")
    p.add_argument("--manifest", help="triangle: manifest whose content ids group images")
    p.add_argument("--samples", type=int, default=100_000, help="triangle (default: 100000)")
    p.add_argument("--count", type=int, default=10_000, help="axioms: pairs (default: 10000)")
    p.add_argument("--size", type=int, default=16, help="axioms: image side (default: 16)")
    p.add_argument("--tolerance", type=float, default=1e-6, help="(default: 1e-06)")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("patch-eval", help="CDs of rendered homogeneous color patches")
    p.add_argument("patches", help="CSV: pair_id, p1, p2, p3, q1, q2, q3, space[, delta_v]")
    p.add_argument("--metric", action="append", required=True, help=metric_help + "; repeatable")
    p.add_argument("--size", type=int, default=128, help="patch side (default: 128)")
    p.add_argument("--out", required=True, help="per-pair CSV")
    p.add_argument("--report", help="statistics CSV when delta_v is present")
    p.set_defaults(func=cmd_patch_eval)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "seed", 0) is None:
        args.seed = None
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DimensionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIMS
    except (OSError, dataset.ManifestError, model.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"error: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, evaluator.DegenerateInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
