"""Command-line interface: train, predict, eval, synth, gradcheck, ablate.

Every command is deterministic given the configuration file and seed.
Data goes to files; diagnostics go to stderr; the exit status is zero
only when no errors occurred.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from gazemap import dataio, metrics
from gazemap.config import RunConfig, load_config
from gazemap.gradcheck import run_suite
from gazemap.model import MODES, SaliencyModel
from gazemap.trainer import train

__all__ = ["main"]


def _load_run_config(args) -> RunConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        overrides["mode"] = args.mode
    if args.config is None:
        return RunConfig(**overrides)
    return load_config(args.config, overrides)


def _resolve_samples(data: str, cfg: RunConfig) -> list[dataio.SampleRecord]:
    """Either a manifest path or "synth[:count]" for generated data."""
    if data.startswith("synth"):
        count = int(data.split(":", 1)[1]) if ":" in data else 20
        return dataio.synth_dataset(count, cfg.base_size, cfg.seed,
                                    sigma=cfg.resolved_density_sigma())
    return dataio.load_manifest_samples(data, cfg.base_size,
                                        sigma=cfg.resolved_density_sigma())


def _split_validation(samples, fraction: float):
    n_val = int(round(len(samples) * fraction))
    if n_val == 0:
        return samples, []
    return samples[:-n_val], samples[-n_val:]


def _evaluate_records(model_or_maps, samples, cfg: RunConfig, errors: list[str]):
    """Per-image metric rows; shuffled negatives pool the other images' fixations."""
    rows = []
    all_points = [rec.fixations.points for rec in samples]
    preds = []
    for rec in samples:
        try:
            if isinstance(model_or_maps, SaliencyModel):
                pred = model_or_maps.predict(rec.image.values)[0]
            else:
                pred = _load_map(Path(model_or_maps) / f"{rec.image_id}.png", cfg.base_size)
            preds.append(pred)
        except (OSError, ValueError) as exc:
            errors.append(f"{rec.image_id}: {exc}")
            preds.append(None)
    for i, (rec, pred) in enumerate(zip(samples, preds)):
        if pred is None:
            continue
        pool_points = [p for j, pts in enumerate(all_points) if j != i for p in pts]
        pool = metrics.FixationSet(pool_points, image_id="pool")
        try:
            row = metrics.evaluate_prediction(
                pred, rec.density.array(), rec.fixations, shuffled_pool=pool,
                splits=cfg.auc_splits, seed=cfg.seed, emd_grid=cfg.emd_grid)
        except (ValueError, RuntimeError) as exc:
            errors.append(f"{rec.image_id}: {exc}")
            continue
        rows.append({"image_id": rec.image_id, **row})
    return rows


def _load_map(path: Path, size: int) -> np.ndarray:
    with Image.open(path) as img:
        gray = img.convert("L")
        if gray.size != (size, size):
            gray = Image.fromarray(
                np.asarray(gray, dtype=np.float32), mode="F").resize((size, size),
                                                                     Image.BILINEAR)
        return np.asarray(gray, dtype=np.float64)


def _write_metric_csv(path, rows) -> None:
    cols = ("image_id",) + metrics.METRIC_COLUMNS
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in rows:
            w.writerow([row["image_id"]] + [repr(float(row[c]))
                                            for c in metrics.METRIC_COLUMNS])
        if rows:
            w.writerow(["aggregate"] + [
                repr(float(np.mean([row[c] for row in rows])))
                for c in metrics.METRIC_COLUMNS])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    samples = _resolve_samples(args.data, cfg)
    train_set, val_set = _split_validation(samples, cfg.val_fraction)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    model = SaliencyModel(cfg.model_config())
    result = train(model, train_set, val_set, cfg.train_config(), out_dir)
    result.write_history(out_dir / "history.csv")
    (out_dir / "run_config.cfg").write_text(cfg.to_text())

    errors: list[str] = []
    eval_set = val_set if val_set else train_set
    rows = _evaluate_records(model, eval_set, cfg, errors)
    _write_metric_csv(out_dir / "summary_metrics.csv", rows)
    summary = [cfg.to_text(),
               f"epochs_run={result.epochs_run}",
               f"steps_run={result.steps_run}",
               f"initial_train_loss={result.initial_train_loss!r}",
               f"final_train_loss={result.final_train_loss!r}",
               f"diverged={result.diverged}"]
    for col in metrics.METRIC_COLUMNS:
        if rows:
            summary.append(f"val_{col}={float(np.mean([r[col] for r in rows]))!r}")
    (out_dir / "run_summary.txt").write_text("\n".join(summary) + "\n")
    for err in errors:
        print(f"eval error: {err}", file=sys.stderr)
    if result.diverged:
        print("training aborted on non-finite loss; last checkpoint kept",
              file=sys.stderr)
        return 1
    return 1 if errors else 0


def cmd_predict(args) -> int:
    cfg = _load_run_config(args)
    model = SaliencyModel(cfg.model_config())
    dataio.load_checkpoint_into(model.params, args.checkpoint)
    image, orig = dataio.load_image_tensor(args.image, cfg.base_size)
    final = model.predict(image.values)[0]
    if orig != (cfg.base_size, cfg.base_size):
        plane = Image.fromarray(final.astype(np.float32), mode="F")
        final = np.asarray(plane.resize(orig, Image.BILINEAR), dtype=np.float64)
    dataio.save_gray_png(args.out, final)
    return 0


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    samples = _resolve_samples(args.data, cfg)
    errors: list[str] = []
    if args.checkpoint:
        model = SaliencyModel(cfg.model_config())
        dataio.load_checkpoint_into(model.params, args.checkpoint)
        source = model
    elif args.maps:
        source = args.maps
    else:
        print("eval requires --checkpoint or --maps", file=sys.stderr)
        return 2
    rows = _evaluate_records(source, samples, cfg, errors)
    _write_metric_csv(args.out, rows)
    for err in errors:
        print(f"eval error: {err}", file=sys.stderr)
    return 1 if errors else 0


def cmd_synth(args) -> int:
    cfg = _load_run_config(args)
    records = dataio.synth_dataset(args.count, cfg.base_size, cfg.seed,
                                   sigma=cfg.resolved_density_sigma())
    manifest = dataio.write_dataset(args.out, records)
    print(manifest)
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite()
    for r in results:
        print(r.line())
    failures = [r for r in results if not r.passed]
    if failures:
        print(f"{len(failures)} gradient checks failed", file=sys.stderr)
        return 1
    print(f"all {len(results)} gradient checks passed")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = _resolve_samples(args.data, cfg)
    train_set, val_set = _split_validation(samples, cfg.val_fraction or 0.2)
    status = 0
    table = []
    for mode in MODES:
        mode_cfg = load_config(args.config, {"mode": mode}) if args.config else \
            RunConfig(mode=mode, seed=cfg.seed)
        model = SaliencyModel(mode_cfg.model_config())
        result = train(model, train_set, val_set, mode_cfg.train_config(),
                       out_dir / mode.replace("+", "_"))
        errors: list[str] = []
        rows = _evaluate_records(model, val_set or train_set, mode_cfg, errors)
        status |= 1 if (errors or result.diverged) else 0
        entry = {"image_id": mode}
        for col in metrics.METRIC_COLUMNS:
            entry[col] = float(np.mean([r[col] for r in rows])) if rows else float("nan")
        table.append(entry)
        for err in errors:
            print(f"{mode}: {err}", file=sys.stderr)
    _write_metric_csv(out_dir / "ablation.csv", table)
    return status


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gazemap", description="Train and evaluate gaze-density prediction models.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=True, seed=True, mode=False):
        if config:
            p.add_argument("--config", help="key=value configuration file")
        if seed:
            p.add_argument("--seed", type=int, help="override the configured seed")
        if mode:
            p.add_argument("--mode", choices=MODES, help="model wiring variant")

    p = sub.add_parser("train", help="train a model on a manifest or synthetic data")
    add_common(p, mode=True)
    p.add_argument("--data", "--manifest", dest="data", required=True,
                   help="manifest path or 'synth[:count]'")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("predict", help="write the saliency map for one image")
    add_common(p, mode=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output PNG path")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("eval", help="metric table for a manifest")
    add_common(p, mode=True)
    p.add_argument("--data", "--manifest", dest="data", required=True)
    p.add_argument("--checkpoint", help="model checkpoint to predict with")
    p.add_argument("--maps", help="directory of precomputed <image_id>.png maps")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("synth", help="write a synthetic dataset to disk")
    add_common(p)
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("gradcheck", help="finite-difference verification of all blocks")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and evaluate every wiring variant")
    add_common(p)
    p.add_argument("--data", "--manifest", dest="data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ablate)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
