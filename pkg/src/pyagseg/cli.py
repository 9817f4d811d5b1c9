"""Command-line entry point for the whole pipeline.

Subcommands: generate-data, make-scribbles, train, evaluate, predict,
report. All randomness flows from explicit --seed flags; every command
writes a manifest before real work so identical re-runs become no-ops
(unless --force). Errors print as text on stderr and, with --json, as a
machine-readable object on stdout.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from . import datakit, scribbles, trainer
from .datakit import SyntheticSpec, load_dataset, save_dataset, split_patients
from .metrics import MetricsReport, wilcoxon_signed_rank
from .scribbles import ScribbleConfig, labeled_fraction, synthesize_scribbles
from .trainer import ConfigurationError, TrainConfig, parse_config_text


@dataclass
class RunManifest:
    run_id: str
    command: str
    config: dict
    inputs_hash: str
    outputs: list[str]


def hash_inputs(*parts) -> str:
    """Content hash over config strings and input trees."""
    digest = hashlib.sha256()
    for part in parts:
        if isinstance(part, Path):
            if part.is_dir():
                for p in sorted(part.rglob("*")):
                    if p.is_file():
                        digest.update(str(p.relative_to(part)).encode())
                        digest.update(hashlib.sha256(p.read_bytes()).digest())
            elif part.is_file():
                digest.update(part.read_bytes())
        else:
            digest.update(str(part).encode())
    return digest.hexdigest()


def write_manifest(out_dir: Path, manifest: RunManifest) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(asdict(manifest), f, indent=1)


def manifest_is_current(out_dir: Path, manifest: RunManifest, done_marker: str) -> bool:
    path = out_dir / "manifest.json"
    if not path.exists() or not (out_dir / done_marker).exists():
        return False
    with open(path) as f:
        old = json.load(f)
    return old.get("inputs_hash") == manifest.inputs_hash and old.get("config") == manifest.config


def _emit(args, payload: dict, human: str) -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload))
    else:
        print(human)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_generate_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise ConfigurationError(f"output dir {out} is not empty (use --force to overwrite)")
    size = args.size.lower().replace("x", ",").split(",")
    h, w = (int(size[0]), int(size[-1]))
    spec = SyntheticSpec(
        image_size=(h, w),
        num_subjects=args.subjects,
        images_per_subject=args.images_per_subject,
        noise_std=args.noise_std,
    )
    manifest = RunManifest(
        run_id=f"generate-data-{args.seed}",
        command="generate-data",
        config={**asdict(spec), "seed": args.seed},
        inputs_hash=hash_inputs(json.dumps(asdict(spec), sort_keys=True), args.seed),
        outputs=[str(out)],
    )
    write_manifest(out, manifest)
    samples = datakit.generate_synthetic_dataset(spec, seed=args.seed)
    save_dataset(samples, out)
    _emit(
        args,
        {"ok": True, "subjects": spec.num_subjects, "out": str(out)},
        f"wrote {spec.num_subjects} subjects to {out}",
    )
    return 0


def cmd_make_scribbles(args) -> int:
    labels_root = Path(args.labels)
    out = Path(args.out)
    config = ScribbleConfig(
        fg_mode=args.fg_mode,
        max_thickness=args.max_thickness,
        bg_walk_length=args.walk_length,
        seed=args.seed,
    )
    manifest = RunManifest(
        run_id=f"make-scribbles-{args.seed}",
        command="make-scribbles",
        config=asdict(config),
        inputs_hash=hash_inputs(labels_root, json.dumps(asdict(config), sort_keys=True)),
        outputs=[str(out)],
    )
    if manifest_is_current(out, manifest, "scribble_stats.csv") and not args.force:
        _emit(args, {"ok": True, "skipped": True}, f"{out} is up to date, skipping")
        return 0
    write_manifest(out, manifest)

    samples = load_dataset(labels_root)
    stats_rows = []
    count = 0
    for sample in samples:
        if sample.labels is None:
            continue
        # one deterministic walk seed per image
        child = np.random.SeedSequence(
            entropy=(args.seed, sample.subject_id, sample.index)
        ).generate_state(1)[0]
        per_image = ScribbleConfig(
            fg_mode=config.fg_mode,
            max_thickness=config.max_thickness,
            bg_walk_length=config.bg_walk_length,
            seed=int(child),
        )
        scribble = synthesize_scribbles(sample.labels, per_image)
        sub = out / sample.subject_id
        sub.mkdir(parents=True, exist_ok=True)
        PILImage.fromarray(scribble.classes.astype(np.uint8)).save(
            sub / f"scribble_{sample.index}.png"
        )
        stats_rows.append(
            [sample.subject_id, sample.index, repr(labeled_fraction(scribble))]
        )
        count += 1
    with open(out / "scribble_stats.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["subject", "image", "labeled_fraction"])
        writer.writerows(stats_rows)
    _emit(args, {"ok": True, "images": count, "out": str(out)},
          f"scribbled {count} images into {out}")
    return 0


def _resolve_train_config(args) -> TrainConfig:
    if args.config:
        config = parse_config_text(Path(args.config).read_text())
    else:
        config = TrainConfig()
    if args.method:
        config.method = args.method
    if args.seed is not None:
        config.seed = args.seed
    return config.validate()


def cmd_train(args) -> int:
    config = _resolve_train_config(args)
    data_root = Path(args.data)
    out = Path(args.out)
    manifest = RunManifest(
        run_id=f"train-{config.method}-seed{config.seed}",
        command="train",
        config={
            **trainer.config_to_dict(config),
            "split_seed": args.split_seed,
            "split_fractions": args.split_fractions,
        },
        inputs_hash=hash_inputs(data_root, trainer.config_to_text(config),
                                args.split_seed, args.split_fractions),
        outputs=[str(out)],
    )
    if manifest_is_current(out, manifest, "run_summary.json") and not args.force:
        _emit(args, {"ok": True, "skipped": True}, f"{out} is up to date, skipping")
        return 0
    write_manifest(out, manifest)

    samples = load_dataset(data_root)
    if not samples:
        raise ConfigurationError(f"no samples under {data_root}")
    fractions = tuple(float(x) for x in args.split_fractions.split(","))
    split = split_patients(datakit.subject_ids(samples), fractions, seed=args.split_seed)
    summary = trainer.train(config, samples, split, out, resume_from=args.resume)
    _emit(
        args,
        {"ok": True, "out": str(out), "best_val_dice": summary["best_val_dice"]},
        f"trained {config.method} for {config.max_steps} steps -> {out} "
        f"(best val dice {summary['best_val_dice']})",
    )
    return 0


def _split_ids_for(args, run_dir: Path, samples) -> list[str]:
    summary_path = run_dir / "run_summary.json"
    if summary_path.exists():
        with open(summary_path) as f:
            return json.load(f)["split"][args.split]
    fractions = tuple(float(x) for x in args.split_fractions.split(","))
    split = split_patients(datakit.subject_ids(samples), fractions, seed=args.split_seed)
    return {"train": split.train_ids, "val": split.val_ids, "test": split.test_ids}[args.split]


def cmd_evaluate(args) -> int:
    checkpoint = Path(args.checkpoint)
    samples = load_dataset(Path(args.data))
    ids = set(_split_ids_for(args, checkpoint.parent, samples))
    picked = [s for s in samples if s.subject_id in ids]
    report = trainer.evaluate(checkpoint, picked)
    out = Path(args.out) if args.out else checkpoint.parent / f"eval_{args.split}"
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "report.csv")
    with open(out / "report.json", "w") as f:
        json.dump({"split": args.split, "aggregates": report.aggregates()}, f, indent=1)
    _emit(
        args,
        {"ok": True, "out": str(out), "mean_fg_dice": report.mean_foreground_dice()},
        f"evaluated {len(picked)} images; mean foreground dice "
        f"{report.mean_foreground_dice():.4f} -> {out}",
    )
    return 0


def cmd_predict(args) -> int:
    samples = load_dataset(Path(args.data))
    result = trainer.predict(args.checkpoint, samples, Path(args.out), write_aux=args.aux)
    for name, msg in result["errors"].items():
        print(f"skipped {name}: {msg}", file=sys.stderr)
    _emit(
        args,
        {"ok": True, "written": len(result["written"]), "errors": result["errors"]},
        f"wrote {len(result['written'])} masks to {args.out}",
    )
    return 0


def _load_run_report(run: Path) -> MetricsReport:
    candidates = [run, run / "eval_test", run / "eval_val"]
    for cand in candidates:
        if (cand / "report.csv").exists():
            return MetricsReport.from_csv(cand / "report.csv")
    if run.suffix == ".csv" and run.exists():
        return MetricsReport.from_csv(run)
    raise ConfigurationError(f"no report.csv found under {run}")


def cmd_report(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    runs = [Path(r) for r in args.runs]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = {run.name or str(run): _load_run_report(run) for run in runs}

    def row_keys(report):
        return sorted((r["subject"], r["image"], r["class"]) for r in report.rows)

    keys = [row_keys(rep) for rep in reports.values()]
    paired = all(k == keys[0] for k in keys[1:]) and len(keys[0]) > 0

    figures = []
    for metric in ("dice", "iou", "hausdorff"):
        fig, ax = plt.subplots(figsize=(1.8 + 1.2 * len(reports), 3.5))
        data = [rep.values(metric) for rep in reports.values()]
        # whiskers at 2x IQR; anything beyond is drawn as an outlier
        ax.boxplot(data, labels=list(reports), whis=2.0)
        ax.set_title(metric)
        ax.set_ylabel(metric)
        fig.tight_layout()
        path = out / f"box_{metric}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        figures.append(str(path))

    comparisons = []
    if not paired and len(reports) > 1:
        print("run reports cover different test sets; skipping pairwise tests",
              file=sys.stderr)
    if paired and len(reports) > 1:
        names = list(reports)
        for i in range(len(names)):
            for j in range(i + 1, len(names)):
                a, b = reports[names[i]], reports[names[j]]

                def sorted_vals(rep, metric):
                    rows = sorted(rep.rows, key=lambda r: (r["subject"], r["image"], r["class"]))
                    return [r[metric] for r in rows]

                for metric in ("dice", "iou", "hausdorff"):
                    p = wilcoxon_signed_rank(
                        sorted_vals(a, metric), sorted_vals(b, metric)
                    )
                    comparisons.append(
                        {
                            "run_a": names[i],
                            "run_b": names[j],
                            "metric": metric,
                            "p_value": p,
                            "significant": bool(p < 0.01),
                        }
                    )
        with open(out / "significance.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["run_a", "run_b", "metric", "p_value", "significant"])
            for c in comparisons:
                star = "*" if c["significant"] else ""
                writer.writerow([c["run_a"], c["run_b"], c["metric"], c["p_value"], star])

    summary = {
        "runs": {name: rep.aggregates() for name, rep in reports.items()},
        "figures": figures,
        "comparisons": comparisons,
        "paired": paired,
    }
    with open(out / "report_summary.json", "w") as f:
        json.dump(summary, f, indent=1)
    _emit(
        args,
        {"ok": True, "out": str(out), "comparisons": len(comparisons)},
        f"report with {len(figures)} figures and {len(comparisons)} pairwise tests -> {out}",
    )
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pyagseg",
        description="Scribble-supervised segmentation lab: synthetic data, "
        "weak labels, gated-UNet training, metrics and reports.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed for all randomness")
    common.add_argument("--force", action="store_true", help="redo work even if up to date")
    common.add_argument("--json", action="store_true", help="machine-readable output on stdout")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", parents=[common], help="write a synthetic phantom dataset")
    p.add_argument("--size", default="64", help="image size, H or HxW")
    p.add_argument("--subjects", type=int, default=20)
    p.add_argument("--images-per-subject", type=int, default=1)
    p.add_argument("--noise-std", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_data, seed=0)

    p = sub.add_parser("make-scribbles", parents=[common], help="emulate scribbles from labels")
    p.add_argument("--labels", required=True, help="dataset root with label PNGs")
    p.add_argument("--out", required=True)
    p.add_argument("--fg-mode", choices=scribbles.FG_MODES, default="skeleton")
    p.add_argument("--max-thickness", type=int, default=2)
    p.add_argument("--walk-length", type=int, default=None)
    p.set_defaults(func=cmd_make_scribbles, seed=0)

    p = sub.add_parser("train", parents=[common], help="train one method on one dataset")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--method", choices=trainer.METHODS, default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--split-fractions", default="0.70,0.15,0.15")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", default=None)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--split-fractions", default="0.70,0.15,0.15")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", parents=[common], help="write argmax masks for images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--aux", action="store_true", help="also write per-depth auxiliary masks")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", parents=[common], help="compare runs: box plots + significance")
    p.add_argument("runs", nargs="+", help="run dirs (or report.csv files)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single reporting funnel for the CLI
        print(f"error: {exc}", file=sys.stderr)
        if getattr(args, "json", False):
            print(json.dumps({"ok": False, "error": type(exc).__name__, "message": str(exc)}))
        return 1


if __name__ == "__main__":
    sys.exit(main())
