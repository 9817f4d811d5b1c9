"""Training harness: Adam loop, validation selection, checkpoints, logs.

Everything is seeded. Batch order is a pure function of (seed, epoch), so
an interrupted run resumed from its checkpoint continues bit-identically.
The method switch picks the regulariser: multi-scale consistency (pyag),
compactness (pce_compactness) or none (pce_only).
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import datakit
from .datakit import DatasetSplit, Sample, crop_or_pad_array, normalize_subject
from .losses import METHODS, LossConfig, total_loss, self_consistency_loss
from .metrics import MetricsReport, build_report, dice
from .model import (
    ModelConfig,
    PyagUNet,
    build_model,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)


class ConfigurationError(Exception):
    """The run configuration or supplied data cannot support training."""


@dataclass
class TrainConfig:
    method: str = "pyag"
    lr: float = 1e-4
    batch_size: int = 12
    max_steps: int = 100
    val_every: int = 50  # 0 disables validation
    seed: int = 0
    normalize: str = "median_iqr"
    image_size: tuple[int, int] | None = None
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> "TrainConfig":
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.lr <= 0:
            raise ConfigurationError("lr must be > 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.max_steps < 0:
            raise ConfigurationError("max_steps must be >= 0")
        if self.val_every < 0:
            raise ConfigurationError("val_every must be >= 0")
        if self.normalize not in datakit.NORMALIZE_MODES:
            raise ConfigurationError(
                f"normalize must be one of {datakit.NORMALIZE_MODES}, got {self.normalize!r}"
            )
        self.loss.validate()
        self.model.validate()
        return self


def config_to_dict(config: TrainConfig) -> dict:
    return asdict(config)


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    loss = LossConfig(**d.pop("loss", {}))
    model = ModelConfig(**d.pop("model", {}))
    if d.get("image_size") is not None:
        d["image_size"] = tuple(d["image_size"])
    return TrainConfig(loss=loss, model=model, **d)


_SCALAR_KEYS = {
    "method": str,
    "lr": float,
    "batch_size": int,
    "max_steps": int,
    "val_every": int,
    "seed": int,
    "normalize": str,
    "loss.a0": float,
    "loss.ratio_mode": str,
    "loss.pixel_reduction": str,
    "loss.epsilon": float,
    "model.depth": int,
    "model.base_filters": int,
    "model.classes": int,
    "model.in_channels": int,
    "model.upsample_mode": str,
    "model.self_sup_scope": str,
    "model.target_downsample": str,
}


def parse_config_text(text: str) -> TrainConfig:
    """Parse the flat `key = value` run-config format.

    Nested fields use dotted keys (loss.a0, model.depth); image_size takes
    `HxW`. Lines starting with # are comments. Unknown keys are rejected
    by name.
    """
    config = TrainConfig()
    unknown = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected `key = value`, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key == "image_size":
            h, w = value.lower().replace("x", ",").split(",")
            config.image_size = (int(h), int(w))
            continue
        if key not in _SCALAR_KEYS:
            unknown.append(key)
            continue
        caster = _SCALAR_KEYS[key]
        obj = config
        attr = key
        if "." in key:
            prefix, attr = key.split(".", 1)
            obj = getattr(config, prefix)
        setattr(obj, attr, caster(value))
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return config.validate()


def config_to_text(config: TrainConfig) -> str:
    lines = []
    for key, caster in _SCALAR_KEYS.items():
        obj = config
        attr = key
        if "." in key:
            prefix, attr = key.split(".", 1)
            obj = getattr(config, prefix)
        lines.append(f"{key} = {getattr(obj, attr)}")
    if config.image_size is not None:
        lines.append(f"image_size = {config.image_size[0]}x{config.image_size[1]}")
    return "\n".join(lines) + "\n"


@dataclass
class PreparedSample:
    x: torch.Tensor  # (ch, H, W) float32, normalised
    subject: str
    index: int
    scribble: torch.Tensor | None = None  # (H, W) int64
    labels: np.ndarray | None = None  # (H, W) int64


def prepare_samples(samples: list[Sample], config: TrainConfig) -> list[PreparedSample]:
    """Normalise per subject, crop/pad, and convert to tensors."""
    by_subject: dict[str, list[Sample]] = {}
    for s in samples:
        by_subject.setdefault(s.subject_id, []).append(s)
    prepared = []
    for subject in sorted(by_subject):
        group = by_subject[subject]
        normed = normalize_subject([s.image for s in group], mode=config.normalize)
        for sample, image in zip(group, normed):
            px = image.pixels
            scrib = sample.scribble.classes if sample.scribble is not None else None
            labels = sample.labels.classes if sample.labels is not None else None
            if config.image_size is not None:
                th, tw = config.image_size
                px = crop_or_pad_array(px, th, tw, 0.0)
                if scrib is not None:
                    scrib = crop_or_pad_array(scrib, th, tw, datakit.UNLABELED)
                if labels is not None:
                    labels = crop_or_pad_array(labels, th, tw, 0)
            prepared.append(
                PreparedSample(
                    x=torch.from_numpy(np.ascontiguousarray(px.transpose(2, 0, 1))).float(),
                    scribble=None if scrib is None else torch.from_numpy(scrib).long(),
                    labels=labels,
                    subject=sample.subject_id,
                    index=sample.index,
                )
            )
    return prepared


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    """Deterministic shuffle for one epoch, independent of run history."""
    return np.random.default_rng(np.random.SeedSequence(entropy=(seed, epoch))).permutation(n)


def batches_for_step(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    """Indices of the batch consumed at a given global step.

    Epochs are shuffled independently; the last short batch of an epoch is
    kept. Being a pure function of (seed, step) makes resumption exact.
    """
    steps_per_epoch = (n + batch_size - 1) // batch_size
    epoch, pos = divmod(step, steps_per_epoch)
    perm = epoch_permutation(seed, epoch, n)
    return perm[pos * batch_size : (pos + 1) * batch_size]


def _mean_val_dice(model: PyagUNet, prepared: list[PreparedSample]) -> float:
    scores = []
    classes = model.config.classes
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for sample in prepared:
            pred = model(sample.x.unsqueeze(0)).final.argmax(dim=1)[0].numpy()
            for cls in range(1, classes):
                scores.append(dice(pred == cls, sample.labels == cls))
    if was_training:
        model.train()
    return float(np.mean(scores)) if scores else float("nan")


def check_gradient_routing(model: PyagUNet, probe: torch.Tensor, loss_config: LossConfig) -> None:
    """Assert the consistency loss cannot move the depth-0 head.

    Runs in eval mode so the probe forward leaves no trace in the
    batch-norm statistics.
    """
    was_training = model.training
    model.eval()
    pyramid = model(probe)
    self_total, _ = self_consistency_loss(
        pyramid, loss_config, downsample_mode=model.config.target_downsample
    )
    grads = torch.autograd.grad(
        self_total, model.head_parameters(), allow_unused=True, retain_graph=False
    )
    if was_training:
        model.train()
    for g in grads:
        if g is not None and g.abs().max().item() != 0.0:
            raise ConfigurationError(
                "consistency loss leaks gradient into the full-resolution head"
            )


def _log_columns(depth: int) -> list[str]:
    return (
        ["step", "pce"]
        + [f"self_d{d}" for d in range(1, depth)]
        + ["self_total", "weight_a", "total"]
    )


def train(
    config: TrainConfig,
    samples: list[Sample],
    split: DatasetSplit,
    out_dir: Path | str,
    resume_from: Path | str | None = None,
) -> dict:
    """Run (or resume) one training job; returns a summary dict with paths."""
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    train_samples = [s for s in samples if s.subject_id in set(split.train_ids)]
    val_samples = [s for s in samples if s.subject_id in set(split.val_ids)]
    if not train_samples:
        raise ConfigurationError("training split is empty")
    missing = [f"{s.subject_id}/{s.index}" for s in train_samples if s.scribble is None]
    if missing:
        raise ConfigurationError(f"training images without scribbles: {missing[:5]}")
    val_samples = [s for s in val_samples if s.labels is not None]

    train_prep = prepare_samples(train_samples, config)
    val_prep = prepare_samples(val_samples, config) if val_samples else []

    start_step = 0
    best_val_dice = float("-inf")
    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        echoed = payload["extra"].get("train_config")
        # max_steps is the run-length knob: extending a run is the whole
        # point of resuming, everything else must match
        if echoed is not None and (
            replace(config_from_dict(echoed), max_steps=config.max_steps) != config
        ):
            raise ConfigurationError("resume checkpoint was written with a different config")
        model = model_from_checkpoint(payload)
        optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
        if "optimizer_state" in payload:
            optimizer.load_state_dict(payload["optimizer_state"])
        start_step = payload["step"]
        if payload["best_val_dice"] is not None:
            best_val_dice = payload["best_val_dice"]
    else:
        model = build_model(config.model, seed=config.seed)
        optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)

    if config.method == "pyag" and config.model.self_sup_scope == "target_detach":
        probe = torch.stack([train_prep[0].x])
        check_gradient_routing(model, probe, config.loss)

    best_path = out_dir / "best.ckpt"
    last_path = out_dir / "last.ckpt"
    log_path = out_dir / "train_log.csv"

    def snapshot(path, step):
        save_checkpoint(
            path,
            model,
            step=step,
            optimizer=optimizer,
            best_val_dice=None if best_val_dice == float("-inf") else best_val_dice,
            rng_state={"torch": torch.get_rng_state()},
            extra={"train_config": config_to_dict(config)},
        )

    def run_validation(step):
        nonlocal best_val_dice
        if not val_prep:
            return None
        score = _mean_val_dice(model, val_prep)
        if score > best_val_dice:
            best_val_dice = score
            snapshot(best_path, step)
        return score

    columns = _log_columns(config.model.depth)
    model.train()
    n = len(train_prep)
    with open(log_path, "a" if resume_from else "w", newline="") as log_file:
        writer = csv.writer(log_file)
        if not resume_from:
            writer.writerow(columns)
        for step in range(start_step, config.max_steps):
            idx = batches_for_step(config.seed, step, n, config.batch_size)
            x = torch.stack([train_prep[i].x for i in idx])
            scrib = torch.stack([train_prep[i].scribble for i in idx])

            optimizer.zero_grad()
            pyramid = model(x)
            breakdown = total_loss(
                pyramid,
                scrib,
                config.loss,
                method=config.method,
                downsample_mode=config.model.target_downsample,
            )
            breakdown.total.backward()
            optimizer.step()

            vals = breakdown.floats()
            per_depth = vals["self_per_depth"] or [0.0] * (config.model.depth - 1)
            writer.writerow(
                [step, repr(vals["pce"])]
                + [repr(v) for v in per_depth]
                + [repr(vals["self_total"]), repr(vals["weight_a"]), repr(vals["total"])]
            )
            if config.val_every and (step + 1) % config.val_every == 0:
                run_validation(step + 1)

    if config.val_every and val_prep and config.max_steps % max(config.val_every, 1) != 0:
        run_validation(config.max_steps)
    snapshot(last_path, config.max_steps)
    if not best_path.exists():
        # no validation ever ran: the last state doubles as best
        snapshot(best_path, config.max_steps)

    summary = {
        "config": config_to_dict(config),
        "steps": config.max_steps,
        "best_val_dice": None if best_val_dice == float("-inf") else best_val_dice,
        "checkpoints": {"best": str(best_path), "last": str(last_path)},
        "log": str(log_path),
        "split": {
            "train": sorted(split.train_ids),
            "val": sorted(split.val_ids),
            "test": sorted(split.test_ids),
        },
    }
    with open(out_dir / "run_summary.json", "w") as f:
        json.dump(summary, f, indent=1)
    return summary


def _load_payload(checkpoint) -> dict:
    if isinstance(checkpoint, (str, Path)):
        return load_checkpoint(checkpoint)
    return checkpoint


def evaluate(checkpoint, samples: list[Sample]) -> MetricsReport:
    """Score a checkpoint on samples that carry dense label maps."""
    payload = _load_payload(checkpoint)
    model = model_from_checkpoint(payload)
    model.eval()
    train_config = config_from_dict(
        payload["extra"].get("train_config", config_to_dict(TrainConfig(model=model.config)))
    )
    labeled = [s for s in samples if s.labels is not None]
    if not labeled:
        warnings.warn("no labeled samples to evaluate", RuntimeWarning)
        return MetricsReport(rows=[], num_classes=model.config.classes)
    for s in labeled:
        if s.labels.num_classes != model.config.classes:
            raise ConfigurationError(
                f"{s.subject_id}: label has {s.labels.num_classes} classes, "
                f"checkpoint expects {model.config.classes}"
            )
    prepared = prepare_samples(labeled, train_config)
    preds, truths, subjects, indices = [], [], [], []
    with torch.no_grad():
        for sample in prepared:
            pred = model(sample.x.unsqueeze(0)).final.argmax(dim=1)[0].numpy()
            preds.append(pred)
            truths.append(sample.labels)
            subjects.append(sample.subject)
            indices.append(sample.index)
    return build_report(
        preds, truths, num_classes=model.config.classes, subjects=subjects, indices=indices
    )


def predict(
    checkpoint,
    samples: list[Sample],
    out_dir: Path | str,
    write_aux: bool = False,
) -> dict:
    """Write argmax masks (and optionally per-depth auxiliary masks) as PNGs.

    Masks follow the dataset folder convention, one directory per subject.
    Images the model cannot ingest are reported per file without aborting
    the batch.
    """
    from PIL import Image as PILImage

    payload = _load_payload(checkpoint)
    model = model_from_checkpoint(payload)
    model.eval()
    train_config = config_from_dict(
        payload["extra"].get("train_config", config_to_dict(TrainConfig(model=model.config)))
    )
    out_dir = Path(out_dir)
    written, errors = [], {}
    prepared = prepare_samples(samples, train_config)
    with torch.no_grad():
        for sample in prepared:
            name = f"{sample.subject}/image_{sample.index}"
            try:
                pyramid = model(sample.x.unsqueeze(0))
            except ValueError as exc:
                errors[name] = str(exc)
                continue
            sub = out_dir / sample.subject
            sub.mkdir(parents=True, exist_ok=True)
            mask = pyramid.final.argmax(dim=1)[0].numpy().astype(np.uint8)
            path = sub / f"label_{sample.index}.png"
            PILImage.fromarray(mask).save(path)
            written.append(str(path))
            if write_aux:
                for d in range(1, len(pyramid.maps)):
                    aux = pyramid.maps[d].argmax(dim=1)[0].numpy().astype(np.uint8)
                    aux_path = sub / f"aux{d}_{sample.index}.png"
                    PILImage.fromarray(aux).save(aux_path)
                    written.append(str(aux_path))
    return {"written": written, "errors": errors}


def infer_num_classes(samples: list[Sample]) -> int:
    for s in samples:
        if s.labels is not None:
            return s.labels.num_classes
        if s.scribble is not None:
            return s.scribble.num_classes
    raise ConfigurationError("cannot infer class count: no labels or scribbles present")


def replace_config(config: TrainConfig, **updates) -> TrainConfig:
    return replace(config, **updates)
