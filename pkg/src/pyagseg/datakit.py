"""Data ingestion, preprocessing and synthetic phantom generation.

Images are 2-D intensity arrays with an optional mm/pixel spacing. Label
maps hold dense integer class indices (0 = background). Scribbles are
sparse label maps where every unannotated pixel carries the UNLABELED
sentinel. A small ring+blob phantom generator provides desk-scale
datasets with the nested topology of cardiac segmentation targets.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

# Sentinel for unannotated scribble pixels, both in memory and in PNG files.
UNLABELED = 255

NORMALIZE_MODES = ("median_iqr", "minmax_sym", "minmax_unit")


class CorruptDataError(Exception):
    """A dataset file violates the folder-layout contract."""


@dataclass
class Image:
    """2-D intensity image, shape H x W x ch with ch in {1, 3}."""

    pixels: np.ndarray
    subject_id: str = ""
    spacing: tuple[float, float] | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim == 2:
            px = px[:, :, None]
        self.pixels = px

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    def validate(self) -> "Image":
        if self.pixels.ndim != 3:
            raise ValueError(f"image must be H x W x ch, got shape {self.pixels.shape}")
        h, w, ch = self.pixels.shape
        if h < 16 or w < 16:
            raise ValueError(f"image too small: {h}x{w}, minimum is 16x16")
        if ch not in (1, 3):
            raise ValueError(f"channel count must be 1 or 3, got {ch}")
        if not np.isfinite(self.pixels).all():
            raise ValueError("image contains non-finite values")
        return self


@dataclass
class LabelMap:
    """Dense per-pixel class map, values in [0, num_classes-1], 0 = background."""

    classes: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.int64)

    def validate(self) -> "LabelMap":
        if self.classes.ndim != 2:
            raise ValueError(f"label map must be H x W, got shape {self.classes.shape}")
        if self.num_classes < 2:
            raise ValueError("need at least background + one foreground class")
        if self.classes.min() < 0 or self.classes.max() >= self.num_classes:
            raise ValueError(
                f"label values outside [0, {self.num_classes - 1}]: "
                f"range [{self.classes.min()}, {self.classes.max()}]"
            )
        return self


@dataclass
class Scribble:
    """Sparse class map: annotated pixels carry their class, the rest UNLABELED."""

    classes: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.int64)

    @property
    def labeled_mask(self) -> np.ndarray:
        """Indicator of annotated pixels (True exactly where a class is present)."""
        return (self.classes >= 0) & (self.classes < self.num_classes)

    def validate(self) -> "Scribble":
        if self.classes.ndim != 2:
            raise ValueError(f"scribble must be H x W, got shape {self.classes.shape}")
        vals = np.unique(self.classes)
        bad = vals[(vals != UNLABELED) & ((vals < 0) | (vals >= self.num_classes))]
        if bad.size:
            raise ValueError(f"scribble values outside classes + UNLABELED: {bad.tolist()}")
        if not self.labeled_mask.any():
            raise ValueError("scribble has no labeled pixel")
        return self


@dataclass
class DatasetSplit:
    train_ids: list[str]
    val_ids: list[str]
    test_ids: list[str]

    def validate(self, all_ids=None) -> "DatasetSplit":
        groups = [set(self.train_ids), set(self.val_ids), set(self.test_ids)]
        union: set[str] = set()
        total = 0
        for g in groups:
            union |= g
            total += len(g)
        if total != len(union):
            raise ValueError("split groups overlap or contain duplicates")
        if all_ids is not None and union != set(all_ids):
            raise ValueError("split does not cover the id list exactly")
        return self


@dataclass
class Sample:
    """One image together with whatever annotations exist for it."""

    image: Image
    labels: LabelMap | None = None
    scribble: Scribble | None = None
    subject_id: str = ""
    index: int = 0


@dataclass
class SyntheticSpec:
    """Ring+blob phantom parameters: a bright blob (class 2) nested inside an
    annulus (class 1) on background (class 0). Radii in pixels."""

    image_size: tuple[int, int] = (64, 64)
    num_subjects: int = 20
    images_per_subject: int = 1
    blob_radius: tuple[float, float] = (4.0, 7.0)
    annulus_inner: tuple[float, float] = (9.0, 12.0)
    annulus_outer: tuple[float, float] = (15.0, 20.0)
    center_jitter: float = 4.0
    noise_std: float = 0.05
    intensity_levels: tuple[float, ...] = (0.25, 0.55, 0.85)

    num_classes: int = field(default=3, init=False)

    def validate(self) -> "SyntheticSpec":
        h, w = self.image_size
        if h < 16 or w < 16:
            raise ValueError(f"image_size must be at least 16x16, got {h}x{w}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.num_subjects < 1 or self.images_per_subject < 1:
            raise ValueError("need at least one subject and one image per subject")
        r_lo, r_hi = self.blob_radius
        i_lo, i_hi = self.annulus_inner
        o_lo, o_hi = self.annulus_outer
        if not (0 < r_lo <= r_hi < i_lo <= i_hi < o_lo <= o_hi):
            raise ValueError(
                "radii ranges must satisfy 0 < blob < annulus_inner < annulus_outer"
            )
        if o_hi + self.center_jitter >= min(h, w) / 2:
            raise ValueError("annulus plus center jitter does not fit inside the image")
        if len(self.intensity_levels) != 3:
            raise ValueError("need one intensity level per class (background, ring, blob)")
        return self


def normalize_median_iqr(image: Image, subject_images: list[Image]) -> Image:
    """Center by the subject's median intensity and scale by its IQR.

    The median and interquartile range are pooled over every pixel of every
    image belonging to the subject. A degenerate IQR of 0 falls back to a
    divisor of 1 (with a warning) so constant slices stay finite.
    """
    if not subject_images:
        raise ValueError("subject_images must be non-empty")
    pooled = np.concatenate([np.ravel(im.pixels) for im in subject_images])
    med = float(np.median(pooled))
    q1, q3 = np.percentile(pooled, [25.0, 75.0])
    iqr = float(q3 - q1)
    if iqr == 0.0:
        warnings.warn(
            f"subject {image.subject_id or '?'}: zero IQR, dividing by 1", RuntimeWarning
        )
        iqr = 1.0
    out = (image.pixels - med) / iqr
    return replace(image, pixels=out.astype(np.float32))


def normalize_minmax(image: Image, subject_images: list[Image], symmetric: bool = False) -> Image:
    """Rescale to [0, 1] (or [-1, 1] when symmetric) over the subject's range."""
    if not subject_images:
        raise ValueError("subject_images must be non-empty")
    pooled = np.concatenate([np.ravel(im.pixels) for im in subject_images])
    lo, hi = float(pooled.min()), float(pooled.max())
    span = hi - lo
    if span == 0.0:
        warnings.warn(
            f"subject {image.subject_id or '?'}: constant intensities, dividing by 1",
            RuntimeWarning,
        )
        span = 1.0
    unit = (image.pixels - lo) / span
    out = unit * 2.0 - 1.0 if symmetric else unit
    return replace(image, pixels=out.astype(np.float32))


def normalize_subject(images: list[Image], mode: str = "median_iqr") -> list[Image]:
    """Apply one of the supported normalisation modes to a subject's images."""
    if mode not in NORMALIZE_MODES:
        raise ValueError(f"unknown normalisation mode {mode!r}, expected one of {NORMALIZE_MODES}")
    if mode == "median_iqr":
        return [normalize_median_iqr(im, images) for im in images]
    symmetric = mode == "minmax_sym"
    return [normalize_minmax(im, images, symmetric=symmetric) for im in images]


def crop_or_pad_array(arr: np.ndarray, target_h: int, target_w: int, pad_value) -> np.ndarray:
    """Center-crop / symmetrically pad the two leading axes to the target size.

    When the size difference is odd the extra row/column is cropped from or
    padded onto the bottom/right.
    """
    out = arr
    for axis, target in ((0, target_h), (1, target_w)):
        size = out.shape[axis]
        if size > target:
            start = (size - target) // 2
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(start, start + target)
            out = out[tuple(sl)]
        elif size < target:
            before = (target - size) // 2
            after = target - size - before
            widths = [(0, 0)] * out.ndim
            widths[axis] = (before, after)
            out = np.pad(out, widths, mode="constant", constant_values=pad_value)
    return out


def crop_or_pad(image: Image, target_h: int, target_w: int, pad_value: float = 0.0) -> Image:
    """Center-crop or pad an image to target_h x target_w (at least 16x16)."""
    if target_h < 16 or target_w < 16:
        raise ValueError("target dims must be at least 16")
    px = crop_or_pad_array(image.pixels, target_h, target_w, pad_value)
    return replace(image, pixels=px)


def generate_synthetic_sample(spec: SyntheticSpec, seed: int) -> tuple[Image, LabelMap]:
    """Draw one ring+blob phantom. Deterministic given (spec, seed)."""
    spec.validate()
    rng = np.random.default_rng(seed)
    h, w = spec.image_size

    cy = h / 2.0 + rng.uniform(-spec.center_jitter, spec.center_jitter)
    cx = w / 2.0 + rng.uniform(-spec.center_jitter, spec.center_jitter)
    r_blob = rng.uniform(*spec.blob_radius)
    r_in = rng.uniform(*spec.annulus_inner)
    r_out = rng.uniform(*spec.annulus_outer)

    yy, xx = np.mgrid[0:h, 0:w]
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    classes = np.zeros((h, w), dtype=np.int64)
    classes[(dist >= r_in) & (dist <= r_out)] = 1
    classes[dist <= r_blob] = 2

    levels = np.asarray(spec.intensity_levels, dtype=np.float32)
    pixels = levels[classes]
    if spec.noise_std > 0:
        pixels = pixels + rng.normal(0.0, spec.noise_std, size=(h, w)).astype(np.float32)

    image = Image(pixels=pixels.astype(np.float32))
    return image, LabelMap(classes=classes, num_classes=spec.num_classes)


def generate_synthetic_dataset(spec: SyntheticSpec, seed: int) -> list[Sample]:
    """Generate the full desk-scale dataset, one child seed per (subject, image)."""
    spec.validate()
    samples = []
    for s in range(spec.num_subjects):
        subject_id = f"subj{s:03d}"
        for k in range(spec.images_per_subject):
            child = np.random.SeedSequence(entropy=(seed, s, k)).generate_state(1)[0]
            image, labels = generate_synthetic_sample(spec, int(child))
            image.subject_id = subject_id
            samples.append(Sample(image=image, labels=labels, subject_id=subject_id, index=k))
    return samples


def split_patients(ids: list[str], fractions=(0.70, 0.15, 0.15), seed: int = 0) -> DatasetSplit:
    """Shuffle subject ids by seed and partition into train/val/test.

    Val and test sizes come from rounding their fractions (never below one
    subject for a nonzero fraction); train takes the remainder.
    """
    if len(ids) < 3:
        raise ValueError(f"need at least 3 ids to split, got {len(ids)}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    n = len(ids)

    def part_size(frac):
        if frac == 0.0:
            return 0
        return max(1, int(round(frac * n)))

    n_val = part_size(fractions[1])
    n_test = part_size(fractions[2])
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ValueError(f"fractions leave no training subjects for n={n}")
    split = DatasetSplit(
        train_ids=order[:n_train],
        val_ids=order[n_train : n_train + n_val],
        test_ids=order[n_train + n_val :],
    )
    return split.validate(all_ids=ids)


# ---------------------------------------------------------------------------
# Folder layout:  <root>/<subject_id>/image_<k>.png  (8/16-bit grayscale)
#                 <root>/<subject_id>/label_<k>.png  (8-bit class indices)
#                 <root>/<subject_id>/scribble_<k>.png  (8-bit, 255=UNLABELED)
#                 <root>/<subject_id>/meta.json  (spacing + intensity ranges)
# ---------------------------------------------------------------------------


def save_dataset(samples: list[Sample], root: Path | str) -> None:
    """Write samples to the PNG folder layout.

    Float intensities are quantised to 16-bit with the per-image (vmin, vmax)
    window recorded in meta.json, so loading restores values up to 16-bit
    quantisation error. Labels and scribbles round-trip exactly.
    """
    root = Path(root)
    by_subject: dict[str, list[Sample]] = {}
    for s in samples:
        by_subject.setdefault(s.subject_id or s.image.subject_id, []).append(s)
    for subject_id, group in by_subject.items():
        sub = root / subject_id
        sub.mkdir(parents=True, exist_ok=True)
        meta: dict = {"images": {}, "num_classes": None}
        for sample in group:
            k = sample.index
            px = sample.image.pixels[:, :, 0]
            vmin, vmax = float(px.min()), float(px.max())
            scale = (vmax - vmin) or 1.0
            raw = np.round((px - vmin) / scale * 65535.0).astype(np.uint16)
            PILImage.fromarray(raw).save(sub / f"image_{k}.png")
            meta["images"][f"image_{k}.png"] = {"vmin": vmin, "vmax": vmax}
            if sample.image.spacing is not None:
                meta["spacing"] = list(sample.image.spacing)
            if sample.labels is not None:
                PILImage.fromarray(sample.labels.classes.astype(np.uint8)).save(
                    sub / f"label_{k}.png"
                )
                meta["num_classes"] = sample.labels.num_classes
            if sample.scribble is not None:
                PILImage.fromarray(sample.scribble.classes.astype(np.uint8)).save(
                    sub / f"scribble_{k}.png"
                )
                meta["num_classes"] = meta["num_classes"] or sample.scribble.num_classes
        with open(sub / "meta.json", "w") as f:
            json.dump(meta, f, indent=1)


def _read_png(path: Path) -> np.ndarray:
    return np.asarray(PILImage.open(path))


def load_dataset(root: Path | str, num_classes: int | None = None) -> list[Sample]:
    """Load every subject under root, in sorted-id order.

    Missing label or scribble files simply yield samples without them; an
    image whose annotation shape disagrees raises CorruptDataError naming
    the offending file.
    """
    root = Path(root)
    if not root.is_dir():
        raise ValueError(f"dataset root does not exist: {root}")
    samples: list[Sample] = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        meta: dict = {}
        meta_path = sub / "meta.json"
        if meta_path.exists():
            with open(meta_path) as f:
                meta = json.load(f)
        spacing = tuple(meta["spacing"]) if "spacing" in meta else None
        n_classes = num_classes or meta.get("num_classes")
        for img_path in sorted(sub.glob("image_*.png")):
            k = int(img_path.stem.split("_")[1])
            raw = _read_png(img_path).astype(np.float32)
            window = meta.get("images", {}).get(img_path.name)
            if window is not None:
                vmin, vmax = window["vmin"], window["vmax"]
                raw = raw / 65535.0 * ((vmax - vmin) or 1.0) + vmin
            image = Image(pixels=raw, subject_id=sub.name, spacing=spacing)
            labels = scribble = None
            label_path = sub / f"label_{k}.png"
            if label_path.exists():
                arr = _read_png(label_path).astype(np.int64)
                if arr.shape != image.shape:
                    raise CorruptDataError(
                        f"{label_path}: label shape {arr.shape} does not match "
                        f"image shape {image.shape}"
                    )
                nc = n_classes or int(arr.max()) + 1
                labels = LabelMap(classes=arr, num_classes=nc)
            scribble_path = sub / f"scribble_{k}.png"
            if scribble_path.exists():
                arr = _read_png(scribble_path).astype(np.int64)
                if arr.shape != image.shape:
                    raise CorruptDataError(
                        f"{scribble_path}: scribble shape {arr.shape} does not match "
                        f"image shape {image.shape}"
                    )
                nc = n_classes or (labels.num_classes if labels else None)
                if nc is None:
                    known = arr[arr != UNLABELED]
                    nc = int(known.max()) + 1 if known.size else 2
                scribble = Scribble(classes=arr, num_classes=nc)
            samples.append(
                Sample(image=image, labels=labels, scribble=scribble, subject_id=sub.name, index=k)
            )
    return samples


def annulus_encloses_blob(labels: LabelMap) -> bool:
    """Check the phantom topology: flood fill from the border must reach the
    blob (class 2) only by crossing the annulus (class 1)."""
    classes = labels.classes
    h, w = classes.shape
    blocked = classes == 1
    reach = np.zeros((h, w), dtype=bool)
    stack = [(i, j) for i in (0, h - 1) for j in range(w) if not blocked[i, j]]
    stack += [(i, j) for i in range(h) for j in (0, w - 1) if not blocked[i, j]]
    for i, j in stack:
        reach[i, j] = True
    while stack:
        i, j = stack.pop()
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            ni, nj = i + di, j + dj
            if 0 <= ni < h and 0 <= nj < w and not blocked[ni, nj] and not reach[ni, nj]:
                reach[ni, nj] = True
                stack.append((ni, nj))
    # enclosed iff no blob pixel is reachable from the border without
    # crossing the annulus
    return not (reach & (classes == 2)).any()


def region_is_4connected(mask: np.ndarray) -> bool:
    """True when the binary region forms a single 4-connected component."""
    coords = np.argwhere(mask)
    if coords.size == 0:
        return False
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    stack = [tuple(coords[0])]
    seen[tuple(coords[0])] = True
    count = 1
    while stack:
        i, j = stack.pop()
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            ni, nj = i + di, j + dj
            if 0 <= ni < h and 0 <= nj < w and mask[ni, nj] and not seen[ni, nj]:
                seen[ni, nj] = True
                count += 1
                stack.append((ni, nj))
    return count == int(mask.sum())


def subject_ids(samples: list[Sample]) -> list[str]:
    return sorted({s.subject_id for s in samples})
