"""Synthetic scribble emulation from dense label maps.

Foreground classes are thinned to skeletons (or eroded to a core); the
background gets a seeded random walk constrained to stay inside its
region. Everything else becomes UNLABELED.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.morphology import skeletonize

from .datakit import UNLABELED, LabelMap, Scribble

FG_MODES = ("skeleton", "iterated_erosion")


@dataclass
class ScribbleConfig:
    fg_mode: str = "skeleton"
    max_thickness: int = 2
    bg_walk_length: int | None = None  # default 5% of the pixel count
    seed: int = 0

    def validate(self) -> "ScribbleConfig":
        if self.fg_mode not in FG_MODES:
            raise ValueError(f"fg_mode must be one of {FG_MODES}, got {self.fg_mode!r}")
        if self.max_thickness < 1:
            raise ValueError("max_thickness must be >= 1")
        if self.bg_walk_length is not None and self.bg_walk_length < 1:
            raise ValueError("bg_walk_length must be >= 1")
        return self

    def walk_length_for(self, shape) -> int:
        if self.bg_walk_length is not None:
            return self.bg_walk_length
        return max(1, int(0.05 * shape[0] * shape[1]))


def foreground_scribble(region: np.ndarray, config: ScribbleConfig) -> np.ndarray:
    """Reduce a binary region to a thin scribble inside it.

    skeleton mode thins to a medial-axis approximation (optionally thickened
    up to max_thickness, clipped to the region); iterated_erosion erodes
    until one more erosion would empty the region. An empty region yields an
    empty scribble.
    """
    config.validate()
    region = np.asarray(region, dtype=bool)
    if not region.any():
        return np.zeros_like(region)
    if region.sum() == 1:
        return region.copy()

    if config.fg_mode == "skeleton":
        out = skeletonize(region)
        grow = (config.max_thickness - 1) // 2
        if grow > 0:
            out = ndimage.binary_dilation(out, iterations=grow)
        out &= region
    else:
        out = region.copy()
        while True:
            smaller = ndimage.binary_erosion(out)
            if not smaller.any():
                break
            out = smaller
    if not out.any():
        # thinning degenerated (can happen on 1-pixel-wide shapes); fall
        # back to any single region pixel
        out = np.zeros_like(region)
        out[tuple(np.argwhere(region)[0])] = True
    return out


def background_scribble(region: np.ndarray, config: ScribbleConfig) -> np.ndarray:
    """Trace of a seeded 4-neighbour random walk constrained to the region.

    Moves that would leave the region (or the image) are rejected and the
    walker stays put for that step. The trace covers at most
    bg_walk_length pixels. Deterministic given the seed.
    """
    config.validate()
    region = np.asarray(region, dtype=bool)
    if not region.any():
        raise ValueError("background region is empty")
    rng = np.random.default_rng(config.seed)
    coords = np.argwhere(region)
    start = tuple(coords[rng.integers(len(coords))])

    out = np.zeros_like(region)
    out[start] = True
    if region.sum() < 4:
        return out

    steps = config.walk_length_for(region.shape)
    moves = ((1, 0), (-1, 0), (0, 1), (0, -1))
    h, w = region.shape
    i, j = start
    # the start pixel consumes the first step, so the trace never exceeds
    # the configured length
    for _ in range(steps - 1):
        di, dj = moves[rng.integers(4)]
        ni, nj = i + di, j + dj
        if 0 <= ni < h and 0 <= nj < w and region[ni, nj]:
            i, j = ni, nj
            out[i, j] = True
    return out


def synthesize_scribbles(labels: LabelMap, config: ScribbleConfig) -> Scribble:
    """Emulate a scribble annotation for every class present in the label map."""
    labels.validate()
    config.validate()
    classes = labels.classes
    out = np.full_like(classes, UNLABELED)
    for cls in range(labels.num_classes):
        region = classes == cls
        if not region.any():
            continue
        if cls == 0:
            trace = background_scribble(region, config)
        else:
            trace = foreground_scribble(region, config)
        out[trace] = cls
    return Scribble(classes=out, num_classes=labels.num_classes)


def labeled_fraction(scribble: Scribble) -> float:
    """Fraction of pixels carrying an annotation."""
    return float(scribble.labeled_mask.mean())
