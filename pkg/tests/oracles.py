"""Independent brute-force reference implementations used as test oracles.

Everything here is deliberately naive (python loops, exhaustive
enumeration) and shares no code with the package.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

UNLABELED = 255


def sorted_quantile(values, q: float) -> float:
    """Quantile by sorting with linear interpolation between order stats."""
    xs = sorted(float(v) for v in values)
    if not xs:
        raise ValueError("empty sample")
    pos = q * (len(xs) - 1)
    lo = int(math.floor(pos))
    hi = int(math.ceil(pos))
    frac = pos - lo
    return xs[lo] * (1 - frac) + xs[hi] * frac


def median_and_iqr(values) -> tuple[float, float]:
    return sorted_quantile(values, 0.5), sorted_quantile(values, 0.75) - sorted_quantile(
        values, 0.25
    )


def rasterized_disk_count(h: int, w: int, cy: float, cx: float, r: float) -> int:
    count = 0
    for i in range(h):
        for j in range(w):
            if (i - cy) ** 2 + (j - cx) ** 2 <= r * r:
                count += 1
    return count


def erode_once(mask: np.ndarray) -> np.ndarray:
    """4-neighbour binary erosion; pixels touching the border erode away."""
    h, w = mask.shape
    out = np.zeros_like(mask, dtype=bool)
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            ok = True
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ni, nj = i + di, j + dj
                if not (0 <= ni < h and 0 <= nj < w and mask[ni, nj]):
                    ok = False
                    break
            out[i, j] = ok
    return out


def erode_until_core(mask: np.ndarray) -> np.ndarray:
    """Erode until one more erosion would empty the region."""
    current = mask.astype(bool).copy()
    while True:
        smaller = erode_once(current)
        if not smaller.any():
            return current
        current = smaller


def replay_walk(region: np.ndarray, seed: int, length: int) -> set[tuple[int, int]]:
    """Re-simulate the documented constrained walk draw by draw."""
    rng = np.random.default_rng(seed)
    coords = np.argwhere(region)
    i, j = map(int, coords[rng.integers(len(coords))])
    trace = {(i, j)}
    if region.sum() < 4:
        return trace
    moves = ((1, 0), (-1, 0), (0, 1), (0, -1))
    h, w = region.shape
    for _ in range(length - 1):
        di, dj = moves[rng.integers(4)]
        ni, nj = i + di, j + dj
        if 0 <= ni < h and 0 <= nj < w and region[ni, nj]:
            i, j = ni, nj
            trace.add((i, j))
    return trace


def brute_hausdorff(a: np.ndarray, b: np.ndarray, dims=None) -> float:
    """O(n^2) Hausdorff over foreground pixels with the empty-mask rule."""
    h, w = dims if dims is not None else a.shape
    pa = [(i, j) for i in range(a.shape[0]) for j in range(a.shape[1]) if a[i, j]]
    pb = [(i, j) for i in range(b.shape[0]) for j in range(b.shape[1]) if b[i, j]]
    if not pa and not pb:
        return 0.0
    if not pa or not pb:
        return float(max(h, w))

    def directed(ps, qs):
        return max(min(math.dist(p, q) for q in qs) for p in ps)

    return max(directed(pa, pb), directed(pb, pa))


def enumerate_wilcoxon(diffs) -> float:
    """Exhaustive two-sided signed-rank p-value over all 2^n sign vectors."""
    d = np.asarray(diffs, dtype=float)
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        return 1.0
    # midranks of |d|
    order = np.argsort(np.abs(d), kind="stable")
    sorted_abs = np.abs(d)[order]
    ranks = np.empty(n)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sorted_abs[j + 1] == sorted_abs[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    observed = ranks[d > 0].sum()
    at_most = 0
    at_least = 0
    for signs in itertools.product((False, True), repeat=n):
        w = sum(r for r, s in zip(ranks, signs) if s)
        if w <= observed + 1e-12:
            at_most += 1
        if w >= observed - 1e-12:
            at_least += 1
    total = 2**n
    return min(1.0, 2.0 * min(at_most / total, at_least / total))


def pce_reference(pred: np.ndarray, scribble: np.ndarray, eps: float, reduction: str) -> float:
    """Per-pixel loop over annotated pixels: -log(p_true + eps)."""
    c, h, w = pred.shape
    terms = []
    for i in range(h):
        for j in range(w):
            cls = int(scribble[i, j])
            if 0 <= cls < c:
                terms.append(-math.log(pred[cls, i, j] + eps))
    if not terms:
        return 0.0
    value = sum(terms) / len(terms) if reduction == "mean" else sum(terms)
    return max(value, 0.0)


def block_average_target(final: np.ndarray, depth: int) -> np.ndarray:
    """Average 2^d x 2^d blocks of a (c, H, W) map and renormalise pixels."""
    c, h, w = final.shape
    f = 2**depth
    out = np.zeros((c, h // f, w // f))
    for k in range(c):
        for i in range(h // f):
            for j in range(w // f):
                out[k, i, j] = final[k, i * f : (i + 1) * f, j * f : (j + 1) * f].mean()
    sums = out.sum(axis=0, keepdims=True)
    return out / np.maximum(sums, 1e-12)


def self_consistency_reference(maps, eps: float, reduction: str) -> tuple[float, list[float]]:
    """Loop-based multi-scale consistency loss with block-average targets."""
    final = maps[0]
    per_depth = []
    for d in range(1, len(maps)):
        target = block_average_target(final, d)
        c, h, w = maps[d].shape
        terms = []
        for i in range(h):
            for j in range(w):
                ce = -sum(
                    target[k, i, j] * math.log(maps[d][k, i, j] + eps) for k in range(c)
                )
                terms.append(ce)
        value = sum(terms) / len(terms) if reduction == "mean" else sum(terms)
        per_depth.append(max(value, 0.0))
    return sum(per_depth), per_depth


def compactness_reference(pred: np.ndarray, eps: float = 1e-8) -> float:
    """Loop-based P^2/(4*pi*A) on the foreground probability 1 - background."""
    fg = 1.0 - pred[0]
    h, w = fg.shape
    perimeter = 0.0
    for i in range(h - 1):
        for j in range(w):
            perimeter += abs(fg[i + 1, j] - fg[i, j])
    for i in range(h):
        for j in range(w - 1):
            perimeter += abs(fg[i, j + 1] - fg[i, j])
    area = fg.sum() + eps
    return perimeter**2 / (4.0 * math.pi * area)


def random_simplex_maps(rng, depth: int, c: int, h: int, w: int) -> list[np.ndarray]:
    """A synthetic prediction pyramid: softmax of gaussian logits per depth."""
    maps = []
    for d in range(depth):
        logits = rng.normal(size=(c, h // 2**d, w // 2**d))
        e = np.exp(logits - logits.max(axis=0, keepdims=True))
        maps.append(e / e.sum(axis=0, keepdims=True))
    return maps
