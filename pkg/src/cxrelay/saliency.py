"""Occlusion-sensitivity heatmaps.

A patch slides over the input; each cell scores the drop in the target
class probability when that patch is replaced with the image mean. Drops
from overlapping windows are averaged per pixel, then the map is min-max
normalized to [0, 1]. Occlusion needs no access to model internals, so any
probability function works, not just the bundled CNN.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import GrayImage, _round_u8, encode_pgm, normalize
from .nn import forward


class SaliencyError(Exception):
    pass


@dataclass(frozen=True)
class Heatmap:
    values: np.ndarray          # (h, w) float in [0, 1]
    raw: np.ndarray             # (h, w) mean probability drops, unnormalized
    degenerate: bool = False    # constant map; values forced to zero

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


def _window_starts(side: int, patch: int, stride: int) -> list[int]:
    starts = list(range(0, side - patch + 1, stride))
    if starts[-1] != side - patch:
        starts.append(side - patch)     # flush final window with the edge
    return starts


def occlusion_heatmap(model, img: GrayImage, target_class: int = 1,
                      patch: int = 16, stride: int = 8,
                      batch_size: int = 64) -> Heatmap:
    """Perturbation saliency map for ``target_class``.

    ``model`` is a ModelArtifact or any callable mapping an (n, h, w, 1)
    batch to (n, 2) probabilities. Deterministic: window order is fixed and
    accumulation does not depend on evaluation batching.
    """
    if patch < 1 or stride < 1:
        raise SaliencyError("patch and stride must be >= 1")
    if patch > img.width or patch > img.height:
        raise SaliencyError("patch larger than the image")

    predict = model if callable(model) else (lambda b: forward(model, b))
    x = normalize(img)
    h, w = x.shape[:2]
    fill = float(x.mean())
    baseline = float(predict(x[None])[0, target_class])

    ys = _window_starts(h, patch, stride)
    xs = _window_starts(w, patch, stride)
    windows = [(y, xx) for y in ys for xx in xs]

    drops = np.empty(len(windows), dtype=np.float64)
    for start in range(0, len(windows), batch_size):
        chunk = windows[start:start + batch_size]
        batch = np.repeat(x[None], len(chunk), axis=0)
        for k, (y, xx) in enumerate(chunk):
            batch[k, y:y + patch, xx:xx + patch, 0] = fill
        probs = predict(batch)
        drops[start:start + len(chunk)] = baseline - probs[:, target_class]

    total = np.zeros((h, w), dtype=np.float64)
    hits = np.zeros((h, w), dtype=np.float64)
    for (y, xx), drop in zip(windows, drops):
        total[y:y + patch, xx:xx + patch] += drop
        hits[y:y + patch, xx:xx + patch] += 1.0
    raw = total / np.maximum(hits, 1.0)

    lo, hi = raw.min(), raw.max()
    if hi - lo < 1e-12:
        return Heatmap(np.zeros_like(raw), raw, degenerate=True)
    return Heatmap((raw - lo) / (hi - lo), raw)


def heatmap_to_pgm(hm: Heatmap) -> bytes:
    return encode_pgm(GrayImage(_round_u8(hm.values * 255.0)))


def overlay_pgm(hm: Heatmap, img: GrayImage) -> bytes:
    """50/50 blend of the input and the heatmap, for side-by-side review."""
    if (hm.height, hm.width) != img.pixels.shape:
        raise SaliencyError("heatmap and image dimensions differ")
    blend = 0.5 * img.pixels.astype(np.float64) + 0.5 * hm.values * 255.0
    return encode_pgm(GrayImage(_round_u8(blend)))
