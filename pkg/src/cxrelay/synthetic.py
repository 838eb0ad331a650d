"""Desk-scale synthetic screening task.

Bright-disc images stand in for opacity-positive scans (class 1), dark
discs for clear scans (class 0). Class mean intensities are well separated,
so a trained model has no excuse: even thresholding the mean classifies
perfectly.
"""

from __future__ import annotations

import numpy as np

from .dataset import Label, ScanRecord
from .imaging import GrayImage


def make_disc_image(label: int, rng: np.random.Generator,
                    side: int = 128) -> GrayImage:
    bg = rng.normal(90.0, 6.0, size=(side, side))
    cy, cx = rng.uniform(side * 0.3, side * 0.7, size=2)
    radius = rng.uniform(side * 0.15, side * 0.3)
    level = rng.uniform(190.0, 220.0) if label == 1 else rng.uniform(10.0, 40.0)
    ys, xs = np.ogrid[:side, :side]
    mask = (ys - cy) ** 2 + (xs - cx) ** 2 <= radius ** 2
    bg[mask] = level + rng.normal(0.0, 3.0, size=int(mask.sum()))
    return GrayImage(np.clip(np.floor(bg + 0.5), 0, 255).astype(np.uint8))


def make_disc_dataset(n: int, seed: int = 0,
                      side: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Balanced (X, y) arrays; X is (n, side, side, 1) float32 in [0, 1]."""
    rng = np.random.default_rng(seed)
    x = np.empty((n, side, side, 1), dtype=np.float32)
    y = np.empty(n, dtype=np.int64)
    for i in range(n):
        label = i % 2
        img = make_disc_image(label, rng, side)
        x[i, :, :, 0] = img.pixels.astype(np.float32) / 255.0
        y[i] = label
    return x, y


def make_scan_records(n: int, seed: int = 0, side: int = 128,
                      prefix: str = "syn") -> list[ScanRecord]:
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        label = i % 2
        img = make_disc_image(label, rng, side)
        records.append(ScanRecord(id=f"{prefix}-{i:04d}", image=img,
                                  label=Label(label)))
    return records
