"""Deterministic colorized rendering of label grids with a legend."""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import LabelTaxonomy, UNLABELED


@dataclass(frozen=True)
class LegendRow:
    label_id: int
    name: str
    color: tuple[int, int, int]
    pixel_share: float


class Palette:
    """label id -> RGB, stable across runs and collision-free."""

    def __init__(self, colors: dict[int, tuple[int, int, int]]):
        seen: dict[tuple[int, int, int], int] = {}
        for label_id, rgb in colors.items():
            if rgb in seen:
                raise ValueError(
                    f"palette colors collide: labels {seen[rgb]} and {label_id}")
            seen[rgb] = label_id
        self.colors = dict(colors)

    def __getitem__(self, label_id: int) -> tuple[int, int, int]:
        return self.colors[label_id]

    def __contains__(self, label_id: int) -> bool:
        return label_id in self.colors

    def to_json(self) -> dict[str, list[int]]:
        return {str(i): list(rgb) for i, rgb in sorted(self.colors.items())}

    def save(self, path: Path | str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path: Path | str) -> "Palette":
        with open(path) as f:
            raw = json.load(f)
        return cls({int(k): tuple(int(c) for c in v) for k, v in raw.items()})


def default_color(label_id: int) -> tuple[int, int, int]:
    """Golden-ratio hue walk: far-apart hues for nearby ids."""
    hue = (label_id * 0.6180339887498949) % 1.0
    sat = (0.55, 0.8, 0.95)[label_id % 3]
    val = (0.95, 0.7, 0.55)[(label_id // 3) % 3]
    r, g, b = colorsys.hsv_to_rgb(hue, sat, val)
    return int(round(r * 255)), int(round(g * 255)), int(round(b * 255))


def default_palette(label_ids) -> Palette:
    colors: dict[int, tuple[int, int, int]] = {}
    used: set[tuple[int, int, int]] = set()
    for label_id in sorted(label_ids):
        rgb = default_color(label_id)
        while rgb in used:  # nudge deterministically on the rare collision
            rgb = ((rgb[0] + 7) % 256, (rgb[1] + 13) % 256, (rgb[2] + 29) % 256)
        used.add(rgb)
        colors[label_id] = rgb
    return Palette(colors)


def colorize(labels: np.ndarray, palette: Palette,
             taxonomy: LabelTaxonomy | None = None) -> tuple[np.ndarray, list[LegendRow]]:
    """Pixel-wise palette lookup plus a legend sorted by descending share."""
    labels = np.asarray(labels)
    present, counts = np.unique(labels, return_counts=True)
    missing = [int(v) for v in present if int(v) not in palette]
    if missing:
        raise KeyError(f"label ids missing from palette: {missing}")
    lut = np.zeros((256, 3), dtype=np.uint8)
    for label_id, rgb in palette.colors.items():
        lut[label_id] = rgb
    image = lut[labels]

    total = labels.size
    rows = []
    for v, c in zip(present, counts):
        v = int(v)
        name = taxonomy.get(v).name if taxonomy is not None else str(v)
        rows.append(LegendRow(v, name, palette[v], c / total))
    rows.sort(key=lambda r: (-r.pixel_share, r.label_id))
    return image, rows


def labels_from_color(image: np.ndarray, palette: Palette) -> np.ndarray:
    """Reverse palette lookup; exact inverse of colorize for covered ids."""
    image = np.asarray(image)
    out = np.full(image.shape[:2], UNLABELED, dtype=np.uint8)
    matched = np.zeros(image.shape[:2], dtype=bool)
    for label_id, rgb in palette.colors.items():
        hit = np.all(image == np.array(rgb, dtype=np.uint8), axis=-1)
        out[hit] = label_id
        matched |= hit
    if not matched.all():
        raise ValueError("image contains colors outside the palette")
    return out
