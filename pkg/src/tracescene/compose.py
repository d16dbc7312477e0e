"""Canvas composition: tagged narrative + traces + retrieved masks to a
complete segmentation grid.

The background layer comes from a single retrieved example (stuff pixels
only); remaining holes take the label of the nearest stuff pixel; thing
masks are centered on their trace hulls and painted in reverse narrative
order so earlier mentions stay on top.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .corpus import (Corpus, Example, LabelTaxonomy, TimedWord, TracePoint,
                     UNLABELED, segment_phrases)
from .geometry import BinaryMask, centroid, convex_hull, iou, rasterize
from .retrieval import (ClassInstance, MaskInstance, RetrievalIndex,
                        extract_masks, resample_mask, select_mask, top_k)
from .tagger import HmmModel, viterbi

log = logging.getLogger(__name__)

LAYER_STUFF = 0
LAYER_FILL = 1
LAYER_THING = 2
LAYER_NAMES = {LAYER_STUFF: "stuff", LAYER_FILL: "fill", LAYER_THING: "thing"}

_MAX_FILL_DIM = 4096  # keeps the composite distance key exact in float64


@dataclass
class ComposeConfig:
    canvas_width: int = 256
    canvas_height: int = 256
    k: int = 5
    gap_ms: int = 300
    min_mask_pixels: int = 16
    fallback_label: int | None = None

    def resolve_fallback(self, taxonomy: LabelTaxonomy) -> int:
        if self.fallback_label is not None:
            return self.fallback_label
        stuffs = taxonomy.stuffs()
        if not stuffs:
            raise ValueError("taxonomy has no usable stuff class for fill fallback")
        for label in stuffs:  # prefer a sky-like backdrop when the taxonomy has one
            if label.name == "sky":
                return label.id
        return stuffs[0].id

    def to_json(self) -> dict:
        return {
            "canvas_width": self.canvas_width,
            "canvas_height": self.canvas_height,
            "k": self.k,
            "gap_ms": self.gap_ms,
            "min_mask_pixels": self.min_mask_pixels,
            "fallback_label": self.fallback_label,
        }


@dataclass
class Canvas:
    width: int
    height: int
    labels: np.ndarray = field(repr=False)      # (H, W) uint8 label ids
    layer: np.ndarray = field(repr=False)       # (H, W) uint8 LAYER_* codes
    source_idx: np.ndarray = field(repr=False)  # (H, W) int32 into sources
    sources: list[str] = field(default_factory=list)

    def source_at(self, row: int, col: int) -> str:
        return self.sources[int(self.source_idx[row, col])]


@dataclass
class Placement:
    instance: ClassInstance
    mask_source: str | None  # None when no candidate mask was found


@dataclass
class ComposeResult:
    canvas: Canvas
    tags: list[int]
    instances: list[Placement]
    background_source: str
    config: ComposeConfig
    warnings: list[str] = field(default_factory=list)


def extract_instances(words: list[str], tags: list[int], segments,
                      trace: list[TracePoint],
                      taxonomy: LabelTaxonomy) -> tuple[list[ClassInstance], list[str]]:
    """Maximal runs of identical non-excluded tags become class instances.

    Each instance's hull covers all trace points of the phrase segments that
    overlap its token span; runs with no trace support are dropped with a
    warning. Returns (instances, warnings).
    """
    if len(words) != len(tags):
        raise ValueError("words and tags differ in length")
    excluded = taxonomy.excluded_ids
    runs: list[tuple[int, int, int]] = []  # (start, end, class_id)
    for i, tag in enumerate(tags):
        if runs and runs[-1][2] == tag and runs[-1][1] == i - 1:
            runs[-1] = (runs[-1][0], i, tag)
        else:
            runs.append((i, i, tag))

    instances: list[ClassInstance] = []
    warnings: list[str] = []
    for start, end, tag in runs:
        if tag in excluded:
            continue
        pts = []
        for seg in segments:
            if seg.word_start <= end and seg.word_end >= start:
                pts.extend((p.x, p.y) for p in trace[seg.trace_start:seg.trace_end])
        if not pts:
            warnings.append(
                f"instance '{taxonomy.get(tag).name}' at words [{start},{end}] "
                f"has no trace points; dropped")
            continue
        instances.append(ClassInstance(
            class_id=tag,
            token_span=(start, end),
            hull=convex_hull(pts),
            kind=taxonomy.get(tag).kind,
        ))
    return instances, warnings


def _class_mask_on_canvas(example: Example, class_id: int,
                          width: int, height: int) -> BinaryMask:
    src = BinaryMask(example.width, example.height,
                     example.label_map == class_id, class_id, example.id)
    return resample_mask(src, width, height)


def choose_background(stuff_instances: list[ClassInstance],
                      candidate_ids: list[str], corpus: Corpus,
                      canvas_dims: tuple[int, int]) -> str:
    """Candidate whose label map best matches the stuff hulls (mean IOU).

    Instances whose class is absent from a candidate contribute 0; ties keep
    the earlier retrieval rank; with no stuff instances the top candidate wins.
    """
    if not candidate_ids:
        raise ValueError("no background candidates")
    if not stuff_instances:
        return candidate_ids[0]
    width, height = canvas_dims
    by_id = corpus.by_id()
    hulls = [rasterize(inst.hull, width, height) for inst in stuff_instances]
    best_id, best_mean = candidate_ids[0], -1.0
    for cand_id in candidate_ids:
        ex = by_id[cand_id]
        total = 0.0
        for inst, hull_raster in zip(stuff_instances, hulls):
            if inst.class_id not in ex.present_labels():
                continue
            total += iou(_class_mask_on_canvas(ex, inst.class_id, width, height),
                         hull_raster)
        mean = total / len(stuff_instances)
        if mean > best_mean:
            best_id, best_mean = cand_id, mean
    return best_id


def build_background(source, taxonomy: LabelTaxonomy) -> np.ndarray:
    """Keep only non-excluded stuff pixels; things, excluded classes, and
    unlabeled pixels become holes (UNLABELED)."""
    grid = source.label_map if isinstance(source, Example) else np.asarray(source)
    out = np.full(grid.shape, UNLABELED, dtype=np.uint8)
    for label in taxonomy.stuffs():
        keep = grid == label.id
        out[keep] = label.id
    return out


def nearest_fill(grid: np.ndarray, fallback_label: int | None = None) -> np.ndarray:
    """Fill every hole with the label of the nearest labeled pixel.

    Distance is Euclidean between pixel centers; ties go to the source pixel
    with smaller row, then smaller column. Runs in O(H*W) via a two-pass
    lower-envelope distance transform over a composite key that encodes
    (squared distance, source row, source col) as one exact float64 integer.
    """
    grid = np.asarray(grid)
    h, w = grid.shape
    if max(h, w) > _MAX_FILL_DIM:
        raise ValueError(f"grid too large for exact fill (> {_MAX_FILL_DIM})")
    sites = grid != UNLABELED
    if not sites.any():
        if fallback_label is None:
            raise ValueError("grid has no labeled pixel and no fallback label")
        return np.full_like(grid, fallback_label)
    holes = ~sites
    if not holes.any():
        return grid.copy()

    n = float(max(h, w))
    m = n * n  # weight that strictly dominates the (row, col) tie-break key
    rows = np.arange(h, dtype=float)[:, None]

    # Pass 1, per column: nearest site row (ties take the smaller row).
    row_idx = np.where(sites, np.arange(h)[:, None], -1)
    up = np.maximum.accumulate(row_idx, axis=0).astype(float)
    down_raw = np.where(sites, np.arange(h)[:, None], 2 * h)
    down = np.flip(np.minimum.accumulate(np.flip(down_raw, 0), axis=0), 0).astype(float)
    big = float(2 * h * h + 2)
    d_up = np.where(up >= 0, rows - up, big)
    d_down = np.where(down < h, down - rows, big)
    src_row = np.where(d_up <= d_down, up, down)
    col_valid = sites.any(axis=0)
    cols_f = np.arange(w, dtype=float)[None, :]
    g = m * (rows - src_row) ** 2 + src_row * n + cols_f  # composite key, inf-free

    # Pass 2, per row with holes: lower envelope of parabolas over columns.
    out = grid.copy()
    valid_cols = np.nonzero(col_valid)[0]
    hole_rows = np.nonzero(holes.any(axis=1))[0]
    inf = float("inf")
    for r in hole_rows:
        grow = g[r]
        v = np.empty(len(valid_cols), dtype=np.int64)   # envelope parabola cols
        z = np.empty(len(valid_cols) + 1, dtype=float)  # envelope boundaries
        k = 0
        v[0] = valid_cols[0]
        z[0], z[1] = -inf, inf
        for q in valid_cols[1:]:
            fq = grow[q] + m * q * q
            while True:
                p = v[k]
                s = (fq - (grow[p] + m * p * p)) / (2.0 * m * (q - p))
                if s <= z[k]:
                    k -= 1
                else:
                    break
            k += 1
            v[k] = q
            z[k] = s
            z[k + 1] = inf
        hole_cols = np.nonzero(holes[r])[0]
        seg = np.searchsorted(z[1:k + 1], hole_cols.astype(float), side="left")
        src_cols = v[seg]
        src_rows = src_row[r, src_cols].astype(int)
        out[r, hole_cols] = grid[src_rows, src_cols]
    return out


def _background_canvas(filled: np.ndarray, hole_mask: np.ndarray,
                       background_id: str, width: int, height: int) -> Canvas:
    layer = np.where(hole_mask, LAYER_FILL, LAYER_STUFF).astype(np.uint8)
    return Canvas(
        width=width, height=height,
        labels=filled.astype(np.uint8),
        layer=layer,
        source_idx=np.zeros((height, width), dtype=np.int32),
        sources=[background_id],
    )


def place_things(background: Canvas,
                 placements: list[tuple[ClassInstance, MaskInstance]]) -> Canvas:
    """Paint selected thing masks, centered on their hulls, in reverse
    narrative order so earlier-mentioned instances end up on top.

    Translation is integer pixels, clamped to keep the mask fully on-canvas
    when it fits, clipped otherwise.
    """
    w, h = background.width, background.height
    canvas = Canvas(
        width=w, height=h,
        labels=background.labels.copy(),
        layer=background.layer.copy(),
        source_idx=background.source_idx.copy(),
        sources=list(background.sources),
    )
    for instance, mask_inst in reversed(placements):
        resampled = resample_mask(mask_inst.mask, w, h)
        if resampled.count == 0:
            log.warning("mask from %s vanished at canvas resolution; skipped",
                        mask_inst.source_id)
            continue
        hull_raster = rasterize(instance.hull, w, h)
        if hull_raster.count > 0:
            hx, hy = centroid(hull_raster)
        else:
            verts = np.asarray(instance.hull.vertices)
            hx, hy = float(verts[:, 0].mean()), float(verts[:, 1].mean())
        mx, my = centroid(resampled)
        dx = round((hx - mx) * w)
        dy = round((hy - my) * h)

        rr, cc = np.nonzero(resampled.bits)
        r0, r1, c0, c1 = rr.min(), rr.max(), cc.min(), cc.max()
        if r1 - r0 < h:
            dy = min(max(dy, -int(r0)), h - 1 - int(r1))
        if c1 - c0 < w:
            dx = min(max(dx, -int(c0)), w - 1 - int(c1))
        nr, nc = rr + dy, cc + dx
        keep = (nr >= 0) & (nr < h) & (nc >= 0) & (nc < w)
        nr, nc = nr[keep], nc[keep]
        if nr.size == 0:
            log.warning("mask from %s fell entirely off-canvas; skipped",
                        mask_inst.source_id)
            continue
        if mask_inst.source_id in canvas.sources:
            sidx = canvas.sources.index(mask_inst.source_id)
        else:
            canvas.sources.append(mask_inst.source_id)
            sidx = len(canvas.sources) - 1
        canvas.labels[nr, nc] = instance.class_id
        canvas.layer[nr, nc] = LAYER_THING
        canvas.source_idx[nr, nc] = sidx
    return canvas


def compose(narrative: list[TimedWord], trace: list[TracePoint],
            corpus: Corpus, hmm: HmmModel, index: RetrievalIndex,
            config: ComposeConfig | None = None,
            query_vector: np.ndarray | None = None) -> ComposeResult:
    """Full pipeline: segment, tag, detect instances, retrieve, compose."""
    config = config or ComposeConfig()
    taxonomy = corpus.taxonomy
    if not narrative:
        raise ValueError("empty narrative")
    w, h = config.canvas_width, config.canvas_height
    warnings: list[str] = []

    probe = Example(id="query", width=w, height=h,
                    narrative=list(narrative), trace=list(trace))
    segments = segment_phrases(probe, config.gap_ms)
    words = [t.text for t in narrative]
    tags = viterbi(hmm, words)
    instances, inst_warnings = extract_instances(words, tags, segments, trace, taxonomy)
    warnings.extend(inst_warnings)
    if not instances and not trace:
        warnings.append("no trace points: composing a background-only canvas")

    query = query_vector if query_vector is not None else words
    ranked = top_k(index, query, config.k)
    by_id = corpus.by_id()

    stuff_instances = [i for i in instances if i.kind == "stuff"]
    thing_instances = [i for i in instances if i.kind == "thing"]

    background_id = choose_background(stuff_instances, ranked, corpus, (w, h))
    bg_example = by_id[background_id]
    rows = np.minimum((np.floor((np.arange(h) + 0.5) / h * bg_example.height))
                      .astype(int), bg_example.height - 1)
    cols = np.minimum((np.floor((np.arange(w) + 0.5) / w * bg_example.width))
                      .astype(int), bg_example.width - 1)
    bg_grid = bg_example.label_map[np.ix_(rows, cols)]
    partial = build_background(bg_grid, taxonomy)
    holes = partial == UNLABELED
    filled = nearest_fill(partial, config.resolve_fallback(taxonomy))
    background = _background_canvas(filled, holes, background_id, w, h)

    placements: list[tuple[ClassInstance, MaskInstance]] = []
    placement_records: list[Placement] = []
    for inst in instances:
        if inst.kind != "thing":
            placement_records.append(Placement(inst, None))
            continue
        candidates = []
        for cand_id in ranked:
            candidates.extend(extract_masks(by_id[cand_id], inst.class_id,
                                            config.min_mask_pixels))
        chosen = select_mask(inst, candidates, (w, h))
        if chosen is None:
            warnings.append(
                f"no candidate mask for '{taxonomy.get(inst.class_id).name}' "
                f"in top-{config.k}; instance skipped")
            placement_records.append(Placement(inst, None))
            continue
        placements.append((inst, chosen))
        placement_records.append(Placement(inst, chosen.source_id))

    canvas = place_things(background, placements)
    return ComposeResult(
        canvas=canvas,
        tags=tags,
        instances=placement_records,
        background_source=background_id,
        config=config,
        warnings=warnings,
    )


def _rle_encode(canvas: Canvas) -> list[list[int]]:
    """Row-major runs of identical (layer, source) pairs: [length, layer, source]."""
    flat = (canvas.layer.astype(np.int64) * (len(canvas.sources) + 1)
            + canvas.source_idx.astype(np.int64)).ravel()
    runs: list[list[int]] = []
    change = np.nonzero(np.diff(flat))[0] + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change, [flat.size]))
    for a, b in zip(starts, ends):
        code = int(flat[a])
        layer, src = divmod(code, len(canvas.sources) + 1)
        runs.append([int(b - a), layer, src])
    return runs


def write_canvas(result: ComposeResult, out_dir: Path | str, palette,
                 taxonomy: LabelTaxonomy) -> Path:
    """Write labels.png, color.png, provenance.json, and meta.json.

    Output bytes are a pure function of the compose result, so identical
    inputs produce identical files.
    """
    from .render import colorize

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    canvas = result.canvas

    Image.fromarray(canvas.labels, mode="L").save(out_dir / "labels.png")
    color, legend = colorize(canvas.labels, palette, taxonomy)
    Image.fromarray(color, mode="RGB").save(out_dir / "color.png")

    provenance = {
        "format": "provenance-v1",
        "width": canvas.width,
        "height": canvas.height,
        "layers": {str(k): v for k, v in LAYER_NAMES.items()},
        "sources": canvas.sources,
        "runs": _rle_encode(canvas),
    }
    with open(out_dir / "provenance.json", "w") as f:
        json.dump(provenance, f, sort_keys=True)
        f.write("\n")

    meta = {
        "format": "canvas-meta-v1",
        "config": result.config.to_json(),
        "background_source": result.background_source,
        "classes": sorted({taxonomy.get(int(v)).name for v in np.unique(canvas.labels)}),
        "legend": [
            {"id": row.label_id, "name": row.name, "color": list(row.color),
             "share": round(row.pixel_share, 6)}
            for row in legend
        ],
        "instances": [
            {
                "span": list(p.instance.token_span),
                "class_id": p.instance.class_id,
                "class": taxonomy.get(p.instance.class_id).name,
                "kind": p.instance.kind,
                "mask_source": p.mask_source,
            }
            for p in result.instances
        ],
        "tags": [taxonomy.get(t).name for t in result.tags],
        "warnings": result.warnings,
    }
    with open(out_dir / "meta.json", "w") as f:
        json.dump(meta, f, sort_keys=True)
        f.write("\n")
    return out_dir
