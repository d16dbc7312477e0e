"""Evaluation harness: tagging agreement, retrieval recall@k, canvas stats.

Reference points from the neural-encoder experiments this harness mirrors
(recall@5 caption-to-image 53.8%, recall@100 95.4% on the 8.5k-image
validation corpus) are reachable only with externally supplied embeddings;
they are recorded here for comparison, never asserted.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .compose import Canvas, LAYER_FILL, LAYER_STUFF, LAYER_THING
from .corpus import UNLABELED
from .geometry import rasterize
from .retrieval import (ClassInstance, RetrievalIndex, extract_masks,
                        hull_overlap, select_mask, top_k)

NEURAL_ENCODER_REFERENCE = {
    "recall@5_caption_to_image": 0.538,
    "recall@100_caption_to_image": 0.954,
}


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class TaggingReport:
    token_accuracy: float
    per_class: dict[int, ClassMetrics]
    macro_precision: float
    macro_recall: float
    macro_f1: float

    def to_json(self) -> dict:
        return {
            "token_accuracy": self.token_accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "per_class": {
                str(c): {"precision": m.precision, "recall": m.recall,
                         "f1": m.f1, "support": m.support}
                for c, m in sorted(self.per_class.items())
            },
        }


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def tagging_accuracy(predicted: list[int], gold: list[int]) -> TaggingReport:
    """Token accuracy plus per-class and macro precision/recall/F1."""
    if len(predicted) != len(gold):
        raise ValueError(f"length mismatch: {len(predicted)} vs {len(gold)}")
    correct = sum(p == g for p, g in zip(predicted, gold))
    classes = sorted(set(gold) | set(predicted))
    per_class = {}
    for c in classes:
        tp = sum(1 for p, g in zip(predicted, gold) if p == c and g == c)
        fp = sum(1 for p, g in zip(predicted, gold) if p == c and g != c)
        fn = sum(1 for p, g in zip(predicted, gold) if p != c and g == c)
        p, r, f = _prf(tp, fp, fn)
        per_class[c] = ClassMetrics(p, r, f, sum(1 for g in gold if g == c))
    n = len(classes)
    return TaggingReport(
        token_accuracy=correct / len(gold) if gold else 0.0,
        per_class=per_class,
        macro_precision=sum(m.precision for m in per_class.values()) / n if n else 0.0,
        macro_recall=sum(m.recall for m in per_class.values()) / n if n else 0.0,
        macro_f1=sum(m.f1 for m in per_class.values()) / n if n else 0.0,
    )


def set_detection_report(predicted_sets: list[set[int]],
                         gold_sets: list[set[int]]) -> TaggingReport:
    """Per-class detection metrics over predicted/gold class *sets*."""
    if len(predicted_sets) != len(gold_sets):
        raise ValueError("prediction/gold count mismatch")
    classes = sorted(set().union(*predicted_sets, *gold_sets)) if predicted_sets else []
    per_class = {}
    exact = 0
    for pred, gold in zip(predicted_sets, gold_sets):
        if pred == gold:
            exact += 1
    for c in classes:
        tp = sum(1 for p, g in zip(predicted_sets, gold_sets) if c in p and c in g)
        fp = sum(1 for p, g in zip(predicted_sets, gold_sets) if c in p and c not in g)
        fn = sum(1 for p, g in zip(predicted_sets, gold_sets) if c not in p and c in g)
        p, r, f = _prf(tp, fp, fn)
        per_class[c] = ClassMetrics(p, r, f, sum(1 for g in gold_sets if c in g))
    n = len(classes)
    return TaggingReport(
        token_accuracy=exact / len(gold_sets) if gold_sets else 0.0,
        per_class=per_class,
        macro_precision=sum(m.precision for m in per_class.values()) / n if n else 0.0,
        macro_recall=sum(m.recall for m in per_class.values()) / n if n else 0.0,
        macro_f1=sum(m.f1 for m in per_class.values()) / n if n else 0.0,
    )


def recall_at_k(index: RetrievalIndex, pairs: list[tuple[object, str]],
                ks: list[int]) -> dict[int, float]:
    """Fraction of queries whose gold id lands in the top k, per k."""
    if sorted(ks) != list(ks):
        raise ValueError("ks must be sorted ascending")
    known = set(index.ids)
    for _, gold in pairs:
        if gold not in known:
            raise ValueError(f"gold id not in index: {gold}")
    if not pairs:
        return {k: 0.0 for k in ks}
    max_k = min(max(ks), len(index))
    hits = Counter()
    for query, gold in pairs:
        ranked = top_k(index, query, max_k)
        for k in ks:
            if gold in ranked[:min(k, max_k)]:
                hits[k] += 1
    return {k: hits[k] / len(pairs) for k in ks}


@dataclass
class CanvasStats:
    class_histogram: dict[int, int]
    thing_share: float
    stuff_share: float
    fill_share: float
    unlabeled_share: float
    instance_count: int


def canvas_stats(canvas: Canvas, instance_count: int = 0) -> CanvasStats:
    vals, counts = np.unique(canvas.labels, return_counts=True)
    hist = {int(v): int(c) for v, c in zip(vals, counts)}
    total = canvas.labels.size
    layer = canvas.layer
    return CanvasStats(
        class_histogram=hist,
        thing_share=float((layer == LAYER_THING).sum()) / total,
        stuff_share=float((layer == LAYER_STUFF).sum()) / total,
        fill_share=float((layer == LAYER_FILL).sum()) / total,
        unlabeled_share=hist.get(UNLABELED, 0) / total,
        instance_count=instance_count,
    )


@dataclass
class KSweepRow:
    k: int
    recall: float
    mean_selected_iou: float
    selection_rate: float
    queries: int


def mask_iou_sweep(index: RetrievalIndex, corpus_by_id: dict,
                   queries: list[tuple[list[str], str, list[ClassInstance]]],
                   ks: list[int], canvas_dims: tuple[int, int],
                   min_mask_pixels: int = 16) -> list[KSweepRow]:
    """Selected-mask IOU against the instance hulls as a function of k.

    queries: (narrative words, gold example id, thing instances with hulls).
    Also reports recall@k of the gold id, mirroring the retrieval table the
    selection quality is traded against.
    """
    rows = []
    max_k = min(max(ks), len(index))
    ranked_all = [top_k(index, words, max_k) for words, _, _ in queries]
    for k in ks:
        ious: list[float] = []
        selected = 0
        total_instances = 0
        hit = 0
        for (words, gold, instances), ranked in zip(queries, ranked_all):
            kk = min(k, max_k)
            if gold in ranked[:kk]:
                hit += 1
            for inst in instances:
                total_instances += 1
                candidates = []
                for cand_id in ranked[:kk]:
                    candidates.extend(extract_masks(corpus_by_id[cand_id],
                                                    inst.class_id, min_mask_pixels))
                chosen = select_mask(inst, candidates, canvas_dims)
                if chosen is None:
                    continue
                selected += 1
                hull_raster = rasterize(inst.hull, canvas_dims[0], canvas_dims[1])
                ious.append(hull_overlap(chosen, hull_raster))
        rows.append(KSweepRow(
            k=k,
            recall=hit / len(queries) if queries else 0.0,
            mean_selected_iou=float(np.mean(ious)) if ious else 0.0,
            selection_rate=selected / total_instances if total_instances else 0.0,
            queries=len(queries),
        ))
    return rows


def format_table(headers: list[str], rows: list[list]) -> str:
    """Aligned plain-text table."""
    cells = [[str(h) for h in headers]]
    for row in rows:
        cells.append([f"{v:.4f}" if isinstance(v, float) else str(v) for v in row])
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = []
    for i, row in enumerate(cells):
        lines.append("  ".join(c.rjust(w) for c, w in zip(row, widths)))
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def write_report(data: dict, json_path: Path | str,
                 text: str | None = None, text_path: Path | str | None = None) -> None:
    with open(json_path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")
    if text is not None and text_path is not None:
        with open(text_path, "w") as f:
            f.write(text + "\n")
