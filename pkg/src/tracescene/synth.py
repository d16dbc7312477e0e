"""Synthetic scene/narrative generator used by tests and experiments.

Scenes are procedural label maps (stuff bands plus elliptical things),
narratives are templated phrases naming each drawn item, and traces are
sampled inside the referenced region during the phrase's time window with
realistic pauses between phrases. The generator doubles as the ground
truth oracle: it records the mentioned classes and a per-word class plant.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import (Corpus, Example, Label, LabelTaxonomy, TimedWord,
                     TracePoint, save_corpus)

STUFF_POOL = ["snow", "grass", "water", "sand", "road"]
GROUND_POOL = ["snow", "grass", "water", "sand"]  # road stays rare on purpose
THING_POOL = ["person", "dog", "skis", "boat", "car", "bird", "sheep", "kite"]

SYNONYMS = {
    "snow": ["snow"],
    "grass": ["grass", "lawn"],
    "sky": ["sky"],
    "water": ["water", "lake"],
    "sand": ["sand", "beach"],
    "road": ["road", "street"],
    "person": ["person", "man", "woman"],
    "dog": ["dog", "puppy"],
    "skis": ["ski", "skis"],
    "boat": ["boat", "ship"],
    "car": ["car", "truck"],
    "bird": ["bird", "crow"],
    "sheep": ["sheep", "lamb"],
    "kite": ["kite"],
}

THING_TEMPLATES = ["a {w}", "a {w} here", "see the {w}", "there is a {w}"]
STUFF_TEMPLATES = ["on the {w}", "the {w}", "near the {w}", "the {w} behind"]
OPENERS = ["in this image", "this picture shows", "we can see"]


def synthetic_taxonomy() -> LabelTaxonomy:
    entries = [Label(0, "other", "stuff", excluded=True)]
    next_id = 1
    for name in STUFF_POOL:
        entries.append(Label(next_id, name, "stuff"))
        next_id += 1
    entries.append(Label(next_id, "sky", "stuff"))
    next_id += 1
    for name in THING_POOL:
        entries.append(Label(next_id, name, "thing"))
        next_id += 1
    entries.append(Label(next_id, "background", "stuff", excluded=True))
    return LabelTaxonomy(tuple(entries))


@dataclass
class SynthConfig:
    n: int = 100
    seed: int = 0
    width: int = 96
    height: int = 96
    max_things: int = 2
    opener_prob: float = 0.5
    synonym_prob: float = 0.25
    other_patch_prob: float = 0.1
    ski_bias: float = 0.3  # chance a snow scene includes person + skis
    sky_prob: float = 0.25
    trace_noise: float = 0.5   # chance a word's pointer drifts to another region
    pause_prob: float = 0.9    # chance of a segment-splitting pause between words
    theme: str = "mixed"       # "mixed" | "ski" (ski-dominated scene pool)
    pure_lexicon: bool = False  # content-word-only phrases (tagging oracle)


@dataclass
class GroundTruth:
    example_id: str
    classes: list[int]       # mentioned classes in narrative order
    word_classes: list[int]  # planted class per word


@dataclass
class _Region:
    class_name: str
    kind: str
    # geometry in normalized coords
    y0: float = 0.0
    y1: float = 1.0
    cx: float = 0.0
    cy: float = 0.0
    rx: float = 0.0
    ry: float = 0.0

    def sample_point(self, rng: random.Random) -> tuple[float, float]:
        if self.kind == "band":
            margin = 0.06 * (self.y1 - self.y0)
            return (rng.uniform(0.05, 0.95),
                    rng.uniform(self.y0 + margin, self.y1 - margin))
        while True:
            x = rng.uniform(self.cx - self.rx, self.cx + self.rx)
            y = rng.uniform(self.cy - self.ry, self.cy + self.ry)
            if ((x - self.cx) / self.rx) ** 2 + ((y - self.cy) / self.ry) ** 2 <= 0.8:
                return min(1.0, max(0.0, x)), min(1.0, max(0.0, y))


def _paint_scene(rng: random.Random, cfg: SynthConfig,
                 taxonomy: LabelTaxonomy) -> tuple[np.ndarray, list[_Region]]:
    w, h = cfg.width, cfg.height
    by_name = {e.name: e for e in taxonomy}
    grid = np.zeros((h, w), dtype=np.uint8)

    if cfg.theme == "ski":
        ground = rng.choices(["snow", "grass", "water"], [0.8, 0.1, 0.1])[0]
    else:
        ground = rng.choice(GROUND_POOL)
    # kept near the things' rate so no class dominates the label bags
    has_sky = rng.random() < cfg.sky_prob
    horizon = rng.uniform(0.25, 0.45) if has_sky else 0.0
    hrow = int(horizon * h)
    grid[:, :] = by_name[ground].id
    regions = []
    if has_sky:
        grid[:hrow, :] = by_name["sky"].id
        regions.append(_Region("sky", "band", y0=0.0, y1=horizon))
    regions.append(_Region(ground, "band", y0=horizon, y1=1.0))

    if ground == "snow" and rng.random() < cfg.ski_bias:
        thing_names = ["person", "skis"]
        extras = [t for t in THING_POOL if t not in thing_names]
        thing_names = thing_names + rng.sample(extras, max(0, cfg.max_things - 2))
    else:
        thing_names = rng.sample(THING_POOL, cfg.max_things)

    yy, xx = np.mgrid[0:h, 0:w]
    placed: list[_Region] = []
    for name in thing_names:
        for _ in range(12):
            rx = rng.uniform(0.09, 0.16)
            ry = rng.uniform(0.09, 0.16)
            cx = rng.uniform(rx + 0.02, 1.0 - rx - 0.02)
            cy = rng.uniform(max(horizon + ry, ry + 0.02), 1.0 - ry - 0.02)
            if any(abs(cx - p.cx) < rx + p.rx and abs(cy - p.cy) < ry + p.ry
                   for p in placed):
                continue
            region = _Region(name, "ellipse", cx=cx, cy=cy, rx=rx, ry=ry)
            ex = (xx + 0.5) / w
            ey = (yy + 0.5) / h
            inside = ((ex - cx) / rx) ** 2 + ((ey - cy) / ry) ** 2 <= 1.0
            grid[inside] = by_name[name].id
            placed.append(region)
            break
    regions.extend(placed)

    # every image carries unalignable-word absorbers, like real panoptic maps:
    # a thin `background` frame at the borders and a couple of `other` patches
    frame = max(1, h // 32)
    grid[:frame, :] = by_name["background"].id
    grid[-frame:, :] = by_name["background"].id
    grid[:, :frame] = by_name["background"].id
    grid[:, -frame:] = by_name["background"].id
    for _ in range(rng.randint(1, 2)):
        pw, ph = max(3, w // 12), max(3, h // 12)
        r0 = rng.randint(hrow, max(hrow, h - ph - 1))
        c0 = rng.randint(0, w - pw - 1)
        grid[r0:r0 + ph, c0:c0 + pw] = by_name["other"].id
    return grid, regions


def _drift_target(region: _Region, regions: list[_Region],
                  rng: random.Random) -> _Region:
    """Where a wandering pointer parks next: mostly another salient item,
    sometimes the surrounding band, so no single region hoards the drift."""
    things = [r for r in regions if r.kind == "ellipse" and r is not region]
    bands = [r for r in regions if r.kind == "band" and r is not region]
    if things and (not bands or rng.random() < 0.6):
        return rng.choice(things)
    if bands:
        return rng.choice(bands)
    others = [r for r in regions if r is not region]
    return rng.choice(others) if others else region


def _phrase_words(rng: random.Random, cfg: SynthConfig, region: _Region) -> list[str]:
    words = SYNONYMS[region.class_name]
    w = words[0] if rng.random() >= cfg.synonym_prob else rng.choice(words)
    if cfg.pure_lexicon:
        return [w]
    pool = THING_TEMPLATES if region.kind == "ellipse" else STUFF_TEMPLATES
    return rng.choice(pool).format(w=w).split()


def _content_class(region: _Region, taxonomy: LabelTaxonomy) -> int:
    return taxonomy.by_name(region.class_name).id


def generate_example(rng: random.Random, cfg: SynthConfig,
                     taxonomy: LabelTaxonomy, ex_id: str) -> tuple[Example, GroundTruth]:
    grid, regions = _paint_scene(rng, cfg, taxonomy)

    things = [r for r in regions if r.kind == "ellipse"]
    stuffs = [r for r in regions if r.kind == "band"]
    rng.shuffle(things)
    mention: list[_Region] = list(things)
    # ground before sky (salience), skipping sky occasionally
    stuffs_sorted = sorted(stuffs, key=lambda r: r.class_name == "sky")
    for s in stuffs_sorted:
        if s.class_name == "sky" and rng.random() < 0.2:
            continue
        mention.append(s)
    if rng.random() < 0.6:  # annotators interleave items as often as not
        rng.shuffle(mention)

    narrative: list[TimedWord] = []
    trace: list[TracePoint] = []
    classes: list[int] = []
    word_classes: list[int] = []
    t = 0
    for pi, region in enumerate(mention):
        words = _phrase_words(rng, cfg, region)
        if pi == 0 and not cfg.pure_lexicon and rng.random() < cfg.opener_prob:
            words = rng.choice(OPENERS).split() + words
        cls = _content_class(region, taxonomy)
        classes.append(cls)
        # The pointer parks on one item per burst between lifts; each burst
        # usually covers the described region but sometimes a neighbor
        # (annotator noise), so burst hulls stay pure while noisy labels flip.
        target = region
        fresh_burst = True
        for word in words:
            if fresh_burst:
                target = region
                if len(regions) > 1 and rng.random() < cfg.trace_noise:
                    target = _drift_target(region, regions, rng)
                fresh_burst = False
            dur = rng.randint(240, 360)
            narrative.append(TimedWord(word, t, t + dur))
            word_classes.append(cls)
            pt = t
            while pt < t + dur:
                x, y = target.sample_point(rng)
                trace.append(TracePoint(round(x, 5), round(y, 5), pt))
                pt += rng.randint(45, 70)
            t += dur
            if rng.random() < cfg.pause_prob:
                t += rng.randint(350, 600)  # pointer lift mid-sentence
                fresh_burst = True
            else:
                t += rng.randint(20, 120)
        t += rng.randint(600, 900)

    example = Example(ex_id, cfg.width, cfg.height, narrative, trace, grid,
                      f"maps/{ex_id}.png")
    return example, GroundTruth(ex_id, classes, word_classes)


def generate_corpus(cfg: SynthConfig) -> tuple[Corpus, list[GroundTruth]]:
    rng = random.Random(cfg.seed)
    taxonomy = synthetic_taxonomy()
    examples, truths = [], []
    for i in range(cfg.n):
        ex, gt = generate_example(rng, cfg, taxonomy, f"synth-{i:05d}")
        examples.append(ex)
        truths.append(gt)
    return Corpus(taxonomy, examples), truths


def write_synthetic(cfg: SynthConfig, out_dir: Path | str) -> Path:
    """Corpus directory (manifest/taxonomy/maps) plus ground-truth JSONL."""
    corpus, truths = generate_corpus(cfg)
    out_dir = Path(out_dir)
    manifest = save_corpus(corpus, out_dir)
    names = {e.id: e.name for e in corpus.taxonomy}
    with open(out_dir / "ground_truth.jsonl", "w") as f:
        for gt in truths:
            rec = {
                "id": gt.example_id,
                "classes": [names[c] for c in gt.classes],
                "word_classes": [names[c] for c in gt.word_classes],
            }
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest


def load_ground_truth(path: Path | str, taxonomy: LabelTaxonomy) -> list[GroundTruth]:
    ids = {e.name: e.id for e in taxonomy}
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out.append(GroundTruth(
                str(rec["id"]),
                [ids[n] for n in rec["classes"]],
                [ids[n] for n in rec["word_classes"]],
            ))
    return out


def make_ski_example(taxonomy: LabelTaxonomy, ex_id: str = "ski-probe",
                     width: int = 96, height: int = 96) -> Example:
    """Deterministic ski scene with the narrative pattern from the tag
    listings: person and skis on an all-snow ground, traced in time with
    the words that mention them."""
    by_name = {e.name: e for e in taxonomy}
    grid = np.full((height, width), by_name["snow"].id, dtype=np.uint8)
    yy, xx = np.mgrid[0:height, 0:width]
    ex_ = (xx + 0.5) / width
    ey = (yy + 0.5) / height
    person = ((ex_ - 0.35) / 0.12) ** 2 + ((ey - 0.45) / 0.18) ** 2 <= 1.0
    skis = ((ex_ - 0.38) / 0.14) ** 2 + ((ey - 0.72) / 0.05) ** 2 <= 1.0
    grid[person] = by_name["person"].id
    grid[skis] = by_name["skis"].id

    text = "this picture shows a person skiing on the snow and he wore a ski"
    spans = {
        # word index range -> (center x, center y, jitter) of the traced region
        (0, 4): (0.35, 0.45, 0.08),   # "this picture shows a person"
        (5, 8): (0.75, 0.55, 0.15),   # "skiing on the snow"
        (9, 13): (0.38, 0.72, 0.04),  # "and he wore a ski"
    }
    words = text.split()
    narrative = []
    trace = []
    t = 0
    rng = random.Random(17)
    for (a, b), (cx, cy, jit) in sorted(spans.items()):
        start = t
        for i in range(a, b + 1):
            narrative.append(TimedWord(words[i], t, t + 300))
            t += 320
        end = t
        pt = start
        while pt < end:
            x = min(1.0, max(0.0, cx + rng.uniform(-jit, jit)))
            y = min(1.0, max(0.0, cy + rng.uniform(-jit, jit)))
            trace.append(TracePoint(round(x, 5), round(y, 5), pt))
            pt += 55
        t = end + 700
    return Example(ex_id, width, height, narrative, trace, grid, None)
