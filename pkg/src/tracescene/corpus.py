"""Corpus ingestion and phrase segmentation.

A corpus is a JSON-lines manifest of examples (narrative words with
millisecond timestamps, a pointer trace, and a label-map PNG) plus a
taxonomy JSON describing the label set. Label maps are 8-bit single
channel PNGs whose pixel value is the label id; 255 marks unlabeled.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

UNLABELED = 255

_TERMINAL_PUNCT = re.compile(r"[.,;:!?]+$")


@dataclass(frozen=True)
class Label:
    id: int
    name: str
    kind: str  # "thing" | "stuff"
    excluded: bool = False


@dataclass(frozen=True)
class LabelTaxonomy:
    entries: tuple[Label, ...]

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if sorted(ids) != list(range(len(ids))):
            raise ValueError("label ids must be unique and dense from 0")
        for e in self.entries:
            if e.kind not in ("thing", "stuff"):
                raise ValueError(f"label {e.name}: kind must be thing or stuff")
            if e.id == UNLABELED:
                raise ValueError(f"label id {UNLABELED} is reserved for unlabeled pixels")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(sorted(self.entries, key=lambda e: e.id))

    def get(self, label_id: int) -> Label:
        return self._by_id()[label_id]

    def _by_id(self) -> dict[int, Label]:
        return {e.id: e for e in self.entries}

    def by_name(self, name: str) -> Label:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    @property
    def ids(self) -> list[int]:
        return sorted(e.id for e in self.entries)

    @property
    def excluded_ids(self) -> set[int]:
        return {e.id for e in self.entries if e.excluded}

    def things(self) -> list[Label]:
        return [e for e in self if e.kind == "thing" and not e.excluded]

    def stuffs(self) -> list[Label]:
        return [e for e in self if e.kind == "stuff" and not e.excluded]

    def is_thing(self, label_id: int) -> bool:
        return self.get(label_id).kind == "thing"

    def to_json(self) -> list[dict]:
        return [
            {"id": e.id, "name": e.name, "kind": e.kind, "excluded": e.excluded}
            for e in self
        ]

    @classmethod
    def from_json(cls, data: list[dict]) -> "LabelTaxonomy":
        return cls(tuple(
            Label(int(d["id"]), str(d["name"]), str(d["kind"]), bool(d.get("excluded", False)))
            for d in data
        ))


@dataclass(frozen=True)
class TimedWord:
    text: str
    start_ms: int
    end_ms: int

    @property
    def mid_ms(self) -> float:
        return (self.start_ms + self.end_ms) / 2.0


@dataclass(frozen=True)
class TracePoint:
    x: float
    y: float
    t_ms: int


@dataclass
class Example:
    id: str
    width: int
    height: int
    narrative: list[TimedWord]
    trace: list[TracePoint]
    label_map: np.ndarray | None = field(default=None, repr=False)
    label_map_path: str | None = None

    def present_labels(self) -> set[int]:
        if self.label_map is None:
            return set()
        return {int(v) for v in np.unique(self.label_map) if v != UNLABELED}

    def words(self) -> list[str]:
        return [w.text for w in self.narrative]


@dataclass(frozen=True)
class PhraseSegment:
    """A contiguous word span bound to a contiguous trace slice.

    trace span indices are [trace_start, trace_end) into Example.trace and
    may be empty for degenerate traces.
    """

    word_start: int
    word_end: int  # inclusive
    trace_start: int
    trace_end: int  # exclusive

    def word_indices(self) -> range:
        return range(self.word_start, self.word_end + 1)


@dataclass(frozen=True)
class RecordError:
    line: int
    example_id: str | None
    message: str


@dataclass
class Corpus:
    taxonomy: LabelTaxonomy
    examples: list[Example]
    errors: list[RecordError] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.examples)

    def by_id(self) -> dict[str, Example]:
        return {ex.id: ex for ex in self.examples}


def tokenize(text: str) -> list[str]:
    """Whitespace split, lowercase, strip terminal punctuation."""
    out = []
    for raw in text.split():
        tok = _TERMINAL_PUNCT.sub("", raw.lower())
        if tok:
            out.append(tok)
    return out


def _parse_record(rec: dict, taxonomy: LabelTaxonomy, base: Path) -> Example:
    ex_id = str(rec["id"])
    width, height = int(rec["width"]), int(rec["height"])
    if width <= 0 or height <= 0:
        raise ValueError("non-positive dimensions")

    narrative: list[TimedWord] = []
    prev_start = None
    for w in rec["narrative"]:
        word = str(w["word"]).lower()
        start, end = int(w["start_ms"]), int(w["end_ms"])
        if start > end:
            raise ValueError(f"word '{word}': start_ms > end_ms")
        if prev_start is not None and start < prev_start:
            raise ValueError("non-monotone timestamps in narrative")
        prev_start = start
        narrative.append(TimedWord(word, start, end))
    if not narrative:
        raise ValueError("empty narrative")

    trace: list[TracePoint] = []
    prev_t = None
    for p in rec.get("trace", []):
        x, y, t = float(p["x"]), float(p["y"]), int(p["t_ms"])
        if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            raise ValueError(f"coordinate out of range: ({x}, {y})")
        if prev_t is not None and t < prev_t:
            raise ValueError("non-monotone timestamps in trace")
        prev_t = t
        trace.append(TracePoint(x, y, t))

    map_rel = rec["label_map"]
    map_path = base / map_rel
    if not map_path.exists():
        raise ValueError(f"missing file: {map_rel}")
    arr = np.asarray(Image.open(map_path).convert("L"), dtype=np.uint8)
    if arr.shape != (height, width):
        raise ValueError(
            f"label map {map_rel} is {arr.shape[::-1]}, manifest declares {(width, height)}"
        )
    known = set(taxonomy.ids) | {UNLABELED}
    bad = set(int(v) for v in np.unique(arr)) - known
    if bad:
        raise ValueError(f"label id not in taxonomy: {sorted(bad)}")
    return Example(ex_id, width, height, narrative, trace, arr, str(map_rel))


def load_taxonomy(path: Path | str) -> LabelTaxonomy:
    with open(path) as f:
        return LabelTaxonomy.from_json(json.load(f))


def load_corpus(manifest_path: Path | str, taxonomy_path: Path | str | None = None) -> Corpus:
    """Load and validate a manifest; malformed records are collected, not raised.

    The taxonomy defaults to ``taxonomy.json`` next to the manifest.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileNotFoundError(manifest_path)
    if taxonomy_path is None:
        taxonomy_path = manifest_path.parent / "taxonomy.json"
    taxonomy = load_taxonomy(taxonomy_path)

    examples: list[Example] = []
    errors: list[RecordError] = []
    base = manifest_path.parent
    with open(manifest_path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            ex_id = None
            try:
                rec = json.loads(line)
                ex_id = str(rec.get("id"))
                examples.append(_parse_record(rec, taxonomy, base))
            except (KeyError, TypeError) as e:
                errors.append(RecordError(lineno, ex_id, f"missing or malformed field: {e}"))
            except (ValueError, OSError) as e:
                errors.append(RecordError(lineno, ex_id, str(e)))
    return Corpus(taxonomy, examples, errors)


def save_corpus(corpus: Corpus, out_dir: Path | str) -> Path:
    """Write manifest + taxonomy + label maps; inverse of load_corpus."""
    out_dir = Path(out_dir)
    (out_dir / "maps").mkdir(parents=True, exist_ok=True)
    with open(out_dir / "taxonomy.json", "w") as f:
        json.dump(corpus.taxonomy.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w") as f:
        for ex in corpus.examples:
            rel = ex.label_map_path or f"maps/{ex.id}.png"
            Image.fromarray(ex.label_map, mode="L").save(out_dir / rel)
            rec = {
                "id": ex.id,
                "label_map": rel,
                "width": ex.width,
                "height": ex.height,
                "narrative": [
                    {"word": w.text, "start_ms": w.start_ms, "end_ms": w.end_ms}
                    for w in ex.narrative
                ],
                "trace": [{"x": p.x, "y": p.y, "t_ms": p.t_ms} for p in ex.trace],
            }
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest


def segment_phrases(example: Example, gap_ms: int = 300) -> list[PhraseSegment]:
    """Split the trace at temporal gaps > gap_ms and bind words to slices.

    Words attach to the slice whose time window contains the word midpoint,
    falling back to the nearest window (earlier slice on exact ties). The
    attachment is then made monotone so word spans stay contiguous, and
    wordless slices are merged into a neighbor so both partitions are exact.
    Degenerate traces yield a single segment spanning all words.
    """
    if gap_ms <= 0:
        raise ValueError("gap_ms must be positive")
    n_words = len(example.narrative)
    trace = example.trace
    if not trace:
        return [PhraseSegment(0, n_words - 1, 0, 0)]

    # Contiguous trace slices split at gaps, as [start, end) index pairs.
    slices: list[tuple[int, int]] = []
    start = 0
    for i in range(1, len(trace)):
        if trace[i].t_ms - trace[i - 1].t_ms > gap_ms:
            slices.append((start, i))
            start = i
    slices.append((start, len(trace)))
    windows = [(trace[a].t_ms, trace[b - 1].t_ms) for a, b in slices]

    def nearest_slice(mid: float) -> int:
        best, best_d = 0, float("inf")
        for j, (t0, t1) in enumerate(windows):
            if t0 <= mid <= t1:
                return j
            d = max(t0 - mid, mid - t1)
            if d < best_d:
                best, best_d = j, d
        return best

    assign = [nearest_slice(w.mid_ms) for w in example.narrative]
    for i in range(1, n_words):
        assign[i] = max(assign[i], assign[i - 1])

    # Group words per slice; wordless slices merge forward into the next kept
    # segment (trailing ones backward into the last) so the trace stays covered.
    segments: list[PhraseSegment] = []
    used_slices = sorted(set(assign))
    for si, s in enumerate(used_slices):
        word_idx = [i for i, a in enumerate(assign) if a == s]
        prev_end = segments[-1].trace_end if segments else 0
        t_end = slices[s][1]
        if si == len(used_slices) - 1:
            t_end = len(trace)
        segments.append(PhraseSegment(word_idx[0], word_idx[-1], prev_end, t_end))
    return segments


@dataclass(frozen=True)
class CorpusStats:
    example_count: int
    mean_narrative_len: float
    class_example_counts: dict[int, int]
    class_pixel_counts: dict[int, int]


def corpus_stats(corpus: Corpus) -> CorpusStats:
    lengths = [len(ex.narrative) for ex in corpus.examples]
    ex_counts: Counter[int] = Counter()
    px_counts: Counter[int] = Counter()
    for ex in corpus.examples:
        present = ex.present_labels()
        ex_counts.update(present)
        if ex.label_map is not None:
            vals, counts = np.unique(ex.label_map, return_counts=True)
            for v, c in zip(vals, counts):
                if int(v) != UNLABELED:
                    px_counts[int(v)] += int(c)
    return CorpusStats(
        example_count=len(corpus.examples),
        mean_narrative_len=float(np.mean(lengths)) if lengths else 0.0,
        class_example_counts=dict(sorted(ex_counts.items())),
        class_pixel_counts=dict(sorted(px_counts.items())),
    )
