"""Word-label alignment statistics feeding the sequence tagger.

Produces, from a labeled corpus: noisy per-word label assignments (modal
label inside the convex hull of each phrase's trace), tf-idf weights for
words and labels, a label-to-word translation table trained with IBM
Model 1 EM, and adjacent-label transition counts.
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Corpus, Example, LabelTaxonomy, PhraseSegment, UNLABELED, segment_phrases
from .geometry import convex_hull, rasterize

FORMAT_VERSION = "alignment-v1"


@dataclass
class RawAssignment:
    """One label per word of one example, in word order."""

    example_id: str
    labels: list[int]


@dataclass
class TfIdfWeights:
    word_weights: dict[str, float]
    label_weights: dict[int, float]

    def word(self, w: str) -> float:
        return self.word_weights.get(w, 0.0)

    def label(self, c: int) -> float:
        return self.label_weights.get(c, 0.0)


@dataclass
class TranslationTable:
    """P(word | label) distributions, one per label."""

    probs: dict[int, dict[str, float]]
    vocab: list[str]
    labels: list[int]


@dataclass
class TransitionCounts:
    counts: dict[int, dict[int, int]]

    def get(self, c: int, c2: int) -> int:
        return self.counts.get(c, {}).get(c2, 0)


@dataclass
class AlignmentModel:
    """Everything the HMM builder needs, serializable to one JSON document."""

    taxonomy: LabelTaxonomy
    weights: TfIdfWeights
    ttable: TranslationTable
    transitions: TransitionCounts
    em_log_likelihoods: list[float] = field(default_factory=list)

    def save(self, path: Path | str) -> None:
        names = {e.id: e.name for e in self.taxonomy}
        doc = {
            "format": FORMAT_VERSION,
            "taxonomy": self.taxonomy.to_json(),
            "word_weights": self.weights.word_weights,
            "label_weights": {names[c]: w for c, w in self.weights.label_weights.items()},
            "translation": {
                names[c]: dist for c, dist in self.ttable.probs.items()
            },
            "vocab": self.ttable.vocab,
            "transition_counts": {
                names[c]: {names[c2]: n for c2, n in row.items()}
                for c, row in self.transitions.counts.items()
            },
            "em_log_likelihoods": self.em_log_likelihoods,
        }
        with open(path, "w") as f:
            json.dump(doc, f, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path: Path | str) -> "AlignmentModel":
        with open(path) as f:
            doc = json.load(f)
        if doc.get("format") != FORMAT_VERSION:
            raise ValueError(f"unsupported alignment model format: {doc.get('format')}")
        taxonomy = LabelTaxonomy.from_json(doc["taxonomy"])
        ids = {e.name: e.id for e in taxonomy}
        weights = TfIdfWeights(
            word_weights=dict(doc["word_weights"]),
            label_weights={ids[n]: w for n, w in doc["label_weights"].items()},
        )
        probs = {ids[n]: dict(dist) for n, dist in doc["translation"].items()}
        ttable = TranslationTable(probs, list(doc["vocab"]), sorted(probs))
        trans = TransitionCounts({
            ids[n]: {ids[n2]: int(v) for n2, v in row.items()}
            for n, row in doc["transition_counts"].items()
        })
        return cls(taxonomy, weights, ttable, trans, list(doc.get("em_log_likelihoods", [])))


def modal_label(values: np.ndarray) -> int | None:
    """Most frequent labeled value; lowest id wins ties; None if all unlabeled."""
    vals, counts = np.unique(values, return_counts=True)
    keep = vals != UNLABELED
    vals, counts = vals[keep], counts[keep]
    if vals.size == 0:
        return None
    # np.unique sorts values ascending, so argmax takes the lowest id on ties.
    return int(vals[np.argmax(counts)])


def noisy_assign(example: Example, segments: list[PhraseSegment],
                 taxonomy: LabelTaxonomy) -> RawAssignment:
    """Assign each phrase's words the modal label under its trace hull.

    Phrases whose hull covers no labeled pixel fall back to the modal label
    of the whole image.
    """
    if example.label_map is None:
        raise ValueError(f"example {example.id} has no label map")
    image_mode = modal_label(example.label_map)
    if image_mode is None:
        raise ValueError(f"example {example.id}: label map entirely unlabeled")

    labels = [0] * len(example.narrative)
    for seg in segments:
        pts = [(p.x, p.y) for p in example.trace[seg.trace_start:seg.trace_end]]
        label = None
        if pts:
            hull = convex_hull(pts)
            mask = rasterize(hull, example.width, example.height)
            covered = example.label_map[mask.bits]
            label = modal_label(covered)
        if label is None:
            label = image_mode
        for i in seg.word_indices():
            labels[i] = label
    return RawAssignment(example.id, labels)


def compute_tfidf(documents: list[list]) -> dict:
    """One weight per term: mean length-normalized tf over containing
    documents, times ln(N / df). Terms present in every document get 0.
    """
    if not documents:
        raise ValueError("no documents")
    n_docs = len(documents)
    df: Counter = Counter()
    tf_sum: defaultdict = defaultdict(float)
    for doc in documents:
        if not doc:
            continue
        counts = Counter(doc)
        for term, c in counts.items():
            df[term] += 1
            tf_sum[term] += c / len(doc)
    return {
        term: (tf_sum[term] / df[term]) * math.log(n_docs / df[term])
        for term in df
    }


def train_ibm1(pairs: list[tuple[list[str], list[int]]],
               iterations: int = 20) -> tuple[TranslationTable, list[float]]:
    """IBM Model 1 EM with labels as source and words as target.

    Uniform initialization, no NULL source token. Returns P(word|label) and
    the per-iteration corpus log-likelihood (computed with the parameters
    entering each iteration, hence non-decreasing).
    """
    if not pairs:
        raise ValueError("no training pairs")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    vocab = sorted({w for words, _ in pairs for w in words})
    labels = sorted({c for _, bag in pairs for c in bag})
    if not vocab or not labels:
        raise ValueError("empty vocabulary or label set")
    w_index = {w: i for i, w in enumerate(vocab)}
    c_index = {c: i for i, c in enumerate(labels)}

    V, L = len(vocab), len(labels)
    t = np.full((L, V), 1.0 / V)
    encoded = [
        (np.array([w_index[w] for w in words], dtype=np.intp),
         np.array(sorted(c_index[c] for c in bag), dtype=np.intp))
        for words, bag in pairs
    ]

    log_likelihoods: list[float] = []
    for _ in range(iterations):
        counts = np.zeros((L, V))
        ll = 0.0
        for wi, ci in encoded:
            sub = t[np.ix_(ci, wi)]            # (|bag|, |words|)
            denom = sub.sum(axis=0)            # per-word normalizer
            ll += float(np.log(denom).sum()) - len(wi) * math.log(len(ci))
            np.add.at(counts, np.ix_(ci, wi), sub / denom)
        row_sums = counts.sum(axis=1, keepdims=True)
        nonzero = row_sums[:, 0] > 0
        t[nonzero] = counts[nonzero] / row_sums[nonzero]
        log_likelihoods.append(ll)

    probs = {
        labels[ci]: {vocab[wi]: float(t[ci, wi]) for wi in range(V) if t[ci, wi] > 0}
        for ci in range(L)
    }
    return TranslationTable(probs, vocab, labels), log_likelihoods


def count_transitions(assignments: list[RawAssignment]) -> TransitionCounts:
    """Adjacent-pair label counts within each assignment, never across examples."""
    counts: defaultdict = defaultdict(lambda: defaultdict(int))
    for a in assignments:
        for c, c2 in zip(a.labels, a.labels[1:]):
            counts[c][c2] += 1
    return TransitionCounts({c: dict(row) for c, row in counts.items()})


def train_alignment(corpus: Corpus, gap_ms: int = 300,
                    em_iterations: int = 20) -> AlignmentModel:
    """Full alignment stage: noisy assignments, tf-idf, IBM1, transitions."""
    assignments = []
    for ex in corpus.examples:
        segs = segment_phrases(ex, gap_ms)
        assignments.append(noisy_assign(ex, segs, corpus.taxonomy))

    narratives = [ex.words() for ex in corpus.examples]
    label_bags = [sorted(ex.present_labels()) for ex in corpus.examples]
    weights = TfIdfWeights(
        word_weights=compute_tfidf(narratives),
        label_weights=compute_tfidf(label_bags),
    )
    pairs = list(zip(narratives, label_bags))
    ttable, lls = train_ibm1(pairs, em_iterations)
    transitions = count_transitions(assignments)
    return AlignmentModel(corpus.taxonomy, weights, ttable, transitions, lls)
