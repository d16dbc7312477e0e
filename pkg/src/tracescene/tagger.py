"""Constrained HMM sequence tagger built from alignment statistics.

Emissions scale the IBM-1 translation probabilities by word tf-idf
weights; transitions scale add-1-smoothed adjacency counts by label
tf-idf weights; the transition term is raised to a configurable exponent
at decode time so tags can flip despite peaky emissions.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .align import AlignmentModel, TfIdfWeights, TransitionCounts, TranslationTable
from .corpus import Corpus, LabelTaxonomy

log = logging.getLogger(__name__)

FORMAT_VERSION = "hmm-v1"
NEG_INF = float("-inf")


@dataclass
class HmmConfig:
    emission_floor: float = 1e-6
    transition_exponent: float = 10.0


@dataclass
class HmmModel:
    """Log-space HMM over the taxonomy's label ids (states index by id)."""

    taxonomy: LabelTaxonomy
    vocab: list[str]
    log_emissions: np.ndarray = field(repr=False)     # (labels, vocab)
    log_transitions: np.ndarray = field(repr=False)   # (labels, labels)
    initial_log_probs: np.ndarray = field(repr=False)  # (labels,)
    transition_exponent: float = 10.0
    oov_log_prob: float = 0.0
    excluded_labels: frozenset[int] = frozenset()

    def __post_init__(self):
        self._word_index = {w: i for i, w in enumerate(self.vocab)}
        # Pre-scaled transition scores used identically by decode and scoring.
        self._kt = self.transition_exponent * self.log_transitions

    @property
    def n_labels(self) -> int:
        return len(self.taxonomy)

    def emission_column(self, word: str) -> np.ndarray:
        idx = self._word_index.get(word)
        if idx is None:
            return np.full(self.n_labels, self.oov_log_prob)
        return self.log_emissions[:, idx]

    def save(self, path: Path | str) -> None:
        def enc(a: np.ndarray):
            return [[None if v == NEG_INF else v for v in row] for row in a.tolist()]

        doc = {
            "format": FORMAT_VERSION,
            "taxonomy": self.taxonomy.to_json(),
            "vocab": self.vocab,
            "log_emissions": enc(self.log_emissions),
            "log_transitions": enc(self.log_transitions),
            "initial_log_probs": [None if v == NEG_INF else v
                                  for v in self.initial_log_probs.tolist()],
            "transition_exponent": self.transition_exponent,
            "oov_log_prob": self.oov_log_prob,
            "excluded_labels": sorted(self.excluded_labels),
        }
        with open(path, "w") as f:
            json.dump(doc, f, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path: Path | str) -> "HmmModel":
        with open(path) as f:
            doc = json.load(f)
        if doc.get("format") != FORMAT_VERSION:
            raise ValueError(f"unsupported HMM model format: {doc.get('format')}")

        def dec(rows) -> np.ndarray:
            return np.array([[NEG_INF if v is None else v for v in row] for row in rows])

        return cls(
            taxonomy=LabelTaxonomy.from_json(doc["taxonomy"]),
            vocab=list(doc["vocab"]),
            log_emissions=dec(doc["log_emissions"]),
            log_transitions=dec(doc["log_transitions"]),
            initial_log_probs=np.array([NEG_INF if v is None else v
                                        for v in doc["initial_log_probs"]]),
            transition_exponent=float(doc["transition_exponent"]),
            oov_log_prob=float(doc["oov_log_prob"]),
            excluded_labels=frozenset(int(c) for c in doc["excluded_labels"]),
        )


def build_hmm(ttable: TranslationTable, weights: TfIdfWeights,
              counts: TransitionCounts, taxonomy: LabelTaxonomy,
              config: HmmConfig | None = None) -> HmmModel:
    """Assemble the log-space HMM over all taxonomy labels.

    e(w|c) = (alpha_w * P(w|c) + floor) / Z_c
    t(c'|c) = alpha_c' * (Count(c->c') + 1) / Z_c, uniform when the row
    collapses to zero (every alpha_c' zero). Initial distribution is
    uniform over non-excluded labels.
    """
    config = config or HmmConfig()
    if len(taxonomy) == 0:
        raise ValueError("empty label set")
    vocab = list(ttable.vocab)
    n = len(taxonomy)
    label_ids = taxonomy.ids

    alpha_w = np.array([weights.word(w) for w in vocab])
    emissions = np.empty((n, len(vocab)))
    for c in label_ids:
        p_row = ttable.probs.get(c, {})
        p = np.array([p_row.get(w, 0.0) for w in vocab])
        scores = alpha_w * p + config.emission_floor
        emissions[c] = scores / scores.sum()

    alpha_c = np.array([weights.label(c) for c in label_ids])
    transitions = np.empty((n, n))
    for c in label_ids:
        row = np.array([counts.get(c, c2) + 1.0 for c2 in label_ids])
        scores = alpha_c * row
        z = scores.sum()
        if z <= 0.0:
            transitions[c] = 1.0 / n
        else:
            transitions[c] = scores / z

    excluded = frozenset(taxonomy.excluded_ids)
    initial = np.full(n, NEG_INF)
    permitted = [c for c in label_ids if c not in excluded]
    if not permitted:
        raise ValueError("every label is excluded")
    initial[permitted] = -math.log(len(permitted))

    with np.errstate(divide="ignore"):
        log_e = np.log(emissions)
        log_t = np.log(transitions)
    return HmmModel(
        taxonomy=taxonomy,
        vocab=vocab,
        log_emissions=log_e,
        log_transitions=log_t,
        initial_log_probs=initial,
        transition_exponent=config.transition_exponent,
        oov_log_prob=math.log(1.0 / (len(vocab) + 1)),
        excluded_labels=excluded,
    )


def _state_mask(hmm: HmmModel, allowed_labels) -> np.ndarray:
    mask = np.ones(hmm.n_labels, dtype=bool)
    for c in hmm.excluded_labels:
        mask[c] = False
    if allowed_labels is not None:
        allow = np.zeros(hmm.n_labels, dtype=bool)
        for c in allowed_labels:
            allow[c] = True
        mask &= allow
    if not mask.any():
        raise ValueError("all labels excluded from decoding")
    return mask


def viterbi(hmm: HmmModel, words: list[str], allowed_labels=None) -> list[int]:
    """Highest-scoring label sequence; ties take the lowest label id.

    Scores: initial(c1) + sum log e(w_i|c_i) + exponent * sum log t(c_i+1|c_i),
    restricted to allowed_labels when given. OOV words emit a uniform floor.
    """
    if not words:
        raise ValueError("empty word sequence")
    mask = _state_mask(hmm, allowed_labels)
    neg = np.where(mask, 0.0, NEG_INF)

    v = hmm.initial_log_probs + hmm.emission_column(words[0]) + neg
    backs = []
    for word in words[1:]:
        step = v[:, None] + hmm._kt          # (prev, cur)
        best_prev = np.argmax(step, axis=0)  # first max = lowest prev id
        v = step[best_prev, np.arange(hmm.n_labels)] + hmm.emission_column(word) + neg
        backs.append(best_prev)

    last = int(np.argmax(v))
    if v[last] == NEG_INF:
        raise ValueError("no admissible label sequence")
    seq = [last]
    for bp in reversed(backs):
        seq.append(int(bp[seq[-1]]))
    seq.reverse()
    return seq


def score_sequence(hmm: HmmModel, words: list[str], labels: list[int]) -> float:
    """Score of one labeling under the decode objective (same arithmetic)."""
    if len(words) != len(labels):
        raise ValueError("words and labels differ in length")
    s = hmm.initial_log_probs[labels[0]] + hmm.emission_column(words[0])[labels[0]]
    for i in range(1, len(words)):
        s = s + hmm._kt[labels[i - 1], labels[i]]
        s = s + hmm.emission_column(words[i])[labels[i]]
    return float(s)


@dataclass
class TaggedExample:
    id: str
    words: list[str]
    tags: list[int]


@dataclass
class TaggedCorpus:
    taxonomy: LabelTaxonomy
    examples: list[TaggedExample]


def tag_corpus(corpus: Corpus, hmm: HmmModel, constrained: bool) -> TaggedCorpus:
    """Decode every narrative; constrained mode restricts each example to the
    labels present in its own label map. Excluded labels are never emitted;
    an example whose map holds only excluded labels falls back to an
    unconstrained decode with a warning.
    """
    tagged = []
    for ex in corpus.examples:
        allowed = None
        if constrained:
            present = ex.present_labels() - set(hmm.excluded_labels)
            if present:
                allowed = present
            else:
                log.warning("example %s: no decodable labels on image; "
                            "decoding unconstrained", ex.id)
        tags = viterbi(hmm, ex.words(), allowed)
        tagged.append(TaggedExample(ex.id, ex.words(), tags))
    return TaggedCorpus(corpus.taxonomy, tagged)


def export_autosupervision(tagged: TaggedCorpus, out_path: Path | str) -> None:
    """JSON-lines of {id, words, tags} with tags as label names."""
    names = {e.id: e.name for e in tagged.taxonomy}
    with open(out_path, "w") as f:
        for ex in tagged.examples:
            rec = {"id": ex.id, "words": ex.words, "tags": [names[t] for t in ex.tags]}
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_autosupervision(path: Path | str, taxonomy: LabelTaxonomy) -> TaggedCorpus:
    ids = {e.name: e.id for e in taxonomy}
    examples = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            words, tags = list(rec["words"]), [ids[t] for t in rec["tags"]]
            if len(words) != len(tags):
                raise ValueError(f"record {rec.get('id')}: words/tags length mismatch")
            examples.append(TaggedExample(str(rec["id"]), words, tags))
    return TaggedCorpus(taxonomy, examples)
