"""Narrative-keyed vector retrieval and spatially aligned mask selection.

The index stores one unit-norm vector per corpus example, either a tf-idf
bag of the narrative or externally computed embeddings loaded from a
JSON-lines file. Candidate masks for a detected class instance come from
the top-k retrieved examples; the winner maximizes IOU with the instance
hull, compared at the source positions on a common canvas-resolution grid.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .corpus import Corpus, Example
from .geometry import BinaryMask, Polygon, iou, rasterize

log = logging.getLogger(__name__)

FORMAT_VERSION = "index-v1"
DEFAULT_MIN_MASK_PIXELS = 16


@dataclass(frozen=True)
class ClassInstance:
    """One detected mention of a class: a token run plus its trace hull."""

    class_id: int
    token_span: tuple[int, int]  # inclusive word indices
    hull: Polygon
    kind: str  # "thing" | "stuff"


@dataclass
class MaskInstance:
    class_id: int
    mask: BinaryMask
    source_id: str


class RetrievalIndex:
    def __init__(self, encoder_kind: str, ids: list[str], matrix: np.ndarray,
                 vocab: list[str] | None = None, idf: np.ndarray | None = None):
        if matrix.ndim != 2 or matrix.shape[0] != len(ids):
            raise ValueError("vector matrix does not match id list")
        self.encoder_kind = encoder_kind
        self.ids = list(ids)
        self.matrix = matrix
        self.vocab = vocab
        self.idf = idf
        self._term_index = {t: i for i, t in enumerate(vocab)} if vocab else None

    @property
    def dimension(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def embed_text(self, words: list[str]) -> np.ndarray:
        if self.encoder_kind != "tfidf":
            raise ValueError("text queries need a tfidf index; supply a vector instead")
        vec = np.zeros(self.dimension)
        for term, count in Counter(words).items():
            i = self._term_index.get(term)
            if i is not None:
                vec[i] = count * self.idf[i]
        return _unit(vec)

    def save(self, path: Path | str) -> None:
        doc = {
            "format": FORMAT_VERSION,
            "encoder": self.encoder_kind,
            "dimension": self.dimension,
            "ids": self.ids,
            "vectors": self.matrix.tolist(),
        }
        if self.encoder_kind == "tfidf":
            doc["vocab"] = self.vocab
            doc["idf"] = self.idf.tolist()
        with open(path, "w") as f:
            json.dump(doc, f, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path: Path | str) -> "RetrievalIndex":
        with open(path) as f:
            doc = json.load(f)
        if doc.get("format") != FORMAT_VERSION:
            raise ValueError(f"unsupported index format: {doc.get('format')}")
        vocab = doc.get("vocab")
        idf = np.array(doc["idf"]) if "idf" in doc else None
        return cls(doc["encoder"], list(doc["ids"]), np.array(doc["vectors"]),
                   vocab=vocab, idf=idf)


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    return v / n if n > 0 else v


def build_index(corpus: Corpus, encoder_kind: str = "tfidf",
                embedding_file: Path | str | None = None) -> RetrievalIndex:
    """tfidf: L2-normalized tf * ln(N/df) bags; external: vectors loaded
    verbatim from a JSON-lines file and L2-normalized."""
    ids = [ex.id for ex in corpus.examples]
    if encoder_kind == "tfidf":
        docs = [ex.words() for ex in corpus.examples]
        n_docs = len(docs)
        if n_docs == 0:
            raise ValueError("cannot index an empty corpus")
        df: Counter = Counter()
        for doc in docs:
            df.update(set(doc))
        vocab = sorted(df)
        idf = np.array([math.log(n_docs / df[t]) for t in vocab])
        term_index = {t: i for i, t in enumerate(vocab)}
        matrix = np.zeros((n_docs, len(vocab)))
        for r, doc in enumerate(docs):
            for term, count in Counter(doc).items():
                i = term_index[term]
                matrix[r, i] = count * idf[i]
            matrix[r] = _unit(matrix[r])
        return RetrievalIndex("tfidf", ids, matrix, vocab=vocab, idf=idf)

    if encoder_kind == "external":
        if embedding_file is None:
            raise ValueError("external encoder needs an embedding file")
        vectors: dict[str, np.ndarray] = {}
        dim = None
        with open(embedding_file) as f:
            for lineno, line in enumerate(f, start=1):
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                vec = np.asarray(rec["vec"], dtype=float)
                if dim is None:
                    dim = vec.shape[0]
                elif vec.shape[0] != dim:
                    raise ValueError(
                        f"embedding dimension mismatch at line {lineno}: "
                        f"{vec.shape[0]} != {dim}")
                vectors[str(rec["id"])] = vec
        missing = [i for i in ids if i not in vectors]
        if missing:
            raise ValueError(f"embedding file misses {len(missing)} corpus ids "
                             f"(first: {missing[:3]})")
        matrix = np.stack([_unit(vectors[i]) for i in ids])
        return RetrievalIndex("external", ids, matrix)

    raise ValueError(f"unknown encoder kind: {encoder_kind}")


def top_k(index: RetrievalIndex, query, k: int) -> list[str]:
    """IDs of the k most cosine-similar examples, best first.

    Ties break lexicographically by id; k larger than the corpus is clamped
    with a warning. The query is a word list (tfidf index) or a vector.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(index):
        log.warning("top_k: k=%d exceeds corpus size %d; clamping", k, len(index))
        k = len(index)
    if isinstance(query, np.ndarray):
        qv = _unit(np.asarray(query, dtype=float))
        if qv.shape[0] != index.dimension:
            raise ValueError("query vector dimension mismatch")
    else:
        qv = index.embed_text(list(query))
    scores = index.matrix @ qv
    order = sorted(range(len(index)), key=lambda i: (-scores[i], index.ids[i]))
    return [index.ids[i] for i in order[:k]]


def similarity_scores(index: RetrievalIndex, query) -> dict[str, float]:
    qv = _unit(np.asarray(query, dtype=float)) if isinstance(query, np.ndarray) \
        else index.embed_text(list(query))
    scores = index.matrix @ qv
    return {i: float(s) for i, s in zip(index.ids, scores)}


def extract_masks(example: Example, class_id: int,
                  min_pixels: int = DEFAULT_MIN_MASK_PIXELS) -> list[MaskInstance]:
    """One mask per 4-connected component of the class; tiny ones dropped."""
    if example.label_map is None:
        raise ValueError(f"example {example.id} has no label map")
    binary = example.label_map == class_id
    labeled, n = ndimage.label(binary)  # default structure = 4-connectivity
    out = []
    for comp in range(1, n + 1):
        bits = labeled == comp
        if int(bits.sum()) < min_pixels:
            continue
        out.append(MaskInstance(
            class_id=class_id,
            mask=BinaryMask(example.width, example.height, bits,
                            class_id=class_id, source_id=example.id),
            source_id=example.id,
        ))
    return out


def resample_mask(mask: BinaryMask, width: int, height: int) -> BinaryMask:
    """Nearest-neighbor resample onto a width x height grid (same normalized
    frame, no translation)."""
    rows = np.minimum((np.floor((np.arange(height) + 0.5) / height * mask.height))
                      .astype(int), mask.height - 1)
    cols = np.minimum((np.floor((np.arange(width) + 0.5) / width * mask.width))
                      .astype(int), mask.width - 1)
    bits = mask.bits[np.ix_(rows, cols)]
    return BinaryMask(width, height, bits, mask.class_id, mask.source_id)


def hull_overlap(candidate: MaskInstance, hull_raster: BinaryMask) -> float:
    """IOU between a candidate mask (at source position) and a rasterized hull."""
    resampled = resample_mask(candidate.mask, hull_raster.width, hull_raster.height)
    return iou(resampled, hull_raster)


def select_mask(instance: ClassInstance, candidates: list[MaskInstance],
                canvas_dims: tuple[int, int]) -> MaskInstance | None:
    """argmax of IOU(candidate, instance hull); ties prefer the lower
    source_id, then candidate order. None when there are no candidates."""
    if not candidates:
        return None
    for cand in candidates:
        if cand.class_id != instance.class_id:
            raise ValueError("candidate class does not match instance class")
    width, height = canvas_dims
    hull_raster = rasterize(instance.hull, width, height)
    best, best_key = None, None
    for cand in candidates:
        score = hull_overlap(cand, hull_raster)
        key = (-score, cand.source_id)
        if best_key is None or key < best_key:
            best, best_key = cand, key
    return best
