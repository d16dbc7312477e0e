"""Batch command line for every pipeline stage.

Subcommands mirror the stages: gen-synth, import, assign, train-align,
build-hmm, tag, export-autosup, index, retrieve, compose, eval-tagging,
eval-recall, render, serve. All emit machine-readable artifacts and exit
nonzero with a diagnostic on failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import align as align_mod
from . import metrics, synth
from .compose import ComposeConfig, compose, write_canvas
from .corpus import (Corpus, TimedWord, TracePoint, UNLABELED, load_corpus,
                     corpus_stats, segment_phrases, tokenize)
from .render import Palette, default_palette
from .retrieval import RetrievalIndex, build_index, top_k
from .tagger import (HmmConfig, HmmModel, build_hmm, export_autosupervision,
                     tag_corpus)


def _load(manifest: str, taxonomy: str | None) -> Corpus:
    corpus = load_corpus(manifest, taxonomy)
    if corpus.errors:
        for err in corpus.errors:
            print(f"manifest line {err.line} ({err.example_id}): {err.message}",
                  file=sys.stderr)
        print(f"warning: {len(corpus.errors)} record(s) rejected", file=sys.stderr)
    return corpus


def _read_request(path: str) -> tuple[list[TimedWord], list[TracePoint]]:
    with open(path) as f:
        rec = json.load(f)
    if "text" in rec and "narrative" not in rec:
        words = tokenize(rec["text"])
        trace_recs = rec.get("trace", [])
        t_end = max((int(p["t_ms"]) for p in trace_recs), default=300 * len(words))
        step = max(1, t_end // max(1, len(words)))
        narrative = [TimedWord(w, i * step, (i + 1) * step)
                     for i, w in enumerate(words)]
    else:
        narrative = [TimedWord(str(w["word"]).lower(), int(w["start_ms"]),
                               int(w["end_ms"]))
                     for w in rec.get("narrative", [])]
    trace = [TracePoint(float(p["x"]), float(p["y"]), int(p["t_ms"]))
             for p in rec.get("trace", [])]
    if not narrative:
        raise ValueError("request has an empty narrative")
    return narrative, trace


def cmd_gen_synth(args) -> int:
    cfg = synth.SynthConfig(n=args.n, seed=args.seed, width=args.size,
                            height=args.size, pure_lexicon=args.pure_lexicon)
    manifest = synth.write_synthetic(cfg, args.out)
    print(f"wrote {args.n} examples to {manifest}")
    return 0


def cmd_import(args) -> int:
    from .ln_import import import_localized_narratives
    n, skipped = import_localized_narratives(
        args.input, args.out, label_map_dir=args.label_maps,
        taxonomy_path=args.taxonomy, limit=args.limit)
    print(f"imported {n} records ({skipped} skipped) to {args.out}")
    return 0


def cmd_stats(args) -> int:
    corpus = _load(args.corpus, args.taxonomy)
    stats = corpus_stats(corpus)
    names = {e.id: e.name for e in corpus.taxonomy}
    out = {
        "examples": stats.example_count,
        "mean_narrative_len": stats.mean_narrative_len,
        "class_example_counts": {names[c]: n for c, n
                                 in stats.class_example_counts.items()},
        "rejected_records": len(corpus.errors),
    }
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def cmd_assign(args) -> int:
    corpus = _load(args.corpus, args.taxonomy)
    names = {e.id: e.name for e in corpus.taxonomy}
    with open(args.out, "w") as f:
        for ex in corpus.examples:
            segs = segment_phrases(ex, args.gap_ms)
            assignment = align_mod.noisy_assign(ex, segs, corpus.taxonomy)
            rec = {"id": ex.id, "words": ex.words(),
                   "tags": [names[c] for c in assignment.labels]}
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"wrote noisy assignments for {len(corpus)} examples to {args.out}")
    return 0


def cmd_train_align(args) -> int:
    corpus = _load(args.corpus, args.taxonomy)
    model = align_mod.train_alignment(corpus, gap_ms=args.gap_ms,
                                      em_iterations=args.iterations)
    model.save(args.out)
    lls = model.em_log_likelihoods
    print(f"alignment model -> {args.out} "
          f"(EM log-likelihood {lls[0]:.3f} -> {lls[-1]:.3f})")
    return 0


def cmd_build_hmm(args) -> int:
    model = align_mod.AlignmentModel.load(args.alignment)
    cfg = HmmConfig(emission_floor=args.emission_floor,
                    transition_exponent=args.exponent)
    hmm = build_hmm(model.ttable, model.weights, model.transitions,
                    model.taxonomy, cfg)
    hmm.save(args.out)
    print(f"HMM -> {args.out} ({hmm.n_labels} labels, {len(hmm.vocab)} words)")
    return 0


def cmd_tag(args) -> int:
    corpus = _load(args.corpus, args.taxonomy)
    hmm = HmmModel.load(args.model)
    tagged = tag_corpus(corpus, hmm, constrained=args.constrained)
    export_autosupervision(tagged, args.out)
    print(f"tagged {len(tagged.examples)} narratives -> {args.out}")
    return 0


def cmd_index(args) -> int:
    corpus = _load(args.corpus, args.taxonomy)
    index = build_index(corpus, args.encoder, args.embeddings)
    index.save(args.out)
    print(f"index -> {args.out} ({len(index)} vectors, dim {index.dimension})")
    return 0


def cmd_retrieve(args) -> int:
    index = RetrievalIndex.load(args.index)
    words = tokenize(args.query)
    ids = top_k(index, words, args.k)
    print(json.dumps({"query": args.query, "top_k": ids}, sort_keys=True))
    return 0


def cmd_compose(args) -> int:
    corpus = _load(args.corpus, args.taxonomy)
    hmm = HmmModel.load(args.model)
    index = RetrievalIndex.load(args.index)
    narrative, trace = _read_request(args.input)
    cfg = ComposeConfig(canvas_width=args.canvas_size,
                        canvas_height=args.canvas_size,
                        k=args.k, gap_ms=args.gap_ms)
    result = compose(narrative, trace, corpus, hmm, index, cfg)
    palette = (Palette.load(args.palette) if args.palette
               else default_palette(corpus.taxonomy.ids))
    write_canvas(result, args.out, palette, corpus.taxonomy)
    for warning in result.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    print(f"canvas -> {args.out} (background {result.background_source})")
    return 0


def cmd_export_autosup(args) -> int:
    return cmd_tag(args)


def cmd_eval_tagging(args) -> int:
    with open(args.predicted) as f:
        pred = {r["id"]: r["tags"] for r in map(json.loads, f) if r}
    with open(args.gold) as f:
        gold = {r["id"]: r["tags"] for r in map(json.loads, f) if r}
    shared = sorted(set(pred) & set(gold))
    if not shared:
        print("no overlapping ids between predictions and gold", file=sys.stderr)
        return 1
    vocab = sorted({t for r in list(pred.values()) + list(gold.values()) for t in r})
    code = {name: i for i, name in enumerate(vocab)}
    flat_pred, flat_gold = [], []
    for ex_id in shared:
        flat_pred.extend(code[t] for t in pred[ex_id])
        flat_gold.extend(code[t] for t in gold[ex_id])
    report = metrics.tagging_accuracy(flat_pred, flat_gold)
    data = report.to_json()
    data["per_class"] = {vocab[int(c)]: v for c, v in data["per_class"].items()}
    print(json.dumps(data, indent=2, sort_keys=True))
    if args.out:
        metrics.write_report(data, args.out)
    return 0


def cmd_eval_recall(args) -> int:
    index = RetrievalIndex.load(args.index)
    with open(args.pairs) as f:
        pairs = [(tokenize(r["query"]), str(r["gold_id"]))
                 for r in map(json.loads, f) if r]
    ks = sorted(int(k) for k in args.k)
    table = metrics.recall_at_k(index, pairs, ks)
    rows = [[k, table[k]] for k in ks]
    print(metrics.format_table(["k", "recall"], rows))
    if args.out:
        metrics.write_report({str(k): v for k, v in table.items()}, args.out)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import build_state, create_app

    state = build_state(corpus_path=args.corpus, taxonomy_path=args.taxonomy,
                        model_path=args.model, index_path=args.index,
                        canvas_dir=args.canvas_dir, canvas_size=args.canvas_size,
                        k=args.k, ui_dir=args.ui_dir)
    app = create_app(state)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tracescene",
        description="Narrative + trace to segmentation canvas pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def corpus_args(p):
        p.add_argument("--corpus", required=True, help="manifest.jsonl path")
        p.add_argument("--taxonomy", default=None,
                       help="taxonomy.json (default: next to manifest)")

    p = sub.add_parser("gen-synth", help="generate a synthetic corpus")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--pure-lexicon", action="store_true",
                   help="content-word-only phrases")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("import", help="convert public Localized Narratives "
                                      "JSONL to a manifest")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--label-maps", default=None,
                   help="directory of <image_id>.png label maps")
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(func=cmd_import)

    p = sub.add_parser("stats", help="corpus statistics")
    corpus_args(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("assign", help="noisy word-label assignments")
    corpus_args(p)
    p.add_argument("--gap-ms", type=int, default=300)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_assign)

    p = sub.add_parser("train-align", help="tf-idf + IBM1 + transition counts")
    corpus_args(p)
    p.add_argument("--gap-ms", type=int, default=300)
    p.add_argument("--iterations", type=int, default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_align)

    p = sub.add_parser("build-hmm", help="HMM from an alignment model")
    p.add_argument("--alignment", required=True)
    p.add_argument("--emission-floor", type=float, default=1e-6)
    p.add_argument("--exponent", type=float, default=10.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_hmm)

    for name, help_text in (("tag", "decode label sequences"),
                            ("export-autosup", "export auto-supervision JSONL")):
        p = sub.add_parser(name, help=help_text)
        corpus_args(p)
        p.add_argument("--model", required=True)
        p.add_argument("--constrained", action="store_true")
        p.add_argument("--out", required=True)
        p.set_defaults(func=cmd_tag)

    p = sub.add_parser("index", help="build a retrieval index")
    corpus_args(p)
    p.add_argument("--encoder", choices=["tfidf", "external"], default="tfidf")
    p.add_argument("--embeddings", default=None,
                   help="JSONL embedding file for the external encoder")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("retrieve", help="query the index")
    p.add_argument("--index", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--k", type=int, default=5)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("compose", help="compose a canvas from narrative + trace")
    corpus_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--input", required=True,
                   help='JSON request: {"narrative": [...], "trace": [...]} or '
                        '{"text": "...", "trace": [...]}')
    p.add_argument("--out", required=True)
    p.add_argument("--canvas-size", type=int, default=256)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--gap-ms", type=int, default=300)
    p.add_argument("--palette", default=None)
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("eval-tagging", help="token metrics for tag files")
    p.add_argument("--predicted", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval_tagging)

    p = sub.add_parser("eval-recall", help="recall@k table for an index")
    p.add_argument("--index", required=True)
    p.add_argument("--pairs", required=True,
                   help='JSONL of {"query": text, "gold_id": id}')
    p.add_argument("--k", nargs="+", default=["1", "5", "10"])
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval_recall)

    p = sub.add_parser("serve", help="run the authoring HTTP service")
    corpus_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8787)
    p.add_argument("--canvas-size", type=int, default=256)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--canvas-dir", default=None,
                   help="where composed canvases are written (default: temp)")
    p.add_argument("--ui-dir", default=None,
                   help="static UI bundle served under /ui")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
