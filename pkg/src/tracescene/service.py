"""HTTP authoring facade: sessions accumulate traces and narrative words,
then tag and compose through the same code path as the batch CLI, so
identical inputs produce byte-identical canvases.
"""

from __future__ import annotations

import hashlib
import json
import tempfile
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, HTTPException, Request, Response
from fastapi.exceptions import RequestValidationError
from fastapi.responses import FileResponse, JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .compose import ComposeConfig, compose, write_canvas
from .corpus import Corpus, TimedWord, TracePoint, load_corpus, tokenize
from .render import Palette, default_palette
from .retrieval import RetrievalIndex
from .tagger import HmmModel, viterbi


class TracePayload(BaseModel):
    points: list[dict]


class NarrativePayload(BaseModel):
    words: list[dict] | None = None
    text: str | None = None
    mode: str | None = None


class SessionOptions(BaseModel):
    k: int | None = None
    gap_ms: int | None = None
    canvas_size: int | None = None


@dataclass
class Session:
    id: str
    trace: list[TracePoint] = field(default_factory=list)
    narrative: list[TimedWord] = field(default_factory=list)
    overrides: dict = field(default_factory=dict)
    last_canvas_id: str | None = None
    lock: threading.Lock = field(default_factory=threading.Lock)


@dataclass
class ServiceState:
    corpus: Corpus
    hmm: HmmModel
    index: RetrievalIndex
    palette: Palette
    config: ComposeConfig
    canvas_dir: Path
    ui_dir: Path | None = None
    sessions: dict[str, Session] = field(default_factory=dict)
    registry_lock: threading.Lock = field(default_factory=threading.Lock)


def build_state(corpus_path, model_path, index_path, taxonomy_path=None,
                canvas_dir=None, canvas_size=256, k=5, gap_ms=300,
                ui_dir=None) -> ServiceState:
    corpus = load_corpus(corpus_path, taxonomy_path)
    hmm = HmmModel.load(model_path)
    index = RetrievalIndex.load(index_path)
    cfg = ComposeConfig(canvas_width=canvas_size, canvas_height=canvas_size,
                        k=k, gap_ms=gap_ms)
    if canvas_dir is None:
        canvas_dir = Path(tempfile.mkdtemp(prefix="tracescene-canvases-"))
    ui = Path(ui_dir) if ui_dir else None
    return ServiceState(
        corpus=corpus, hmm=hmm, index=index,
        palette=default_palette(corpus.taxonomy.ids),
        config=cfg, canvas_dir=Path(canvas_dir), ui_dir=ui,
    )


def _session_config(state: ServiceState, session: Session) -> ComposeConfig:
    o = session.overrides
    size = o.get("canvas_size")
    return ComposeConfig(
        canvas_width=size or state.config.canvas_width,
        canvas_height=size or state.config.canvas_height,
        k=o.get("k") or state.config.k,
        gap_ms=o.get("gap_ms") or state.config.gap_ms,
        min_mask_pixels=state.config.min_mask_pixels,
        fallback_label=state.config.fallback_label,
    )


def canvas_fingerprint(narrative: list[TimedWord], trace: list[TracePoint],
                       config: ComposeConfig) -> str:
    doc = {
        "narrative": [[w.text, w.start_ms, w.end_ms] for w in narrative],
        "trace": [[p.x, p.y, p.t_ms] for p in trace],
        "config": config.to_json(),
    }
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def create_app(state: ServiceState) -> FastAPI:
    app = FastAPI(title="tracescene authoring service")

    @app.exception_handler(RequestValidationError)
    async def invalid_payload(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": exc.errors()})

    def get_session(session_id: str) -> Session:
        with state.registry_lock:
            session = state.sessions.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail="unknown session")
        return session

    @app.post("/sessions", status_code=201)
    def create_session(options: SessionOptions | None = None):
        session = Session(id=uuid.uuid4().hex)
        if options is not None:
            session.overrides = {k: v for k, v in options.model_dump().items()
                                 if v is not None}
        with state.registry_lock:
            state.sessions[session.id] = session
        return {"id": session.id}

    @app.post("/sessions/{session_id}/trace")
    def append_trace(session_id: str, payload: TracePayload):
        session = get_session(session_id)
        with session.lock:
            last_t = session.trace[-1].t_ms if session.trace else None
            points = []
            for p in payload.points:
                try:
                    x, y, t = float(p["x"]), float(p["y"]), int(p["t_ms"])
                except (KeyError, TypeError, ValueError):
                    raise HTTPException(status_code=400,
                                        detail="points need x, y, t_ms")
                if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
                    raise HTTPException(status_code=400,
                                        detail=f"coordinate out of range: ({x}, {y})")
                if last_t is not None and t < last_t:
                    raise HTTPException(status_code=400,
                                        detail="trace timestamps must be non-decreasing")
                last_t = t
                points.append(TracePoint(x, y, t))
            session.trace.extend(points)
            return {"points": len(session.trace)}

    @app.put("/sessions/{session_id}/narrative")
    def put_narrative(session_id: str, payload: NarrativePayload):
        session = get_session(session_id)
        with session.lock:
            if payload.words is not None:
                words = []
                prev = None
                for w in payload.words:
                    try:
                        word = str(w["word"]).lower()
                        start, end = int(w["start_ms"]), int(w["end_ms"])
                    except (KeyError, TypeError, ValueError):
                        raise HTTPException(status_code=400,
                                            detail="words need word, start_ms, end_ms")
                    if start > end or (prev is not None and start < prev):
                        raise HTTPException(status_code=400,
                                            detail="word timestamps must be ordered")
                    prev = start
                    words.append(TimedWord(word, start, end))
                session.narrative = words
            elif payload.text is not None:
                tokens = tokenize(payload.text)
                # auto-stamp: spread words over the trace's time range
                t_end = session.trace[-1].t_ms if session.trace else 300 * len(tokens)
                t_start = session.trace[0].t_ms if session.trace else 0
                span = max(t_end - t_start, len(tokens))
                step = span / max(1, len(tokens))
                session.narrative = [
                    TimedWord(tok, int(t_start + i * step),
                              int(t_start + (i + 1) * step))
                    for i, tok in enumerate(tokens)
                ]
            else:
                raise HTTPException(status_code=400,
                                    detail="provide words or text")
            return {"words": [w.text for w in session.narrative]}

    @app.get("/sessions/{session_id}/tags")
    def get_tags(session_id: str):
        session = get_session(session_id)
        with session.lock:
            if not session.narrative:
                return {"tags": []}
            tags = viterbi(state.hmm, [w.text for w in session.narrative])
        taxonomy = state.corpus.taxonomy
        return {"tags": [
            {"word": w.text, "label_id": t, "label_name": taxonomy.get(t).name}
            for w, t in zip(session.narrative, tags)
        ]}

    @app.post("/sessions/{session_id}/compose")
    def compose_session(session_id: str):
        session = get_session(session_id)
        with session.lock:
            if not session.narrative:
                raise HTTPException(status_code=409,
                                    detail="session has no narrative to compose")
            cfg = _session_config(state, session)
            canvas_id = canvas_fingerprint(session.narrative, session.trace, cfg)
            out_dir = state.canvas_dir / canvas_id
            result = compose(session.narrative, session.trace, state.corpus,
                             state.hmm, state.index, cfg)
            write_canvas(result, out_dir, state.palette, state.corpus.taxonomy)
            session.last_canvas_id = canvas_id
        taxonomy = state.corpus.taxonomy
        return {
            "canvas_id": canvas_id,
            "classes": sorted({taxonomy.get(int(v)).name
                               for v in set(result.canvas.labels.ravel().tolist())}),
            "background_source": result.background_source,
            "instances": [
                {"class": taxonomy.get(p.instance.class_id).name,
                 "kind": p.instance.kind,
                 "span": list(p.instance.token_span),
                 "mask_source": p.mask_source}
                for p in result.instances
            ],
            "warnings": result.warnings,
        }

    @app.get("/canvases/{canvas_id}/{artifact}")
    def get_canvas_artifact(canvas_id: str, artifact: str):
        if artifact not in ("color.png", "labels.png", "meta.json", "provenance.json"):
            raise HTTPException(status_code=404, detail="unknown artifact")
        path = state.canvas_dir / canvas_id / artifact
        if not path.exists():
            raise HTTPException(status_code=404, detail="unknown canvas")
        media = "image/png" if artifact.endswith(".png") else "application/json"
        return FileResponse(path, media_type=media)

    @app.get("/labels")
    def get_labels():
        return {"labels": [
            {"id": e.id, "name": e.name, "kind": e.kind, "excluded": e.excluded,
             "color": list(state.palette[e.id])}
            for e in state.corpus.taxonomy
        ]}

    @app.get("/config")
    def get_config():
        return {"config": state.config.to_json(),
                "corpus_size": len(state.corpus),
                "encoder": state.index.encoder_kind}

    if state.ui_dir is not None and state.ui_dir.exists():
        app.mount("/ui", StaticFiles(directory=state.ui_dir, html=True), name="ui")

    return app
