"""Importer for the public Localized Narratives JSONL format.

Tooling, not core pipeline: converts records with `timed_caption`
(utterances with start_time/end_time in seconds) and `traces` (stroke
lists of {x, y, t} in seconds) into our manifest schema. Coordinates are
clamped into [0, 1]; records without a label map are skipped since corpus
examples require one.
"""

from __future__ import annotations

import json
from pathlib import Path

from .corpus import tokenize


def _clamp(v: float) -> float:
    return min(1.0, max(0.0, float(v)))


def import_localized_narratives(input_path: str | Path, out_path: str | Path,
                                label_map_dir: str | Path | None,
                                taxonomy_path: str | Path,
                                limit: int | None = None) -> tuple[int, int]:
    """Returns (imported, skipped). Copies the taxonomy next to the manifest."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    taxonomy_dst = out_path.parent / "taxonomy.json"
    if Path(taxonomy_path).resolve() != taxonomy_dst.resolve():
        taxonomy_dst.write_text(Path(taxonomy_path).read_text())

    imported = skipped = 0
    with open(input_path) as fin, open(out_path, "w") as fout:
        for line in fin:
            line = line.strip()
            if not line:
                continue
            if limit is not None and imported >= limit:
                break
            rec = json.loads(line)
            image_id = str(rec.get("image_id", rec.get("id", "")))
            map_rel = None
            width = height = None
            if label_map_dir is not None:
                candidate = Path(label_map_dir) / f"{image_id}.png"
                if candidate.exists():
                    from PIL import Image
                    with Image.open(candidate) as im:
                        width, height = im.size
                    map_rel = str(Path(candidate).resolve()
                                  .relative_to(out_path.parent.resolve())
                                  if candidate.resolve().is_relative_to(
                                      out_path.parent.resolve())
                                  else candidate.resolve())
            if map_rel is None:
                skipped += 1
                continue

            narrative = []
            for utt in rec.get("timed_caption", []):
                start = int(round(float(utt["start_time"]) * 1000))
                end = int(round(float(utt["end_time"]) * 1000))
                for word in tokenize(str(utt["utterance"])):
                    narrative.append({"word": word, "start_ms": start,
                                      "end_ms": max(start, end)})
            narrative.sort(key=lambda w: w["start_ms"])
            trace = []
            for stroke in rec.get("traces", []):
                for p in stroke:
                    trace.append({"x": _clamp(p["x"]), "y": _clamp(p["y"]),
                                  "t_ms": int(round(float(p["t"]) * 1000))})
            trace.sort(key=lambda p: p["t_ms"])
            if not narrative:
                skipped += 1
                continue
            fout.write(json.dumps({
                "id": image_id,
                "label_map": map_rel,
                "width": width,
                "height": height,
                "narrative": narrative,
                "trace": trace,
            }, sort_keys=True) + "\n")
            imported += 1
    return imported, skipped
