"""Two-alternative forced-choice observer study service.

Sessions walk an observer through a fixed list of (target, synthetic)
image pairs. For each pair the synthetic image is placed left or right
by a bit derived from (session seed, pair index); images are served as
identically windowed 8-bit grayscale PNGs behind opaque tokens so
nothing on the wire reveals which side is synthetic. Responses (forced
choice + 1..5 confidence) go to an append-only JSON-lines log per
session; replaying the log after a restart restores the cursor exactly.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .tensorio import read_scalar


class StudyError(Exception):
    """code/message pairs map straight onto HTTP error bodies."""

    code = "study_error"
    http_status = 400

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class CreationError(StudyError):
    code = "creation_error"


class UnknownSessionError(StudyError):
    code = "unknown_session"
    http_status = 404


class SequenceError(StudyError):
    code = "sequence_error"
    http_status = 409


class DuplicateResponseError(StudyError):
    code = "duplicate_response"
    http_status = 409


class ValidationError(StudyError):
    code = "validation_error"
    http_status = 422


SIDES = ("left", "right")
RENDER_PERCENTILE = 99.5


def placement_side(seed: int, pair_index: int) -> str:
    """Side holding the synthetic image; reproducible from (seed, index)."""
    rng = np.random.default_rng([seed, pair_index])
    return SIDES[int(rng.integers(0, 2))]


def _token(session_id: str, pair_index: int, side: str) -> str:
    digest = hashlib.sha256(f"{session_id}:{pair_index}:{side}".encode()).hexdigest()
    return digest[:24]


@dataclass
class ResponseRecord:
    session_id: str
    pair_index: int
    chosen_side: str
    correct: bool
    confidence: int
    timestamp_ms: int
    elapsed_ms: int | None = None

    def to_json(self) -> str:
        d = {"session_id": self.session_id, "pair_index": self.pair_index,
             "chosen_side": self.chosen_side, "correct": self.correct,
             "confidence": self.confidence, "timestamp_ms": self.timestamp_ms}
        if self.elapsed_ms is not None:
            d["elapsed_ms"] = self.elapsed_ms
        return json.dumps(d)

    @staticmethod
    def from_json(line: str) -> "ResponseRecord":
        d = json.loads(line)
        return ResponseRecord(
            session_id=d["session_id"], pair_index=int(d["pair_index"]),
            chosen_side=d["chosen_side"], correct=bool(d["correct"]),
            confidence=int(d["confidence"]), timestamp_ms=int(d["timestamp_ms"]),
            elapsed_ms=d.get("elapsed_ms"),
        )


@dataclass
class StudySession:
    session_id: str
    observer_id: str
    seed: int
    pairs: list  # [(target_path, synthetic_path), ...]
    responses: dict = field(default_factory=dict)  # pair_index -> ResponseRecord

    @property
    def cursor(self) -> int:
        return len(self.responses)

    @property
    def completed(self) -> bool:
        return self.cursor >= len(self.pairs)

    def synth_side(self, pair_index: int) -> str:
        return placement_side(self.seed, pair_index)

    def token_paths(self, pair_index: int) -> dict:
        """token -> file path for both sides of one pair."""
        target, synthetic = self.pairs[pair_index]
        synth_side = self.synth_side(pair_index)
        sides = {"left": synthetic, "right": target} if synth_side == "left" \
            else {"left": target, "right": synthetic}
        return {_token(self.session_id, pair_index, s): sides[s] for s in SIDES}


def render_pair_pngs(path_a: str, path_b: str) -> tuple[bytes, bytes]:
    """Render two images with one shared window to inverted 8-bit PNGs.

    The window is [0, P99.5] of the pooled pixel values of the pair and
    high uptake maps to dark, so both panels are directly comparable.
    """
    grids = [read_scalar(path_a).values, read_scalar(path_b).values]
    pooled = np.concatenate([g.ravel() for g in grids])
    hi = float(np.percentile(pooled, RENDER_PERCENTILE))
    out = []
    for g in grids:
        if hi > 0:
            scaled = np.clip(g / hi, 0.0, 1.0)
        else:
            scaled = np.zeros_like(g)
        gray = (255.0 - np.round(255.0 * scaled)).astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(gray, mode="L").save(buf, format="PNG")
        out.append(buf.getvalue())
    return out[0], out[1]


@dataclass
class SummaryRow:
    observer_id: str
    answered: int
    accuracy_pct: float        # raw value
    accuracy_display: int      # rounded to nearest integer for display
    median_confidence: float

    def to_dict(self) -> dict:
        return {"observer_id": self.observer_id, "answered": self.answered,
                "accuracy_pct": self.accuracy_pct,
                "accuracy_display": self.accuracy_display,
                "median_confidence": self.median_confidence}


def _summary_of(observer_id: str, records: list[ResponseRecord]) -> SummaryRow:
    n = len(records)
    correct = sum(1 for r in records if r.correct)
    acc = 100.0 * correct / n
    return SummaryRow(
        observer_id=observer_id, answered=n, accuracy_pct=acc,
        accuracy_display=int(math.floor(acc + 0.5)),
        median_confidence=float(np.median([r.confidence for r in records])),
    )


class StudyStore:
    """Session registry with JSON-lines persistence under one directory."""

    def __init__(self, root: str):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.sessions: dict[str, StudySession] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._png_cache: dict[str, bytes] = {}
        self._token_index: dict[str, tuple[str, int]] = {}
        for header in sorted(self.root.glob("*.session.json")):
            session = self._load_session(header)
            self.sessions[session.session_id] = session
            self._locks[session.session_id] = threading.Lock()
            self._index_tokens(session)

    def _index_tokens(self, session: StudySession) -> None:
        for idx in range(len(session.pairs)):
            for side in SIDES:
                self._token_index[_token(session.session_id, idx, side)] = (session.session_id, idx)

    # persistence ----------------------------------------------------------

    def _header_path(self, session_id: str) -> Path:
        return self.root / f"{session_id}.session.json"

    def _log_path(self, session_id: str) -> Path:
        return self.root / f"{session_id}.responses.jsonl"

    def _load_session(self, header: Path) -> StudySession:
        with open(header) as fh:
            d = json.load(fh)
        session = StudySession(session_id=d["session_id"], observer_id=d["observer_id"],
                               seed=int(d["seed"]), pairs=[tuple(p) for p in d["pairs"]])
        log = self._log_path(session.session_id)
        if log.exists():
            with open(log) as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    rec = ResponseRecord.from_json(line)
                    # replay is idempotent: the first record per pair wins
                    session.responses.setdefault(rec.pair_index, rec)
        return session

    # operations -------------------------------------------------------------

    def create_session(self, manifest: list, observer_id: str, seed: int) -> StudySession:
        """Register a session for an ordered (target, synthetic) pair list."""
        if not manifest:
            raise CreationError("manifest holds no image pairs")
        pairs = []
        missing = []
        for entry in manifest:
            if isinstance(entry, dict):
                t, s = entry["target"], entry["synthetic"]
            else:
                t, s = entry
            for p in (t, s):
                base = str(p)
                for ext in (".json", ".bin"):
                    if base.endswith(ext):
                        base = base[: -len(ext)]
                if not (Path(base + ".json").exists() and Path(base + ".bin").exists()):
                    missing.append(str(p))
            pairs.append((str(t), str(s)))
        if missing:
            raise CreationError("missing image files: " + ", ".join(sorted(set(missing))))
        raw = json.dumps({"observer_id": observer_id, "seed": seed, "pairs": pairs,
                          "created_ms": int(time.time() * 1000)}, sort_keys=True)
        session_id = "s" + hashlib.sha256(raw.encode()).hexdigest()[:16]
        while session_id in self.sessions:
            # same observer/seed/manifest created twice in one millisecond
            raw += "x"
            session_id = "s" + hashlib.sha256(raw.encode()).hexdigest()[:16]
        session = StudySession(session_id=session_id, observer_id=observer_id,
                               seed=seed, pairs=pairs)
        with open(self._header_path(session_id), "w") as fh:
            json.dump({"session_id": session_id, "observer_id": observer_id,
                       "seed": seed, "pairs": pairs}, fh)
        self.sessions[session_id] = session
        self._locks[session_id] = threading.Lock()
        self._index_tokens(session)
        return session

    def get(self, session_id: str) -> StudySession:
        if session_id not in self.sessions:
            raise UnknownSessionError(f"no session {session_id!r}")
        return self.sessions[session_id]

    def next_pair(self, session_id: str) -> dict:
        session = self.get(session_id)
        if session.completed:
            return {"done": True, "answered": session.cursor}
        idx = session.cursor
        return {
            "pair_index": idx,
            "left_image_url": f"/img/{_token(session_id, idx, 'left')}",
            "right_image_url": f"/img/{_token(session_id, idx, 'right')}",
            "progress": {"answered": idx, "total": len(session.pairs)},
        }

    def record_response(self, session_id: str, pair_index: int, chosen_side: str,
                        confidence: int, elapsed_ms: int | None = None) -> dict:
        session = self.get(session_id)
        if chosen_side not in SIDES:
            raise ValidationError(f"chosen_side must be one of {SIDES}, got {chosen_side!r}")
        if not isinstance(confidence, int) or not (1 <= confidence <= 5):
            raise ValidationError(f"confidence must be an integer in 1..5, got {confidence!r}")
        with self._locks[session_id]:
            if pair_index in session.responses:
                raise DuplicateResponseError(f"pair {pair_index} already answered")
            if pair_index != session.cursor:
                raise SequenceError(
                    f"expected pair {session.cursor}, got {pair_index}")
            record = ResponseRecord(
                session_id=session_id, pair_index=pair_index, chosen_side=chosen_side,
                correct=(chosen_side == session.synth_side(pair_index)),
                confidence=confidence, timestamp_ms=int(time.time() * 1000),
                elapsed_ms=elapsed_ms,
            )
            with open(self._log_path(session_id), "a") as fh:
                fh.write(record.to_json() + "\n")
            session.responses[pair_index] = record
        return {"recorded": True, "pair_index": pair_index,
                "remaining": len(session.pairs) - session.cursor}

    def image_png(self, token: str) -> bytes:
        if token in self._png_cache:
            return self._png_cache[token]
        hit = self._token_index.get(token)
        if hit is None:
            raise UnknownSessionError(f"no image for token {token!r}")
        session_id, idx = hit
        session = self.sessions[session_id]
        left = _token(session_id, idx, "left")
        right = _token(session_id, idx, "right")
        paths = session.token_paths(idx)
        png_left, png_right = render_pair_pngs(paths[left], paths[right])
        self._png_cache[left] = png_left
        self._png_cache[right] = png_right
        return self._png_cache[token]

    def summarize(self, session_id: str | None = None) -> dict:
        """Per-observer accuracy and median confidence, plus a pooled row."""
        if session_id is not None:
            session = self.get(session_id)
            if not session.responses:
                raise ValidationError("session has no responses yet")
            return _summary_of(session.observer_id, list(session.responses.values())).to_dict()
        rows = []
        pooled: list[ResponseRecord] = []
        for session in sorted(self.sessions.values(), key=lambda s: s.session_id):
            if session.responses:
                recs = list(session.responses.values())
                rows.append(_summary_of(session.observer_id, recs))
                pooled.extend(recs)
        if not pooled:
            raise ValidationError("no responses recorded in any session")
        return {"rows": [r.to_dict() for r in rows],
                "overall": _summary_of("overall", pooled).to_dict()}

    def summary_csv(self, path: str) -> None:
        import csv

        summary = self.summarize()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["observer", "answered", "accuracy_pct", "accuracy_display",
                        "median_confidence"])
            for row in summary["rows"] + [summary["overall"]]:
                w.writerow([row["observer_id"], row["answered"], repr(float(row["accuracy_pct"])),
                            row["accuracy_display"], repr(float(row["median_confidence"]))])


# ---------------------------------------------------------------------------
# HTTP surface


def create_app(store: StudyStore):
    """FastAPI app exposing the study API over one StudyStore."""
    from fastapi import FastAPI, Request
    from fastapi.responses import JSONResponse, Response
    from fastapi.staticfiles import StaticFiles

    app = FastAPI(title="padkit observer study")

    @app.exception_handler(StudyError)
    async def _study_error(request: Request, exc: StudyError):
        return JSONResponse(status_code=exc.http_status,
                            content={"code": exc.code, "message": exc.message})

    @app.post("/api/sessions")
    async def create_session(body: dict):
        manifest = body.get("manifest")
        if manifest is None and "manifest_path" in body:
            with open(body["manifest_path"]) as fh:
                manifest = json.load(fh)
        if manifest is None:
            raise ValidationError("body needs 'manifest' or 'manifest_path'")
        observer_id = body.get("observer_id")
        if not observer_id:
            raise ValidationError("body needs a nonempty 'observer_id'")
        if "seed" not in body:
            raise ValidationError("body needs an explicit integer 'seed'")
        session = store.create_session(manifest, str(observer_id), int(body["seed"]))
        return {"session_id": session.session_id, "pair_count": len(session.pairs)}

    @app.get("/api/sessions/{session_id}/next")
    async def next_pair(session_id: str):
        return store.next_pair(session_id)

    @app.post("/api/sessions/{session_id}/responses")
    async def record_response(session_id: str, body: dict):
        for key in ("pair_index", "chosen_side", "confidence"):
            if key not in body:
                raise ValidationError(f"response body needs {key!r}")
        confidence = body["confidence"]
        if isinstance(confidence, bool) or not isinstance(confidence, int):
            raise ValidationError("confidence must be an integer in 1..5")
        return store.record_response(
            session_id, int(body["pair_index"]), str(body["chosen_side"]),
            confidence, elapsed_ms=body.get("elapsed_ms"))

    @app.get("/api/sessions/{session_id}/summary")
    async def session_summary(session_id: str):
        return store.summarize(session_id)

    @app.get("/api/summary")
    async def all_summary():
        return store.summarize()

    @app.get("/img/{token}")
    async def image(token: str):
        return Response(content=store.image_png(token), media_type="image/png")

    ui_dir = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    if ui_dir.is_dir():
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")
    return app
