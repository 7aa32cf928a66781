"""Annotation HTTP API bridging the engine's queue to a human annotator.

The engine runs in a worker thread and blocks between rounds while its
pending requests wait in the shared queue; the HTTP layer serves the
queue, accepts label submissions (idempotently), and exposes run stats.
State mutations flow exclusively through the queue annotator, never into
the detector directly.
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .al import BACKGROUND, AnnotationRequest, AnnotationResult
from .geometry import BoundingBox


class QueueAnnotator:
    """Blocking annotator backed by the HTTP label queue.

    Submissions persist to queue.jsonl in the run directory so that a
    human session survives a restart: on resume, previously submitted
    results are replayed against matching request ids.
    """

    name = "human"

    def __init__(self, run_dir=None):
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self._lock = threading.Condition()
        self._pending: dict[str, AnnotationRequest] = {}
        self._results: dict[str, AnnotationResult] = {}
        self._replay: dict[str, AnnotationResult] = {}
        self._round = 0
        self._closed = False
        if self.run_dir is not None:
            self._load_journal()

    # ------------------------------------------------------------- journal

    def _journal_path(self) -> Path:
        return self.run_dir / "queue.jsonl"

    def _load_journal(self) -> None:
        path = self._journal_path()
        if not path.exists():
            return
        for line in path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            entry = json.loads(line)
            if entry.get("type") == "result":
                result = AnnotationResult.from_json(entry)
                self._replay[result.request_id] = result

    def _journal(self, entry: dict) -> None:
        if self.run_dir is None:
            return
        with open(self._journal_path(), "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")

    # ------------------------------------------------------------- engine side

    def annotate(self, requests) -> list[AnnotationResult]:
        with self._lock:
            self._round += 1
            self._pending = {r.request_id: r for r in requests}
            self._results = {}
            for request in requests:
                self._journal({"type": "request", **request.to_json(include_thumbnail=True)})
                replayed = self._replay.get(request.request_id)
                if replayed is not None:
                    self._results[request.request_id] = replayed
                    self._pending.pop(request.request_id)
            self._lock.notify_all()
            while not self._closed and self._pending:
                self._lock.wait(timeout=0.2)
            ordered = [self._results[r.request_id] for r in requests
                       if r.request_id in self._results]
            self._pending = {}
            return ordered

    def close(self) -> None:
        with self._lock:
            self._closed = True
            self._lock.notify_all()

    # --------------------------------------------------------------- API side

    def queue_view(self) -> list[dict]:
        with self._lock:
            return [r.to_json(include_thumbnail=True) for r in self._pending.values()]

    def submit(self, request_id: str, label: int, corrected_box=None) -> str:
        """Returns "ok", "no-op", "unknown", or "stale"."""
        with self._lock:
            prior = self._results.get(request_id) or self._replay.get(request_id)
            if prior is not None:
                same = prior.label == label and prior.corrected_box == corrected_box
                return "no-op" if same else "stale"
            request = self._pending.get(request_id)
            if request is None:
                return "unknown"
            result = AnnotationResult(
                request_id=request_id,
                label=label,
                corrected_box=corrected_box,
                annotator="human",
            )
            self._pending.pop(request_id)
            self._results[request_id] = result
            self._journal({"type": "result", **result.to_json()})
            self._lock.notify_all()
            return "ok"


class EngineStats:
    """Thread-shared run counters mirrored into GET /api/stats."""

    def __init__(self):
        self._lock = threading.Lock()
        self._data = {"rounds": 0, "annotated_count": 0, "pseudo_count": 0,
                      "current_map": 0.0, "finished": False}

    def update(self, **kwargs) -> None:
        with self._lock:
            self._data.update(kwargs)

    def snapshot(self) -> dict:
        with self._lock:
            return dict(self._data)


def stats_observer(stats: EngineStats):
    """Engine observer that mirrors run counters into the shared stats."""

    def _update(engine):
        stats.update(
            rounds=engine.round_index,
            annotated_count=engine.annotations_used,
            pseudo_count=len(engine.pseudo_ids),
            current_map=engine.current_map,
        )

    return _update


def _parse_label_body(raw: bytes):
    try:
        body = json.loads(raw.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ValueError(f"malformed JSON body: {exc}") from exc
    if not isinstance(body, dict) or "request_id" not in body or "label" not in body:
        raise ValueError("body must carry request_id and label")
    label = body["label"]
    if not isinstance(label, int) or (label < BACKGROUND):
        raise ValueError("label must be a category index or -1 for background")
    corrected = body.get("corrected_box")
    box = None
    if corrected is not None:
        try:
            box = BoundingBox.from_json(corrected)
        except (ValueError, TypeError) as exc:
            raise ValueError(f"bad corrected_box: {exc}") from exc
    return str(body["request_id"]), label, box


def make_handler(annotator: QueueAnnotator, stats: EngineStats, static_dir=None):
    static_root = Path(static_dir) if static_dir is not None else None

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):  # quiet test output
            pass

        def _send_json(self, payload, status=200):
            data = json.dumps(payload).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json; charset=utf-8")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_GET(self):
            if self.path == "/api/queue":
                self._send_json(annotator.queue_view())
            elif self.path == "/api/stats":
                snapshot = stats.snapshot()
                self._send_json(
                    {
                        "rounds": snapshot["rounds"],
                        "annotated_count": snapshot["annotated_count"],
                        "pseudo_count": snapshot["pseudo_count"],
                        "current_map": snapshot["current_map"],
                        "finished": snapshot["finished"],
                    }
                )
            elif static_root is not None:
                self._send_static()
            else:
                self._send_json({"error": "not found"}, status=404)

        def _send_static(self):
            relative = self.path.lstrip("/") or "index.html"
            target = (static_root / relative).resolve()
            if not str(target).startswith(str(static_root.resolve())) or not target.is_file():
                self._send_json({"error": "not found"}, status=404)
                return
            content = target.read_bytes()
            ctype = "text/html; charset=utf-8"
            if target.suffix == ".js":
                ctype = "text/javascript; charset=utf-8"
            elif target.suffix == ".css":
                ctype = "text/css; charset=utf-8"
            self.send_response(200)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(content)))
            self.end_headers()
            self.wfile.write(content)

        def do_POST(self):
            if self.path != "/api/labels":
                self._send_json({"error": "not found"}, status=404)
                return
            length = int(self.headers.get("Content-Length", "0"))
            raw = self.rfile.read(length)
            try:
                request_id, label, box = _parse_label_body(raw)
            except ValueError as exc:
                self._send_json({"error": str(exc)}, status=422)
                return
            outcome = annotator.submit(request_id, label, box)
            if outcome == "unknown":
                self._send_json({"error": f"unknown request {request_id}"}, status=404)
            elif outcome == "stale":
                self._send_json({"error": f"request {request_id} is stale"}, status=409)
            else:
                self._send_json({"status": outcome})

    return Handler


def serve(annotator: QueueAnnotator, stats: EngineStats, port: int, static_dir=None):
    """Start the annotation API server; returns the server object."""
    handler = make_handler(annotator, stats, static_dir=static_dir)
    server = ThreadingHTTPServer(("0.0.0.0", port), handler)
    return server
