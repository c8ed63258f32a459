"""HTTP service backing the human annotation workflow.

Dispenses one task at a time per annotator, injecting a control blob with
20% probability; persists labels to the append-only annotations.jsonl log;
recomputes the gamification score on control submissions. All state other
than soft dispensing preferences is rebuilt from the log on startup, so a
crash between submissions loses nothing.

Control tasks are indistinguishable from regular ones in the client
payload: ``is_control`` never leaves the server.
"""

from __future__ import annotations

import io
import logging
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import agreement, imaging
from .errors import DataError, StoreError
from .store import AnnotationEvent, BlobRecord, DatasetStore

logger = logging.getLogger(__name__)

CONTROL_PROB = 0.2
CONTEXT_MARGIN = 2.0


class ServiceError(DataError):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


@dataclass
class AnnotatorState:
    annotator_id: str
    completed: int
    control_encounters: int
    score: float | None

    def to_dict(self):
        return {
            "annotator_id": self.annotator_id,
            "completed": self.completed,
            "control_encounters": self.control_encounters,
            "score": self.score,
        }


@dataclass
class AnnotationTask:
    blob_id: str
    crop_url: str
    context_url: str
    original_url: str
    taxonomy: list  # [{id, name}], current snapshot
    done: bool = False

    def to_dict(self):
        return {
            "done": self.done,
            "blob_id": self.blob_id,
            "crop_url": self.crop_url,
            "context_url": self.context_url,
            "original_url": self.original_url,
            "taxonomy": self.taxonomy,
        }


DONE_TASK = AnnotationTask(blob_id="", crop_url="", context_url="", original_url="", taxonomy=[], done=True)


def context_excerpt(store: DatasetStore, blob: BlobRecord, margin_factor: float = CONTEXT_MARGIN) -> np.ndarray:
    """Region of the parent page around the blob with its box drawn on.

    The excerpt extends margin_factor x the box dimensions on each side
    (clipped to the page); the box outline is a 2-px frame of intensity 0
    drawn just outside the box, on a copy.
    """
    page_path = store.nostaff_path(blob.parent_page_id)
    if not page_path.exists():
        raise StoreError(f"missing parent image for blob {blob.blob_id}")
    page = imaging.load_image(page_path)
    h, w = page.shape
    box = blob.bbox
    mx = int(round(margin_factor * box.width))
    my = int(round(margin_factor * box.height))
    x0 = max(0, box.x0 - mx)
    y0 = max(0, box.y0 - my)
    x1 = min(w, box.x1 + mx)
    y1 = min(h, box.y1 + my)
    out = page[y0:y1, x0:x1].copy()

    bx0, by0 = box.x0 - x0, box.y0 - y0
    bx1, by1 = box.x1 - x0, box.y1 - y0
    eh, ew = out.shape
    for t in (1, 2):
        top, bot = by0 - t, by1 - 1 + t
        left, right = bx0 - t, bx1 - 1 + t
        xs = slice(max(0, left), min(ew, right + 1))
        if 0 <= top < eh:
            out[top, xs] = 0
        if 0 <= bot < eh:
            out[bot, xs] = 0
        ys = slice(max(0, top), min(eh, bot + 1))
        if 0 <= left < ew:
            out[ys, left] = 0
        if 0 <= right < ew:
            out[ys, right] = 0
    return out


class AnnotationService:
    """Task dispensing + label persistence over one dataset store.

    One writer process; all mutating calls serialize on an internal lock.
    """

    def __init__(self, store: DatasetStore, control_ids=None, seed: int = 0,
                 control_prob: float = CONTROL_PROB):
        self.store = store
        self.taxonomy = store.taxonomy
        self.control_ids = [b for b in (control_ids or []) if store.has_blob(b)]
        self.control_prob = control_prob
        self.rng = np.random.default_rng(seed)
        self._lock = threading.Lock()

        self._control_set = set(self.control_ids)
        self._fifo = [b for b in store.blob_ids() if b not in self._control_set]
        self._open = {}  # annotator -> blob_id
        self._last_done = {}  # annotator -> blob_id
        self._seq = 0
        self._last_seen = {}  # annotator -> {control blob -> seq}
        self._completed = {}
        self._control_encounters = {}
        self._labeled = set()
        self._score_cache = {}
        self._replay_log()

    def _replay_log(self):
        for ev in self.store.annotations():
            self._completed[ev.annotator] = self._completed.get(ev.annotator, 0) + 1
            if ev.blob_id in self._control_set or ev.is_control:
                self._control_encounters[ev.annotator] = self._control_encounters.get(ev.annotator, 0) + 1
            if ev.blob_id not in self._control_set:
                self._labeled.add(ev.blob_id)
            self._last_done[ev.annotator] = ev.blob_id

    # -- dispensing -----------------------------------------------------------

    def _next_regular(self, annotator: str):
        open_blob = self._open.get(annotator)
        for b in self._fifo:
            if b not in self._labeled and b != open_blob:
                return b
        return None

    def _next_control(self, annotator: str):
        open_blob = self._open.get(annotator)
        candidates = [b for b in self.control_ids if b != open_blob]
        if not candidates:
            return None
        seen = self._last_seen.setdefault(annotator, {})
        least = min(seen.get(b, -1) for b in candidates)
        pool = [b for b in candidates if seen.get(b, -1) == least]
        return pool[int(self.rng.integers(0, len(pool)))]

    def next_task(self, annotator: str) -> AnnotationTask:
        with self._lock:
            regular = self._next_regular(annotator)
            blob_id = None
            if self.control_ids and (regular is None or self.rng.random() < self.control_prob):
                blob_id = self._next_control(annotator)
            if blob_id is None:
                blob_id = regular
            if blob_id is None:
                return DONE_TASK

            self._seq += 1
            self._open[annotator] = blob_id
            if blob_id in self._control_set:
                self._last_seen.setdefault(annotator, {})[blob_id] = self._seq

            blob = self.store.blob(blob_id)
            return AnnotationTask(
                blob_id=blob_id,
                crop_url=f"/api/image/crop:{blob_id}",
                context_url=f"/api/image/context:{blob_id}",
                original_url=f"/api/image/page:{blob.parent_page_id}",
                taxonomy=[{"id": c.class_id, "name": c.name} for c in self.taxonomy.classes()],
            )

    # -- submission -----------------------------------------------------------

    def submit_label(self, annotator: str, blob_id: str, label_id: int) -> AnnotatorState:
        with self._lock:
            if not self.store.has_blob(blob_id):
                raise ServiceError(404, "unknown_blob", f"no blob {blob_id}")
            if label_id not in {c.class_id for c in self.taxonomy.classes()}:
                raise ServiceError(422, "unknown_label", f"label {label_id} not in current taxonomy")
            if self._open.get(annotator) != blob_id:
                if self._last_done.get(annotator) == blob_id:
                    return self._state(annotator)  # duplicate submission: idempotent no-op
                raise ServiceError(409, "no_open_task", f"annotator {annotator} has no open task for {blob_id}")

            is_control = blob_id in self._control_set
            event = AnnotationEvent(
                annotator=annotator, blob_id=blob_id, label_id=int(label_id),
                ts=time.time(), is_control=is_control,
            )
            self.store.append_annotation(event)
            self._completed[annotator] = self._completed.get(annotator, 0) + 1
            if is_control:
                self._control_encounters[annotator] = self._control_encounters.get(annotator, 0) + 1
                self._score_cache.pop(annotator, None)
            else:
                self._labeled.add(blob_id)
            del self._open[annotator]
            self._last_done[annotator] = blob_id
            return self._state(annotator)

    def _score(self, annotator: str) -> float | None:
        if annotator not in self._score_cache:
            result = agreement.gamification_score(annotator, self.store.annotations(), self._control_set)
            self._score_cache[annotator] = result.score
        return self._score_cache[annotator]

    def _state(self, annotator: str) -> AnnotatorState:
        return AnnotatorState(
            annotator_id=annotator,
            completed=self._completed.get(annotator, 0),
            control_encounters=self._control_encounters.get(annotator, 0),
            score=self._score(annotator),
        )

    def state(self, annotator: str) -> AnnotatorState:
        with self._lock:
            return self._state(annotator)

    # -- images ---------------------------------------------------------------

    def image_png(self, image_id: str) -> bytes:
        try:
            kind, _, item = image_id.partition(":")
            if kind == "crop":
                arr = imaging.load_image(Path(self.store.blob(item).crop_path))
            elif kind == "context":
                arr = context_excerpt(self.store, self.store.blob(item))
            elif kind == "nostaff":
                arr = imaging.load_image(self.store.nostaff_path(item))
            elif kind == "page":
                arr = imaging.load_image(self.store.page(item).original_path)
            else:
                raise ServiceError(404, "unknown_image", f"unknown image kind {kind!r}")
        except StoreError as e:
            raise ServiceError(404, "unknown_image", str(e)) from e
        buf = io.BytesIO()
        Image.fromarray(arr, mode="L").save(buf, format="PNG")
        return buf.getvalue()


def create_app(service: AnnotationService):
    """FastAPI wrapper exposing the JSON API documented in docs/api.md."""
    from fastapi import FastAPI
    from fastapi.responses import JSONResponse, Response

    app = FastAPI(title="scoreblobs annotation service")
    app.state.service = service

    @app.exception_handler(ServiceError)
    async def service_error(request, exc: ServiceError):
        return JSONResponse(status_code=exc.status, content={"code": exc.code, "message": exc.message})

    @app.get("/api/task")
    def get_task(annotator: str):
        return service.next_task(annotator).to_dict()

    @app.get("/api/taxonomy")
    def get_taxonomy():
        return {"classes": [{"id": c.class_id, "name": c.name} for c in service.taxonomy.classes()]}

    @app.get("/api/score")
    def get_score(annotator: str):
        return service.state(annotator).to_dict()

    @app.post("/api/annotations")
    def post_annotation(body: dict):
        for key in ("annotator", "blob_id", "label_id"):
            if key not in body:
                raise ServiceError(400, "bad_request", f"missing field {key!r}")
        state = service.submit_label(str(body["annotator"]), str(body["blob_id"]), int(body["label_id"]))
        return state.to_dict()

    @app.get("/api/image/{image_id}")
    def get_image(image_id: str):
        return Response(content=service.image_png(image_id), media_type="image/png")

    return app
