"""The inter-referencing JSON database of pages, blobs, labels, and splits.

Layout of a store directory:

    manifest.json           index: schema version, page ids, taxonomy
    pages/<page_id>.json    one record per page
    blobs/<blob_id>.json    one record per blob
    images/nostaff/<page_id>.png
    images/crops/<blob_id>.png
    annotations.jsonl       append-only label event log
    splits.json             blob_id -> train/validation/test

All JSON writes are atomic (temp file + rename) and key-sorted, so
re-ingesting the same inputs reproduces byte-identical records. One process
writes; any number may read.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imaging
from .errors import StoreError
from .imaging import BoundingBox, DogConfig

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1

RELEVANT = "relevant"
IRRELEVANT = "irrelevant"

# The working class roster for manuscript blobs. IDs are stable forever;
# merges only ever alias old ids to a surviving class.
DEFAULT_CLASSES = [
    ("Page border", IRRELEVANT),
    ("Erasure", IRRELEVANT),
    ("Smudge", IRRELEVANT),
    ("Printed text", IRRELEVANT),
    ("Handwritten text", IRRELEVANT),
    ("Rest", RELEVANT),
    ("Single note", RELEVANT),
    ("Multiple notes", RELEVANT),
    ("Single chord", RELEVANT),
    ("Multiple chords", RELEVANT),
    ("Alteration", RELEVANT),
    ("Clef", RELEVANT),
    ("Ornament", RELEVANT),
    ("Multiple categories (with music signs)", RELEVANT),
    ("Multiple categories (without music signs)", IRRELEVANT),
    ("Other (without music signs)", IRRELEVANT),
]


@dataclass
class ClassDef:
    class_id: int
    name: str
    relevance: str  # RELEVANT | IRRELEVANT


@dataclass
class MergeEvent:
    sources: list  # class ids folded away
    target: int  # surviving (or newly created) class id
    reason: str

    def to_dict(self):
        return {"sources": list(self.sources), "target": self.target, "reason": self.reason}

    @classmethod
    def from_dict(cls, d):
        return cls(sources=[int(s) for s in d["sources"]], target=int(d["target"]), reason=str(d["reason"]))


class LabelTaxonomy:
    """Ordered class list with stable ids, a merge history, and a binary view.

    Merging never deletes knowledge: source ids stay resolvable through
    ``resolve`` and keep their own relevance in the binary map.
    """

    def __init__(self, classes, merge_history=None, initial_classes=None):
        self._classes = {c.class_id: c for c in classes}
        self._order = [c.class_id for c in classes]
        self.merge_history = list(merge_history or [])
        self._initial = list(initial_classes if initial_classes is not None else classes)
        self._alias = {}
        for ev in self.merge_history:
            for s in ev.sources:
                self._alias[s] = ev.target
        self._check_replay()

    # -- construction -------------------------------------------------------

    @classmethod
    def default(cls) -> "LabelTaxonomy":
        return cls([ClassDef(i, name, rel) for i, (name, rel) in enumerate(DEFAULT_CLASSES)])

    @classmethod
    def from_names(cls, names, relevance=None) -> "LabelTaxonomy":
        relevance = relevance or {}
        return cls([ClassDef(i, n, relevance.get(n, IRRELEVANT)) for i, n in enumerate(names)])

    def copy(self) -> "LabelTaxonomy":
        return LabelTaxonomy(
            [ClassDef(c.class_id, c.name, c.relevance) for c in self.classes()],
            merge_history=[MergeEvent(list(e.sources), e.target, e.reason) for e in self.merge_history],
            initial_classes=[ClassDef(c.class_id, c.name, c.relevance) for c in self._initial],
        )

    # -- queries ------------------------------------------------------------

    def classes(self) -> list:
        return [self._classes[i] for i in self._order]

    def ids(self) -> list:
        return list(self._order)

    def names(self) -> list:
        return [self._classes[i].name for i in self._order]

    def name_of(self, class_id: int) -> str:
        return self._classes[self.resolve(class_id)].name

    def __len__(self):
        return len(self._order)

    def __contains__(self, class_id):
        return class_id in self._classes

    def resolve(self, class_id: int) -> int:
        """Follow merge aliases to the surviving class id."""
        seen = set()
        while class_id in self._alias:
            if class_id in seen:
                raise StoreError(f"alias cycle at class {class_id}")
            seen.add(class_id)
            class_id = self._alias[class_id]
        if class_id not in self._classes:
            raise StoreError(f"unknown class id {class_id}")
        return class_id

    def known_ids(self) -> set:
        return set(self._classes) | set(self._alias)

    def binary_label(self, class_id: int) -> str:
        """Relevance of a label, preferring the class's own pre-merge value."""
        for c in self._initial:
            if c.class_id == class_id:
                return c.relevance
        return self._classes[self.resolve(class_id)].relevance

    # -- mutation -----------------------------------------------------------

    def add_class(self, name: str, relevance: str) -> int:
        new_id = max(self.known_ids(), default=-1) + 1
        self._classes[new_id] = ClassDef(new_id, name, relevance)
        self._order.append(new_id)
        return new_id

    def merge(self, sources, target: int, reason: str) -> MergeEvent:
        target = self.resolve(target)
        sources = [self.resolve(s) for s in sources]
        sources = [s for s in dict.fromkeys(sources) if s != target]
        if not sources:
            raise StoreError("merge with no effective sources")
        for s in sources:
            self._alias[s] = target
            del self._classes[s]
            self._order.remove(s)
        ev = MergeEvent(sources=sources, target=target, reason=reason)
        self.merge_history.append(ev)
        return ev

    # -- invariants / io ----------------------------------------------------

    def _check_replay(self):
        ids = {c.class_id for c in self._initial}
        for ev in self.merge_history:
            if ev.target not in ids:
                ids.add(ev.target)  # a merge may create its target (e.g. "Remaining")
            for s in ev.sources:
                if s not in ids:
                    raise StoreError(f"merge history references unknown class {s}")
                ids.discard(s)
        if ids != set(self._order):
            raise StoreError("merge history does not replay to the current class list")

    def to_dict(self) -> dict:
        return {
            "classes": [
                {"id": c.class_id, "name": c.name, "relevance": c.relevance} for c in self.classes()
            ],
            "initial_classes": [
                {"id": c.class_id, "name": c.name, "relevance": c.relevance} for c in self._initial
            ],
            "merge_history": [ev.to_dict() for ev in self.merge_history],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LabelTaxonomy":
        def defs(rows):
            return [ClassDef(int(r["id"]), str(r["name"]), str(r["relevance"])) for r in rows]

        return cls(
            defs(d["classes"]),
            merge_history=[MergeEvent.from_dict(e) for e in d.get("merge_history", [])],
            initial_classes=defs(d.get("initial_classes", d["classes"])),
        )


@dataclass
class PageRecord:
    page_id: str
    original_path: str
    nostaff_path: str
    blob_refs: list

    def to_dict(self):
        return {
            "page_id": self.page_id,
            "original_path": self.original_path,
            "nostaff_path": self.nostaff_path,
            "blob_refs": list(self.blob_refs),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["page_id"], d["original_path"], d["nostaff_path"], list(d["blob_refs"]))


@dataclass
class BlobRecord:
    blob_id: str
    parent_page_id: str
    bbox: BoundingBox
    crop_path: str

    def to_dict(self):
        return {
            "blob_id": self.blob_id,
            "parent_page_id": self.parent_page_id,
            "bbox": self.bbox.to_dict(),
            "crop_path": self.crop_path,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["blob_id"], d["parent_page_id"], BoundingBox.from_dict(d["bbox"]), d["crop_path"])


@dataclass
class AnnotationEvent:
    annotator: str
    blob_id: str
    label_id: int
    ts: float
    is_control: bool

    def to_dict(self):
        return {
            "annotator": self.annotator,
            "blob_id": self.blob_id,
            "label_id": self.label_id,
            "ts": self.ts,
            "is_control": self.is_control,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(str(d["annotator"]), str(d["blob_id"]), int(d["label_id"]), float(d["ts"]), bool(d["is_control"]))


TRAIN, VALIDATION, TEST = "train", "validation", "test"
SPLIT_NAMES = (TRAIN, VALIDATION, TEST)


@dataclass
class SplitAssignment:
    assignment: dict  # blob_id -> split name
    fractions: tuple
    seed: int

    def ids(self, split: str) -> list:
        return [b for b, s in self.assignment.items() if s == split]

    def to_dict(self):
        return {
            "fractions": list(self.fractions),
            "seed": self.seed,
            "assignment": dict(self.assignment),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(dict(d["assignment"]), tuple(d["fractions"]), int(d["seed"]))


def _atomic_write_text(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


class DatasetStore:
    def __init__(self, root):
        self.root = Path(root)
        self.pages_dir = self.root / "pages"
        self.blobs_dir = self.root / "blobs"
        self.nostaff_dir = self.root / "images" / "nostaff"
        self.crops_dir = self.root / "images" / "crops"
        self.manifest_path = self.root / "manifest.json"
        self.annotations_path = self.root / "annotations.jsonl"
        self.splits_path = self.root / "splits.json"
        self._manifest = None
        self._write_lock = threading.Lock()  # one writer process; threads serialize here

    # -- lifecycle ----------------------------------------------------------

    @classmethod
    def create(cls, root, taxonomy: LabelTaxonomy | None = None) -> "DatasetStore":
        store = cls(root)
        for d in (store.pages_dir, store.blobs_dir, store.nostaff_dir, store.crops_dir):
            d.mkdir(parents=True, exist_ok=True)
        store._manifest = {
            "version": MANIFEST_VERSION,
            "pages": [],
            "taxonomy": (taxonomy or LabelTaxonomy.default()).to_dict(),
        }
        store._write_manifest()
        return store

    @classmethod
    def open(cls, root) -> "DatasetStore":
        store = cls(root)
        if not store.manifest_path.exists():
            raise StoreError(f"no store at {root} (missing manifest.json)")
        store._manifest = json.loads(store.manifest_path.read_text())
        return store

    def _write_manifest(self):
        _atomic_write_text(self.manifest_path, _dump(self._manifest))

    @property
    def taxonomy(self) -> LabelTaxonomy:
        return LabelTaxonomy.from_dict(self._manifest["taxonomy"])

    def set_taxonomy(self, taxonomy: LabelTaxonomy):
        self._manifest["taxonomy"] = taxonomy.to_dict()
        self._write_manifest()

    # -- records ------------------------------------------------------------

    def page_ids(self) -> list:
        return list(self._manifest["pages"])

    def page(self, page_id: str) -> PageRecord:
        path = self.pages_dir / f"{page_id}.json"
        if not path.exists():
            raise StoreError(f"unknown page {page_id}")
        return PageRecord.from_dict(json.loads(path.read_text()))

    def blob(self, blob_id: str) -> BlobRecord:
        path = self.blobs_dir / f"{blob_id}.json"
        if not path.exists():
            raise StoreError(f"unknown blob {blob_id}")
        return BlobRecord.from_dict(json.loads(path.read_text()))

    def has_blob(self, blob_id: str) -> bool:
        return (self.blobs_dir / f"{blob_id}.json").exists()

    def blob_ids(self) -> list:
        """All blob ids in manifest page order (the dispensing FIFO order)."""
        out = []
        for pid in self.page_ids():
            out.extend(self.page(pid).blob_refs)
        return out

    def add_page(self, record: PageRecord, blob_records: list):
        for br in blob_records:
            _atomic_write_text(self.blobs_dir / f"{br.blob_id}.json", _dump(br.to_dict()))
        _atomic_write_text(self.pages_dir / f"{record.page_id}.json", _dump(record.to_dict()))
        with self._write_lock:
            if record.page_id not in self._manifest["pages"]:
                self._manifest["pages"].append(record.page_id)
            self._write_manifest()

    def crop_path(self, blob_id: str) -> Path:
        return self.crops_dir / f"{blob_id}.png"

    def nostaff_path(self, page_id: str) -> Path:
        return self.nostaff_dir / f"{page_id}.png"

    # -- annotations --------------------------------------------------------

    def append_annotation(self, event: AnnotationEvent) -> None:
        line = json.dumps(event.to_dict(), sort_keys=True) + "\n"
        with self._write_lock:
            with open(self.annotations_path, "a", encoding="utf-8") as f:
                f.write(line)
                f.flush()

    def annotations(self) -> list:
        if not self.annotations_path.exists():
            return []
        events = []
        with open(self.annotations_path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if line:
                    events.append(AnnotationEvent.from_dict(json.loads(line)))
        return events

    def consensus_labels(self, events=None) -> dict:
        """blob_id -> modal label id (ties to the lowest id), aliases resolved."""
        from collections import Counter

        events = self.annotations() if events is None else events
        tax = self.taxonomy
        by_blob = {}
        for ev in events:
            by_blob.setdefault(ev.blob_id, []).append(tax.resolve(ev.label_id))
        out = {}
        for blob_id, labels in by_blob.items():
            counts = Counter(labels)
            best = max(counts.items(), key=lambda kv: (kv[1], -kv[0]))
            out[blob_id] = best[0]
        return out

    # -- splits ---------------------------------------------------------------

    def write_splits(self, splits: SplitAssignment) -> None:
        _atomic_write_text(self.splits_path, _dump(splits.to_dict()))

    def read_splits(self) -> SplitAssignment:
        if not self.splits_path.exists():
            raise StoreError(f"no splits.json in {self.root}")
        return SplitAssignment.from_dict(json.loads(self.splits_path.read_text()))

    # -- integrity ------------------------------------------------------------

    def verify(self) -> list:
        """Referential-integrity pass; returns a list of problems (empty = ok)."""
        problems = []
        seen_blob_ids = set()
        for pid in self.page_ids():
            try:
                page = self.page(pid)
            except StoreError as e:
                problems.append(str(e))
                continue
            nostaff = Path(page.nostaff_path)
            if not nostaff.exists():
                problems.append(f"page {pid}: missing nostaff image {page.nostaff_path}")
                continue
            ns = imaging.load_image(nostaff)
            orig = Path(page.original_path)
            if orig.exists():
                o = imaging.load_image(orig)
                if o.shape != ns.shape:
                    problems.append(f"page {pid}: nostaff dims {ns.shape} != original {o.shape}")
            else:
                problems.append(f"page {pid}: missing original image {page.original_path}")
            h, w = ns.shape
            for bid in page.blob_refs:
                seen_blob_ids.add(bid)
                try:
                    blob = self.blob(bid)
                except StoreError as e:
                    problems.append(f"page {pid}: {e}")
                    continue
                if blob.parent_page_id != pid:
                    problems.append(f"blob {bid}: parent {blob.parent_page_id} != page {pid}")
                if blob.bbox.x1 > w or blob.bbox.y1 > h:
                    problems.append(f"blob {bid}: bbox outside page bounds")
                cpath = Path(blob.crop_path)
                if not cpath.exists():
                    problems.append(f"blob {bid}: missing crop {blob.crop_path}")
                else:
                    c = imaging.load_image(cpath)
                    if c.shape != (blob.bbox.height, blob.bbox.width):
                        problems.append(f"blob {bid}: crop dims {c.shape} != bbox")
        for path in self.blobs_dir.glob("*.json"):
            if path.stem not in seen_blob_ids:
                problems.append(f"orphan blob record {path.stem}")
        return problems


def _page_id_for(path) -> str:
    digest = hashlib.sha1(str(path).encode("utf-8")).hexdigest()[:10]
    return f"{Path(path).stem}-{digest}"


def _blob_id_for(page_id: str, blob, box: BoundingBox) -> str:
    key = f"{page_id}:{blob.cx},{blob.cy},{blob.sigma:.4f}:{box.x0},{box.y0},{box.x1},{box.y1}"
    return hashlib.sha1(key.encode("utf-8")).hexdigest()[:16]


def ingest_page(
    store: DatasetStore,
    original_path,
    dog_cfg: DogConfig = DogConfig(),
    line_thickness="auto",
) -> PageRecord:
    """Staff-strip, detect, crop, and record one page.

    Deterministic per (path, config): re-running overwrites the same records
    byte for byte. Pages with no detectable blobs yield an empty blob list.
    """
    original_path = Path(original_path)
    page = imaging.load_image(original_path)
    page_id = _page_id_for(original_path)

    nostaff = imaging.remove_staff_lines(page, line_thickness)
    nostaff_path = store.nostaff_path(page_id)
    imaging.save_image(nostaff, nostaff_path)

    blobs = imaging.detect_blobs(nostaff, dog_cfg)
    blob_records = []
    seen = set()
    for b in blobs:
        box = imaging.blob_to_bbox(b, nostaff)
        bid = _blob_id_for(page_id, b, box)
        if bid in seen:
            continue
        seen.add(bid)
        crop = imaging.rescale_intensity(imaging.crop(nostaff, box))
        crop_path = store.crop_path(bid)
        imaging.save_image(crop, crop_path)
        blob_records.append(
            BlobRecord(blob_id=bid, parent_page_id=page_id, bbox=box, crop_path=str(crop_path))
        )

    record = PageRecord(
        page_id=page_id,
        original_path=str(original_path),
        nostaff_path=str(nostaff_path),
        blob_refs=[br.blob_id for br in blob_records],
    )
    store.add_page(record, blob_records)
    return record


def assign_splits(
    blob_ids,
    fractions=(0.68, 0.17, 0.15),
    seed: int = 0,
    stratify_by_label: bool = False,
    labels: dict | None = None,
) -> SplitAssignment:
    """Deterministic shuffled partition into train/validation/test.

    Split sizes follow the largest-remainder rule, so each realized count is
    within one sample of its target. Under stratification the same rule is
    applied per class; classes with three or fewer samples go entirely to
    train (too small to spread over three splits) with a warning.
    """
    blob_ids = list(blob_ids)
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise StoreError(f"split fractions must sum to 1, got {fractions}")
    if len(fractions) != 3:
        raise StoreError("expected exactly three split fractions")
    rng = np.random.default_rng(seed)

    def partition(ids):
        ids = list(ids)
        order = rng.permutation(len(ids))
        shuffled = [ids[i] for i in order]
        n = len(ids)
        counts = [int(np.floor(f * n)) for f in fractions]
        remainders = [f * n - c for f, c in zip(fractions, counts)]
        for i in np.argsort(remainders)[::-1][: n - sum(counts)]:
            counts[i] += 1
        out = {}
        pos = 0
        for split, c in zip(SPLIT_NAMES, counts):
            for b in shuffled[pos : pos + c]:
                out[b] = split
            pos += c
        return out

    if not stratify_by_label:
        assignment = partition(blob_ids)
    else:
        if labels is None:
            raise StoreError("stratified splits require labels")
        by_class = {}
        for b in blob_ids:
            by_class.setdefault(labels[b], []).append(b)
        assignment = {}
        for cls in sorted(by_class):
            members = by_class[cls]
            if len(members) <= 3:
                logger.warning(
                    "class %s has only %d samples; keeping all of them in train", cls, len(members)
                )
                assignment.update({b: TRAIN for b in members})
            else:
                assignment.update(partition(members))
    return SplitAssignment(assignment=assignment, fractions=tuple(fractions), seed=seed)


def balanced_subsample(labels: dict, seed: int = 0) -> list:
    """Sample every class down to the smallest class's count, uniformly.

    ``labels`` maps blob_id -> label. The result contains exactly
    n = min class count ids per class, deterministic per seed.
    """
    if not labels:
        raise StoreError("balanced_subsample: empty label set")
    by_class = {}
    for blob_id in sorted(labels):
        by_class.setdefault(labels[blob_id], []).append(blob_id)
    n = min(len(v) for v in by_class.values())
    rng = np.random.default_rng(seed)
    out = []
    for cls in sorted(by_class):
        members = by_class[cls]
        picked = rng.choice(len(members), size=n, replace=False)
        out.extend(members[i] for i in sorted(picked))
    return out


def record_annotation(store: DatasetStore, annotator: str, blob_id: str, label_id: int, is_control: bool = False) -> AnnotationEvent:
    event = AnnotationEvent(
        annotator=annotator, blob_id=blob_id, label_id=label_id, ts=time.time(), is_control=is_control
    )
    store.append_annotation(event)
    return event
