"""Synthetic score-page generator with full ground truth.

Renders pages that look enough like digitized manuscript scores to exercise
the whole pipeline: printed-style staff lines plus five parametric glyph
families (note heads, stem+head compounds, text-like stroke rows, soft
smudges, and border/bar segments). Every glyph's class, tight bounding box,
and ink mask are written alongside the page, so detection recall and
classifier accuracy can be measured without any human labels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imaging
from .errors import DataError
from .store import IRRELEVANT, RELEVANT, LabelTaxonomy

PAPER = 235

GLYPH_FAMILIES = [
    ("Note head", RELEVANT),
    ("Stemmed note", RELEVANT),
    ("Text row", IRRELEVANT),
    ("Smudge", IRRELEVANT),
    ("Bar segment", IRRELEVANT),
]


def synthetic_taxonomy(n_classes: int = 5) -> LabelTaxonomy:
    if not (2 <= n_classes <= len(GLYPH_FAMILIES)):
        raise DataError(f"n_classes must be in [2, {len(GLYPH_FAMILIES)}]")
    names = [n for n, _ in GLYPH_FAMILIES[:n_classes]]
    relevance = {n: r for n, r in GLYPH_FAMILIES[:n_classes]}
    return LabelTaxonomy.from_names(names, relevance)


@dataclass
class GroundTruthGlyph:
    page: str
    class_id: int
    class_name: str
    bbox: imaging.BoundingBox

    def to_dict(self):
        return {
            "page": self.page,
            "class_id": self.class_id,
            "class_name": self.class_name,
            "bbox": self.bbox.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["page"], int(d["class_id"]), d["class_name"], imaging.BoundingBox.from_dict(d["bbox"]))


def blank_page(height: int, width: int, paper: int = PAPER) -> np.ndarray:
    return np.full((height, width), paper, dtype=np.uint8)


def draw_staff_lines(page: np.ndarray, y_top: int, n_lines: int = 5, thickness: int = 3,
                     spacing: int = 18, intensity: int = 30) -> None:
    """Draw printed-style horizontal staff lines in place."""
    h, w = page.shape
    for i in range(n_lines):
        y0 = y_top + i * spacing
        y1 = min(h, y0 + thickness)
        if y0 >= h:
            break
        page[y0:y1, :] = intensity


def draw_ellipse(page: np.ndarray, cx: int, cy: int, rx: float, ry: float,
                 angle_deg: float = 0.0, intensity: int = 30) -> np.ndarray:
    """Filled rotated ellipse; returns the boolean ink mask it covered."""
    h, w = page.shape
    ys, xs = np.mgrid[0:h, 0:w]
    dx = xs - cx
    dy = ys - cy
    t = np.deg2rad(angle_deg)
    u = dx * np.cos(t) + dy * np.sin(t)
    v = -dx * np.sin(t) + dy * np.cos(t)
    mask = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    page[mask] = intensity
    return mask


def _draw_rect(page, x0, y0, x1, y1, intensity):
    h, w = page.shape
    x0, y0 = max(0, x0), max(0, y0)
    x1, y1 = min(w, x1), min(h, y1)
    mask = np.zeros(page.shape, dtype=bool)
    if x0 < x1 and y0 < y1:
        page[y0:y1, x0:x1] = intensity
        mask[y0:y1, x0:x1] = True
    return mask


def _glyph_note_head(page, rng, cx, cy):
    rx = rng.integers(12, 19)
    ry = rng.integers(9, 15)
    angle = rng.uniform(-30, 30)
    ink = int(rng.integers(15, 55))
    return draw_ellipse(page, cx, cy, rx, ry, angle, ink)


def _glyph_stemmed_note(page, rng, cx, cy):
    ink = int(rng.integers(15, 55))
    head = draw_ellipse(page, cx, cy, rng.integers(10, 15), rng.integers(8, 12), rng.uniform(-25, 25), ink)
    stem_h = int(rng.integers(36, 56))
    stem_w = int(rng.integers(3, 5))
    sx = cx + rng.integers(8, 13)
    stem = _draw_rect(page, sx, cy - stem_h, sx + stem_w, cy, ink)
    return head | stem


def _glyph_text_row(page, rng, cx, cy):
    ink = int(rng.integers(20, 60))
    n = int(rng.integers(5, 9))
    mask = np.zeros(page.shape, dtype=bool)
    x = cx - 26
    for _ in range(n):
        sw = int(rng.integers(2, 5))
        sh = int(rng.integers(10, 17))
        rise = int(rng.integers(-2, 3))
        mask |= _draw_rect(page, x, cy - sh // 2 + rise, x + sw, cy + sh - sh // 2 + rise, ink)
        x += sw + int(rng.integers(3, 7))
    return mask


def _glyph_smudge(page, rng, cx, cy):
    h, w = page.shape
    radius = float(rng.integers(14, 23))
    amp = float(rng.integers(120, 160))
    ys, xs = np.mgrid[0:h, 0:w]
    r2 = (xs - cx) ** 2.0 + (ys - cy) ** 2.0
    atten = amp * np.exp(-r2 / (2.0 * (radius / 1.6) ** 2))
    region = atten > 4
    vals = page.astype(np.float64)
    vals[region] = np.clip(vals[region] - atten[region], 0, 255)
    page[region] = vals[region].astype(np.uint8)
    return atten > 40


def _glyph_bar_segment(page, rng, cx, cy):
    ink = int(rng.integers(10, 45))
    bw = int(rng.integers(12, 19))
    bh = int(rng.integers(48, 70))
    return _draw_rect(page, cx - bw // 2, cy - bh // 2, cx + bw - bw // 2, cy + bh - bh // 2, ink)


_RENDERERS = [_glyph_note_head, _glyph_stemmed_note, _glyph_text_row, _glyph_smudge, _glyph_bar_segment]


def _mask_bbox(mask: np.ndarray) -> imaging.BoundingBox:
    ys, xs = np.nonzero(mask)
    return imaging.BoundingBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


@dataclass
class SyntheticCorpus:
    root: Path
    page_paths: list
    glyphs: list  # GroundTruthGlyph
    taxonomy: LabelTaxonomy

    def truth_by_page(self) -> dict:
        out = {}
        for g in self.glyphs:
            out.setdefault(g.page, []).append(g)
        return out


def generate_synthetic_corpus(
    out_dir,
    n_classes: int = 5,
    n_pages: int = 10,
    glyphs_per_page: int = 40,
    seed: int = 0,
    page_size: tuple = (1000, 700),
) -> SyntheticCorpus:
    """Render a corpus of staff pages plus ground truth into ``out_dir``.

    Output layout: pages/page-XXXX.png, truth/page-XXXX.json (glyph classes
    and tight boxes), truth/page-XXXX-mask.png (glyph ink, staff lines
    excluded), corpus.json (class list, page list, generation settings).
    Deterministic per seed, byte for byte.
    """
    out_dir = Path(out_dir)
    pages_dir = out_dir / "pages"
    truth_dir = out_dir / "truth"
    pages_dir.mkdir(parents=True, exist_ok=True)
    truth_dir.mkdir(parents=True, exist_ok=True)

    taxonomy = synthetic_taxonomy(n_classes)
    rng = np.random.default_rng(seed)
    height, width = page_size

    cell = 76
    margin = 48
    cols = (width - 2 * margin) // cell
    rows = (height - 2 * margin) // cell
    if cols * rows < glyphs_per_page:
        raise DataError(
            f"page {width}x{height} fits at most {cols * rows} glyphs, asked for {glyphs_per_page}"
        )

    page_paths = []
    glyphs = []
    glyph_counter = 0
    for p in range(n_pages):
        page_name = f"page-{p:04d}"
        page = blank_page(height, width)
        for y_top in range(90, height - 110, 240):
            draw_staff_lines(page, y_top, thickness=3, spacing=18, intensity=int(rng.integers(20, 45)))

        cells = [(r, c) for r in range(rows) for c in range(cols)]
        order = rng.permutation(len(cells))[:glyphs_per_page]
        mask_total = np.zeros(page.shape, dtype=bool)
        page_glyphs = []
        for k in order:
            r, c = cells[k]
            cx = margin + c * cell + cell // 2 + int(rng.integers(-8, 9))
            cy = margin + r * cell + cell // 2 + int(rng.integers(-8, 9))
            class_id = glyph_counter % n_classes
            glyph_counter += 1
            mask = _RENDERERS[class_id](page, rng, cx, cy)
            if not mask.any():
                continue
            mask_total |= mask
            page_glyphs.append(
                GroundTruthGlyph(
                    page=page_name,
                    class_id=class_id,
                    class_name=taxonomy.name_of(class_id),
                    bbox=_mask_bbox(mask),
                )
            )

        page_path = pages_dir / f"{page_name}.png"
        imaging.save_image(page, page_path)
        imaging.save_image(mask_total.astype(np.uint8) * 255, truth_dir / f"{page_name}-mask.png")
        (truth_dir / f"{page_name}.json").write_text(
            json.dumps({"page": page_name, "glyphs": [g.to_dict() for g in page_glyphs]},
                       sort_keys=True, indent=2) + "\n"
        )
        page_paths.append(page_path)
        glyphs.extend(page_glyphs)

    (out_dir / "corpus.json").write_text(
        json.dumps(
            {
                "classes": taxonomy.to_dict(),
                "pages": [p.name for p in page_paths],
                "n_pages": n_pages,
                "glyphs_per_page": glyphs_per_page,
                "seed": seed,
                "page_size": list(page_size),
            },
            sort_keys=True,
            indent=2,
        )
        + "\n"
    )
    return SyntheticCorpus(root=out_dir, page_paths=page_paths, glyphs=glyphs, taxonomy=taxonomy)


def load_corpus(root) -> SyntheticCorpus:
    root = Path(root)
    meta = json.loads((root / "corpus.json").read_text())
    taxonomy = LabelTaxonomy.from_dict(meta["classes"])
    page_paths = [root / "pages" / name for name in meta["pages"]]
    glyphs = []
    for path in sorted((root / "truth").glob("page-*.json")):
        data = json.loads(path.read_text())
        glyphs.extend(GroundTruthGlyph.from_dict(g) for g in data["glyphs"])
    return SyntheticCorpus(root=root, page_paths=page_paths, glyphs=glyphs, taxonomy=taxonomy)


def match_blobs_to_truth(blob_records, truth_glyphs) -> dict:
    """blob_id -> class_id of the max-overlap ground-truth glyph (if any)."""
    out = {}
    for br in blob_records:
        best_area = 0
        best = None
        for g in truth_glyphs:
            a = br.bbox.intersection_area(g.bbox)
            if a > best_area:
                best_area = a
                best = g
        if best is not None:
            out[br.blob_id] = best.class_id
    return out


def truth_recall(blob_records, truth_glyphs) -> float:
    """Fraction of ground-truth glyphs whose box meets at least one blob box."""
    if not truth_glyphs:
        return 1.0
    hit = 0
    for g in truth_glyphs:
        if any(br.bbox.intersection_area(g.bbox) > 0 for br in blob_records):
            hit += 1
    return hit / len(truth_glyphs)
