"""Annotation-quality analytics.

Covers the full quality loop over the control blobs: reference labels by
mode, Krippendorff's alpha (inter- and intra-annotator), the live
gamification score shown to annotators, and the two taxonomy-reduction
procedures (iterative merging of confusable classes, consolidation of rare
classes into "Remaining").

All computations are pure; callers pass a snapshot of the annotation log.
"""

from __future__ import annotations

import logging
from collections import Counter, defaultdict
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import AgreementError, StoreError
from .store import LabelTaxonomy

logger = logging.getLogger(__name__)

PER_ANNOTATOR = "per-annotator"
GLOBAL = "global"


class RatingsTable:
    """Items x raters, each cell holding zero or more label ids.

    Cells hold lists because cyclic annotation lets the same rater label the
    same item repeatedly; for intra-annotator analyses the "raters" are
    annotation cycles instead of people.
    """

    def __init__(self):
        self._cells = defaultdict(list)  # (item, rater) -> [label, ...]
        self._items = {}  # insertion-ordered set
        self._raters = {}

    def add(self, item, rater, label) -> None:
        self._items[item] = True
        self._raters[rater] = True
        self._cells[(item, rater)].append(label)

    @property
    def items(self) -> list:
        return list(self._items)

    @property
    def raters(self) -> list:
        return list(self._raters)

    def cell(self, item, rater) -> list:
        return list(self._cells.get((item, rater), []))

    def unit(self, item) -> list:
        """All ratings of one item, across raters and cycles."""
        out = []
        for rater in self._raters:
            out.extend(self._cells.get((item, rater), []))
        return out

    def rater_view(self, rater) -> "RatingsTable":
        """One rater's ratings re-keyed by annotation cycle (repeat index)."""
        view = RatingsTable()
        for item in self._items:
            for cycle, label in enumerate(self._cells.get((item, rater), [])):
                view.add(item, cycle, label)
        return view

    def collapse_to_modes(self) -> "RatingsTable":
        """One rating per cell: the mode, ties to the lowest label id."""
        out = RatingsTable()
        for item in self._items:
            for rater in self._raters:
                labels = self._cells.get((item, rater), [])
                if labels:
                    out.add(item, rater, _mode(labels))
        return out

    @classmethod
    def from_events(cls, events, control_ids=None) -> "RatingsTable":
        """Build from annotation events, optionally restricted to control blobs."""
        table = cls()
        control_ids = set(control_ids) if control_ids is not None else None
        for ev in events:
            if control_ids is not None and ev.blob_id not in control_ids:
                continue
            table.add(ev.blob_id, ev.annotator, ev.label_id)
        return table


def _mode(labels) -> int:
    counts = Counter(labels)
    top = max(counts.values())
    return min(label for label, c in counts.items() if c == top)


def reference_labels(table: RatingsTable, mode: str = GLOBAL) -> dict:
    """Modal label per item (global) or per (item, rater) (per-annotator).

    Ties break to the lowest class id. Items with no ratings in scope are
    skipped with a warning.
    """
    out = {}
    if mode == GLOBAL:
        for item in table.items:
            ratings = table.unit(item)
            if not ratings:
                logger.warning("reference_labels: item %r has no ratings, skipped", item)
                continue
            out[item] = _mode(ratings)
    elif mode == PER_ANNOTATOR:
        for item in table.items:
            any_rating = False
            for rater in table.raters:
                labels = table.cell(item, rater)
                if labels:
                    any_rating = True
                    out[(item, rater)] = _mode(labels)
            if not any_rating:
                logger.warning("reference_labels: item %r has no ratings, skipped", item)
    else:
        raise AgreementError(f"unknown mode {mode!r}")
    return out


def krippendorff_alpha(table: RatingsTable, metric: str = "nominal") -> float:
    """Nominal Krippendorff's alpha via the coincidence matrix.

    alpha = 1 - Do/De with Do the within-unit coincidence disagreement and
    De the marginal (chance) disagreement. Units with a single rating are
    unpairable and do not contribute. Zero expected disagreement (all
    ratings one class) is perfect agreement by definition, alpha = 1.
    """
    if metric != "nominal":
        raise AgreementError(f"only the nominal metric is supported, got {metric!r}")

    coincidence = defaultdict(float)
    marginals = defaultdict(float)
    n_total = 0.0
    pairable_units = 0
    for item in table.items:
        values = table.unit(item)
        m = len(values)
        if m < 2:
            continue
        pairable_units += 1
        n_total += m
        counts = Counter(values)
        for c, nc in counts.items():
            marginals[c] += nc
            for k, nk in counts.items():
                pairs = nc * (nc - 1) if c == k else nc * nk
                coincidence[(c, k)] += pairs / (m - 1)

    if pairable_units == 0:
        raise AgreementError("no pairable items (every item has fewer than 2 ratings)")

    observed = sum(v for (c, k), v in coincidence.items() if c != k) / n_total
    expected = sum(
        marginals[c] * marginals[k]
        for c in marginals
        for k in marginals
        if c != k
    ) / (n_total * (n_total - 1.0))
    if expected == 0.0:
        return 1.0
    return 1.0 - observed / expected


def inter_annotator_alpha(table: RatingsTable) -> float:
    """Alpha over per-annotator reference labels (mode of each rater's repeats)."""
    return krippendorff_alpha(table.collapse_to_modes())


def intra_annotator_alpha(table: RatingsTable, rater) -> float:
    """Alpha of one rater against themself across annotation cycles."""
    return krippendorff_alpha(table.rater_view(rater))


@dataclass
class GamificationScore:
    """Mean of the defined components; score is None when neither is defined."""

    score: float | None
    intra: float | None
    inter: float | None


def _spearman(x, y) -> float | None:
    if len(x) < 2:
        return None
    if len(set(x)) < 2 or len(set(y)) < 2:
        return None
    rho = stats.spearmanr(x, y).statistic
    if np.isnan(rho):
        return None
    return float(rho)


def gamification_score(annotator, events, control_ids) -> GamificationScore:
    """Live quality score for one annotator, from control-blob ratings.

    Intra component: Spearman correlation over consecutive repeat ratings of
    the same control blobs (label ids as ordinal codes). Inter component:
    Spearman correlation between the annotator's per-item mean code and the
    per-item mean of everything stored in the log for that item. Undefined
    components are dropped; with neither defined the score is None
    ("insufficient data").
    """
    control_ids = set(control_ids)
    mine = defaultdict(list)  # item -> [codes in log order]
    everyone = defaultdict(list)
    for ev in events:
        if ev.blob_id not in control_ids:
            continue
        everyone[ev.blob_id].append(ev.label_id)
        if ev.annotator == annotator:
            mine[ev.blob_id].append(ev.label_id)

    first, second = [], []
    for item in sorted(mine):
        codes = mine[item]
        for a, b in zip(codes, codes[1:]):
            first.append(a)
            second.append(b)
    intra = _spearman(first, second)

    items = sorted(item for item in mine if everyone[item])
    my_means = [float(np.mean(mine[i])) for i in items]
    db_means = [float(np.mean(everyone[i])) for i in items]
    inter = _spearman(my_means, db_means)

    parts = [p for p in (intra, inter) if p is not None]
    score = float(np.mean(parts)) if parts else None
    return GamificationScore(score=score, intra=intra, inter=inter)


@dataclass
class ConfusionMatrix:
    """Square count matrix: rows = reference class, columns = annotated class."""

    counts: np.ndarray
    class_ids: list

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.float64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise AgreementError(f"confusion matrix must be square, got {self.counts.shape}")
        if self.counts.shape[0] != len(self.class_ids):
            raise AgreementError("class id list does not match matrix dimensions")
        if (self.counts < 0).any():
            raise AgreementError("confusion counts must be non-negative")

    @classmethod
    def from_labels(cls, reference: dict, annotated_pairs, class_ids) -> "ConfusionMatrix":
        """Build from item->reference labels and (item, annotated label) pairs."""
        index = {c: i for i, c in enumerate(class_ids)}
        counts = np.zeros((len(class_ids), len(class_ids)))
        for item, label in annotated_pairs:
            if item not in reference:
                continue
            counts[index[reference[item]], index[label]] += 1
        return cls(counts=counts, class_ids=list(class_ids))

    def normalized_by_row_max(self) -> np.ndarray:
        """Each row divided by its own maximum (not the diagonal: covers rows
        where annotators are on-average wrong). All-zero rows stay zero."""
        out = np.zeros_like(self.counts)
        for r in range(self.counts.shape[0]):
            m = self.counts[r].max()
            if m > 0:
                out[r] = self.counts[r] / m
        return out


def merge_confusable_classes(
    cm: ConfusionMatrix, taxonomy: LabelTaxonomy, threshold: float = 0.5
):
    """Iteratively merge classes the annotators confuse.

    Each pass normalizes every row by its maximum and folds any column class
    whose off-diagonal normalized value exceeds ``threshold`` into the row's
    (reference) class; rows/columns of merged classes are summed and the
    pass repeats until nothing merges. Terminates in at most K-1 merging
    passes since every merging pass strictly reduces the class count.

    Returns (new taxonomy, ordered merge log, number of passes).
    """
    tax = taxonomy.copy()
    counts = cm.counts.copy()
    ids = list(cm.class_ids)
    merge_log = []
    passes = 0

    while True:
        passes += 1
        k = len(ids)
        work = ConfusionMatrix(counts, ids)
        norm = work.normalized_by_row_max()
        parent = list(range(k))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        merged_any = False
        for r in range(k):
            for c in range(k):
                if r == c or norm[r, c] <= threshold:
                    continue
                root_target = find(r)
                root_source = find(c)
                if root_source == root_target:
                    continue
                parent[root_source] = root_target
                merged_any = True
                ev = tax.merge(
                    [ids[root_source]],
                    ids[root_target],
                    f"normalized confusion {norm[r, c]:.3f} > {threshold}",
                )
                merge_log.append(ev)

        if not merged_any:
            break

        groups = {}
        for i in range(k):
            groups.setdefault(find(i), []).append(i)
        roots = sorted(groups, key=lambda r: ids[r])
        new_counts = np.zeros((len(roots), len(roots)))
        for a, ra in enumerate(roots):
            rows = counts[groups[ra]].sum(axis=0)
            for b, rb in enumerate(roots):
                new_counts[a, b] = rows[groups[rb]].sum()
        counts = new_counts
        ids = [ids[r] for r in roots]

    return tax, merge_log, passes


def merge_rare_classes(
    class_counts: dict, taxonomy: LabelTaxonomy, factor: float = 0.75,
    merged_name: str = "Remaining",
):
    """Fold classes with fewer than factor x median-count samples into one.

    The median is the lower median of the pre-merge counts, computed once.
    Returns (new taxonomy, merge event or None).
    """
    tax = taxonomy.copy()
    if not class_counts:
        raise AgreementError("merge_rare_classes: no class counts given")
    values = sorted(class_counts.values())
    median = values[(len(values) - 1) // 2]
    cutoff = factor * median
    rare = sorted(c for c, n in class_counts.items() if n < cutoff)
    if not rare:
        return tax, None

    relevances = [tax.binary_label(c) for c in rare]
    majority = Counter(relevances).most_common()
    top = max(n for _, n in majority)
    relevance = sorted(r for r, n in majority if n == top)[-1]  # tie -> "relevant"
    new_id = tax.add_class(merged_name, relevance)
    ev = tax.merge(rare, new_id, f"cardinality below {factor} x median ({cutoff:g})")
    return tax, ev


def to_binary(taxonomy: LabelTaxonomy, labels) -> list:
    """Relabel every annotation as relevant/irrelevant via the binary map."""
    out = []
    for label in labels:
        if label not in taxonomy.known_ids():
            raise StoreError(f"label {label} not in taxonomy")
        out.append(taxonomy.binary_label(label))
    return out


def build_agreement_report(events, control_ids, taxonomy: LabelTaxonomy, merge_threshold: float = 0.5):
    """Inter/intra alpha plus the confusable-merge outcome, as one dict.

    Only control-cycle annotations enter the analysis; ordinary curation
    labels that happen to touch a control blob are not agreement evidence.
    """
    events = [ev for ev in events if ev.is_control]
    table = RatingsTable.from_events(events, control_ids)
    report = {"n_control_items": len(table.items), "n_annotators": len(table.raters)}
    try:
        report["inter_alpha"] = inter_annotator_alpha(table)
    except AgreementError as e:
        report["inter_alpha"] = None
        report["inter_alpha_note"] = str(e)
    intra = {}
    for rater in table.raters:
        try:
            intra[str(rater)] = intra_annotator_alpha(table, rater)
        except AgreementError:
            intra[str(rater)] = None
    report["intra_alpha"] = intra

    reference = reference_labels(table, GLOBAL)
    pairs = [(item, label) for item in table.items for label in table.unit(item)]
    resolved_ids = sorted({taxonomy.resolve(c) for c in taxonomy.ids()})
    cm = ConfusionMatrix.from_labels(
        {i: taxonomy.resolve(l) for i, l in reference.items()},
        [(i, taxonomy.resolve(l)) for i, l in pairs],
        resolved_ids,
    )
    merged_tax, merge_log, passes = merge_confusable_classes(cm, taxonomy, merge_threshold)
    report["merge_log"] = [ev.to_dict() for ev in merge_log]
    report["merge_passes"] = passes
    report["classes_before"] = len(taxonomy)
    report["classes_after"] = len(merged_tax)
    report["final_classes"] = [
        {"id": c.class_id, "name": c.name, "relevance": c.relevance} for c in merged_tax.classes()
    ]
    return report, merged_tax
