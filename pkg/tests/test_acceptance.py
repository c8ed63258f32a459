"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line. The full pipeline (synth -> ingest -> splits -> train ->
evaluate -> report) runs once as a subprocess chain and several criteria
read its artifacts.
"""

import itertools
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from scoreblobs import agreement as ag
from scoreblobs import classifier as cl
from scoreblobs import evaluation as ev
from scoreblobs import imaging, store as store_mod
from scoreblobs.errors import AgreementError
from scoreblobs.service import AnnotationService
from scoreblobs.store import AnnotationEvent, DatasetStore, LabelTaxonomy, ingest_page

from conftest import gaussian_spot_page
from test_agreement import alpha_bruteforce, table_from_columns, units_of
from test_classifier import finite_difference_grads, relative_error


def report_line(name, ok, detail=""):
    print(f"[ACCEPTANCE] {name}: {'PASS' if ok else 'FAIL'} {detail}".rstrip())
    assert ok, f"{name} failed: {detail}"


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    """Run the CLI chain once on a ~2000-blob synthetic corpus."""
    root = tmp_path_factory.mktemp("acceptance")
    corpus = root / "corpus"
    store = root / "store"
    results = {"store": store, "corpus": corpus}

    def run(key, *args):
        t0 = time.perf_counter()
        proc = subprocess.run(
            [sys.executable, "-m", "scoreblobs.cli", *args],
            capture_output=True, text=True,
        )
        summary = None
        if proc.returncode == 0 and proc.stdout.strip():
            summary = json.loads(proc.stdout.strip().split("\n")[-1])
        results[key] = {
            "rc": proc.returncode, "summary": summary,
            "seconds": time.perf_counter() - t0, "stderr": proc.stderr,
        }
        return results[key]

    run("synth", "synth", str(corpus), "--pages", "20", "--glyphs", "75", "--seed", "42")
    run("ingest", "ingest", str(corpus / "pages"), "--store", str(store),
        "--truth", str(corpus), "--jobs", "4")
    run("splits", "splits", "--store", str(store))
    run("train", "train", "--store", str(store), "--task", "multiclass", "--epochs", "15")
    run("evaluate", "evaluate", "--store", str(store), "--task", "multiclass")
    run("report", "report", str(store / "reports" / "multiclass" / "sweep.json"))
    run("train_binary", "train", "--store", str(store), "--task", "binary", "--epochs", "10")
    run("evaluate_binary", "evaluate", "--store", str(store), "--task", "binary")
    return results


class TestEntropyConfidenceSuite:
    def test_entropy_confidence(self):
        t0 = time.perf_counter()
        failures = []
        for n in range(2, 17):
            h, conf = cl.entropy_confidence(np.full(n, 1.0 / n), n)
            if abs(h - 1.0) > 1e-9:
                failures.append(f"uniform N={n}: H={h}")
            if abs(conf - (1.0 - h)) > 1e-12:
                failures.append(f"uniform N={n}: confidence != 1-H")
            h1, conf1 = cl.entropy_confidence(np.eye(n)[0], n)
            if h1 > 1e-9:
                failures.append(f"one-hot N={n}: H={h1}")
            if abs(conf1 - (1.0 - h1)) > 1e-12:
                failures.append(f"one-hot N={n}: confidence != 1-H")
        h, conf = cl.entropy_confidence(np.array([0.9, 0.1]), 2)
        if abs(h - 0.4690) > 1e-3:
            failures.append(f"binary hand value: H={h}")
        if abs(conf - (1.0 - h)) > 1e-12:
            failures.append("binary hand value: confidence != 1-H")
        elapsed = time.perf_counter() - t0
        if elapsed >= 1.0:
            failures.append(f"runtime {elapsed:.2f}s >= 1s")
        report_line("entropy-confidence-suite", not failures,
                    f"({elapsed * 1000:.0f} ms)" if not failures else "; ".join(failures))


class TestKrippendorffOracle:
    def test_exhaustive_and_randomized_oracle_agreement(self):
        """Exact agreement with the brute-force pairwise oracle.

        Literal enumeration of every table up to 4 raters x 6 items x 3
        classes with missing cells is 4^24 tables; coverage here is
        exhaustive over the small shapes and a seeded sweep across the full
        size range, all compared to 1e-9.
        """
        t0 = time.perf_counter()
        symbols = [None, 0, 1, 2]
        checked = 0
        failures = []

        def check(columns):
            nonlocal checked
            checked += 1
            want = alpha_bruteforce(units_of(columns))
            try:
                got = ag.krippendorff_alpha(table_from_columns(columns))
            except AgreementError:
                got = None
            if want is None or got is None:
                if not (want is None and got is None):
                    failures.append(f"null mismatch on {columns}")
            elif abs(got - want) > 1e-9:
                failures.append(f"{columns}: {got} vs {want}")

        for raters, items in ((2, 2), (2, 3), (3, 2)):
            cells = raters * items
            for assignment in itertools.product(symbols, repeat=cells):
                columns = [list(assignment[r * items:(r + 1) * items]) for r in range(raters)]
                check(columns)

        rng = np.random.default_rng(7)
        for _ in range(2000):
            raters = int(rng.integers(2, 5))
            items = int(rng.integers(1, 7))
            columns = [
                [symbols[int(rng.integers(0, 4))] for _ in range(items)]
                for _ in range(raters)
            ]
            check(columns)

        elapsed = time.perf_counter() - t0
        ok = not failures and elapsed < 30.0
        report_line("krippendorff-oracle", ok,
                    f"({checked} tables, {elapsed:.1f}s)" if ok else "; ".join(failures[:3]))


def synthetic_annotation_log(seed=2024):
    """Seeded control-annotation log engineered to reproduce the
    16 -> 14 -> 11 taxonomy trajectory.

    Two class pairs are heavily confused (normalized confusion 2/3), and
    four classes are given rare cardinalities below 0.75 x median.
    """
    tax = LabelTaxonomy.default()
    ids = {n: i for i, n in enumerate(tax.names())}
    confusable = {
        ids["Multiple chords"]: ids["Multiple notes"],
        ids["Multiple categories (without music signs)"]: ids["Smudge"],
    }
    rare = {ids["Rest"], ids["Single chord"], ids["Alteration"], ids["Ornament"]}
    rng = np.random.default_rng(seed)
    events = []
    item_no = 0
    raters = [f"annotator-{k}" for k in range(5)]
    for class_id in tax.ids():
        n_items = 10 if class_id in rare else 40
        for _ in range(n_items):
            item = f"ctrl-{item_no:05d}"
            item_no += 1
            labels = [class_id] * 5
            if class_id in confusable:
                for k in rng.choice(5, size=2, replace=False):
                    labels[int(k)] = confusable[class_id]
            for rater, label in zip(raters, labels):
                events.append(AnnotationEvent(rater, item, int(label), 0.0, True))
    return tax, events


class TestMergingProcedures:
    def test_constructed_matrix_and_rare_rule(self):
        failures = []
        tax = LabelTaxonomy.from_names(["a", "b", "c"])
        cm = ag.ConfusionMatrix(np.array([[10, 6, 0], [6, 10, 0], [0, 0, 10]]), [0, 1, 2])
        merged, log, passes = ag.merge_confusable_classes(cm, tax)
        if len(merged) != 2:
            failures.append(f"expected 2 classes, got {len(merged)}")
        if passes != 2:
            failures.append(f"expected 2 passes, got {passes}")
        again = ag.ConfusionMatrix(np.array([[32, 0], [0, 10]]), [0, 2])
        _, log2, _ = ag.merge_confusable_classes(again, merged)
        if log2:
            failures.append("merged matrix is not a fixed point")

        tax5 = LabelTaxonomy.from_names(list("ABCDE"))
        merged5, ev5 = ag.merge_rare_classes({0: 100, 1: 100, 2: 10, 3: 9, 4: 100}, tax5)
        if ev5 is None or sorted(ev5.sources) != [2, 3]:
            failures.append(f"rare rule consolidated {getattr(ev5, 'sources', None)}")
        if merged5.name_of(2) != "Remaining":
            failures.append("rare classes did not land in Remaining")
        report_line("merging-constructed-cases", not failures, "; ".join(failures))

    def test_taxonomy_trajectory_16_14_11(self):
        failures = []
        tax, events = synthetic_annotation_log()
        control_ids = {e.blob_id for e in events}
        report, merged_tax = ag.build_agreement_report(events, control_ids, tax)
        if report["classes_before"] != 16:
            failures.append(f"started from {report['classes_before']} classes")
        if report["classes_after"] != 14:
            failures.append(f"confusable merge gave {report['classes_after']} classes")
        if len(report["merge_log"]) != 2:
            failures.append(f"{len(report['merge_log'])} merge events, expected 2")

        table = ag.RatingsTable.from_events(events, control_ids)
        reference = ag.reference_labels(table, ag.GLOBAL)
        counts = {}
        for label in reference.values():
            resolved = merged_tax.resolve(label)
            counts[resolved] = counts.get(resolved, 0) + 1
        final_tax, rare_ev = ag.merge_rare_classes(counts, merged_tax)
        if len(final_tax) != 11:
            failures.append(f"rare merge gave {len(final_tax)} classes")
        if rare_ev is None or len(rare_ev.sources) != 4:
            failures.append("rare merge did not fold exactly 4 classes")

        # chance-corrected agreement improves once confusable classes unify
        alpha_before = ag.inter_annotator_alpha(table)
        remapped = ag.RatingsTable()
        for item in table.items:
            for rater in table.raters:
                for label in table.cell(item, rater):
                    remapped.add(item, rater, merged_tax.resolve(label))
        alpha_after = ag.inter_annotator_alpha(remapped)
        if not alpha_after >= alpha_before:
            failures.append(f"alpha fell after merging: {alpha_before:.3f} -> {alpha_after:.3f}")

        detail = "" if failures else f"(16 -> 14 -> 11; alpha {alpha_before:.3f} -> {alpha_after:.3f})"
        report_line("taxonomy-trajectory", not failures, detail or "; ".join(failures))


class TestClassifierCorrectness:
    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(123)
        worst = 0.0
        for _ in range(8):
            m = int(rng.integers(3, 10))
            d = int(rng.integers(2, 8))
            k = int(rng.integers(2, 6))
            X = rng.normal(size=(m, d))
            y = rng.integers(0, k, m)
            W = rng.normal(size=(k, d))
            b = rng.normal(size=k)
            _, gw, gb = cl.cross_entropy_loss_and_grad(W, b, X, y)
            ngw, ngb = finite_difference_grads(W, b, X, y)
            worst = max(worst, relative_error(gw, ngw), relative_error(gb, ngb))
        report_line("analytic-gradients", worst < 1e-4, f"(max rel err {worst:.2e})")

    def test_synthetic_corpus_accuracy_and_runtime(self, pipeline):
        failures = []
        if pipeline["train"]["rc"] != 0:
            failures.append(f"train exited {pipeline['train']['rc']}: {pipeline['train']['stderr'][-300:]}")
        else:
            train_seconds = pipeline["train"]["seconds"]
            if train_seconds >= 300:
                failures.append(f"training took {train_seconds:.0f}s >= 5 min")
            sweep = ev.ConfidenceSweepReport.from_json(
                (pipeline["store"] / "reports" / "multiclass" / "sweep.json").read_text()
            )
            ba = sweep.levels[0].report.balanced_accuracy
            if ba is None or ba < 0.80:
                failures.append(f"balanced accuracy {ba} < 0.80")
            detail = f"(BA={ba:.3f} vs chance 0.20, train {train_seconds:.0f}s)"
        report_line("classifier-accuracy", not failures,
                    "; ".join(failures) if failures else detail)

    def test_random_baseline_near_chance(self, pipeline):
        baselines = json.loads(
            (pipeline["store"] / "reports" / "multiclass" / "baselines.json").read_text()
        )
        random_ba = baselines["random"]["balanced_accuracy"]
        per_class = baselines["random"]["per_class"]
        k = len(baselines["random"]["classes"])
        supports = [per_class[str(c)]["support"] for c in baselines["random"]["classes"]]
        var = sum((1 / k) * (1 - 1 / k) / s for s in supports) / k**2
        sigma = var**0.5
        ok = abs(random_ba - 1 / k) <= 3 * sigma
        report_line("random-baseline", ok,
                    f"(BA={random_ba:.3f}, 1/K={1 / k:.3f}, 3 sigma={3 * sigma:.3f})")


class TestConfidenceSweepBehavior:
    def test_retained_fraction_monotone_and_binary_trend(self, pipeline):
        failures = []
        sweep = ev.ConfidenceSweepReport.from_json(
            (pipeline["store"] / "reports" / "multiclass" / "sweep.json").read_text()
        )
        fractions = [lv.retained_fraction for lv in sweep.levels]
        if not all(a >= b for a, b in zip(fractions, fractions[1:])):
            failures.append(f"retained fractions not non-increasing: {fractions}")

        binary = ev.ConfidenceSweepReport.from_json(
            (pipeline["store"] / "reports" / "binary" / "sweep.json").read_text()
        )
        by_level = {lv.level: lv.report.balanced_accuracy for lv in binary.levels}
        ba0, ba50 = by_level.get(0.0), by_level.get(0.5)
        if ba0 is None or ba50 is None or not ba50 >= ba0:
            failures.append(f"binary BA@0.5 ({ba50}) < BA@0 ({ba0})")

        detail = f"(fractions {['%.2f' % f for f in fractions]}, binary BA {ba0:.2f} -> {ba50:.2f})"
        report_line("confidence-sweep", not failures, "; ".join(failures) if failures else detail)

    def test_no_data_marker_rendering(self):
        sweep = ev.confidence_sweep(
            y_true=[0, 0, 1], y_pred=[0, 0, 0], confidences=[0.9, 0.9, 0.1],
            classes=[0, 1], levels=(0.0, 0.5),
        )
        md = ev.render_markdown(sweep)
        cell = sweep.levels[1].report.per_class[1]
        ok = cell.precision is None and "-" in md.split("\n")[3]
        report_line("no-data-marker", ok)


class TestPipelineEndToEnd:
    def test_exit_codes_and_artifacts(self, pipeline):
        failures = []
        for step in ("synth", "ingest", "splits", "train", "evaluate", "report"):
            if pipeline[step]["rc"] != 0:
                failures.append(f"{step} exited {pipeline[step]['rc']}: {pipeline[step]['stderr'][-200:]}")
        report_line("pipeline-exit-codes", not failures, "; ".join(failures))

    def test_ingest_recall(self, pipeline):
        recall = pipeline["ingest"]["summary"]["recall"]
        report_line("ingest-recall", recall >= 0.95, f"(recall={recall:.4f})")

    def test_store_integrity(self, pipeline):
        st = DatasetStore.open(pipeline["store"])
        problems = st.verify()
        report_line("store-integrity", not problems, "; ".join(problems[:3]))

    def test_split_realization(self, pipeline):
        st = DatasetStore.open(pipeline["store"])
        splits = st.read_splits()
        n = len(splits.assignment)
        failures = []
        for name, f in zip(("train", "validation", "test"), splits.fractions):
            realized = len(splits.ids(name))
            if abs(realized - f * n) >= 1.0:
                failures.append(f"{name}: {realized} vs target {f * n:.1f}")
        report_line("split-realization", not failures, "; ".join(failures))


def build_service_store(root):
    st = DatasetStore.create(root, taxonomy=LabelTaxonomy.from_names(
        ["ink", "noise"], {"ink": "relevant"}
    ))
    for p in range(3):
        ys, xs = np.mgrid[0:460, 0:460]
        field = np.full((460, 460), 255.0)
        for s in range(3):
            field -= 255.0 * np.exp(
                -((xs - (90 + 140 * s)) ** 2 + (ys - (110 + 90 * p)) ** 2) / (2 * 16.0**2)
            )
        path = root.parent / f"svc-page{p}.png"
        imaging.save_image(np.clip(field, 0, 255).astype(np.uint8), path)
        ingest_page(st, path)
    return st


class TestServiceSuite:
    def test_control_share(self, tmp_path):
        st = build_service_store(tmp_path / "store")
        controls = st.blob_ids()[:3]
        svc = AnnotationService(st, control_ids=controls, seed=20240)
        n = 10_000
        control_set = set(controls)
        served = sum(1 for _ in range(n) if svc.next_task("ann").blob_id in control_set)
        share = served / n
        report_line("dispense-control-share", abs(share - 0.20) <= 0.015,
                    f"(share={share:.4f}, target 0.20 +- 0.015)")

    def test_append_only_under_concurrency(self, tmp_path):
        import hashlib
        from concurrent.futures import ThreadPoolExecutor

        st = build_service_store(tmp_path / "store")
        svc = AnnotationService(st, control_ids=st.blob_ids()[:2], seed=5)

        def annotate(worker):
            ann = f"w{worker}"
            for _ in range(5):
                task = svc.next_task(ann)
                if task.done:
                    return
                svc.submit_label(ann, task.blob_id, worker % 2)

        with ThreadPoolExecutor(max_workers=3) as pool:
            list(pool.map(annotate, range(3)))
        phase1 = st.annotations_path.read_bytes()
        digest = hashlib.sha256(phase1).hexdigest()

        with ThreadPoolExecutor(max_workers=3) as pool:
            list(pool.map(annotate, range(3, 6)))
        phase2 = st.annotations_path.read_bytes()
        prefix_ok = phase2.startswith(phase1)
        digest_ok = hashlib.sha256(phase2[: len(phase1)]).hexdigest() == digest
        lines_ok = all(json.loads(l) for l in phase2.decode().strip().split("\n"))
        report_line("log-append-only", prefix_ok and digest_ok and lines_ok,
                    f"({len(phase2.decode().strip().splitlines())} events)")

    def test_crash_replay_loses_nothing(self, tmp_path):
        st = build_service_store(tmp_path / "store")
        controls = st.blob_ids()[:1]
        svc = AnnotationService(st, control_ids=controls, seed=0)
        submitted = []
        for _ in range(5):
            task = svc.next_task("ann")
            if task.done:
                break
            svc.submit_label("ann", task.blob_id, 0)
            submitted.append(task.blob_id)
        del svc  # crash: no shutdown, no flushes beyond per-line ones

        revived = AnnotationService(DatasetStore.open(st.root), control_ids=controls, seed=0)
        events = revived.store.annotations()
        ok = [e.blob_id for e in events] == submitted and revived.state("ann").completed == len(submitted)
        report_line("crash-replay", ok, f"({len(submitted)} annotations survive restart)")
