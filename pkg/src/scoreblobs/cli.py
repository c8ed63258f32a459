"""Command-line pipeline: synth, ingest, splits, serve, agreement,
merge-classes, train, evaluate, report.

Every command ends by printing one machine-readable JSON summary line on
stdout and writes its effective configuration next to its outputs. Exit
codes: 0 success, 1 usage error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import json
import logging
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import agreement as agreement_mod
from . import classifier as classifier_mod
from . import evaluation, imaging, store as store_mod, synth as synth_mod
from .config import load_config, write_effective_config
from .errors import DataError
from .store import TRAIN, VALIDATION, TEST, DatasetStore

logger = logging.getLogger(__name__)

BINARY_CLASS_IDS = {store_mod.IRRELEVANT: 0, store_mod.RELEVANT: 1}

IMAGE_SUFFIXES = (".png", ".tif", ".tiff")


def _summary(payload: dict) -> None:
    click.echo(json.dumps(payload, sort_keys=True))


def _open_store(path) -> DatasetStore:
    return DatasetStore.open(path)


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="YAML pipeline configuration; flags override file values.")
@click.pass_context
def cli(ctx, config_path):
    """Symbol-dataset curation and confidence-aware classification pipeline."""
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path


def _cfg(ctx, **overrides):
    return load_config(ctx.obj.get("config_path"), overrides=overrides)


@cli.command()
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--classes", default=5, show_default=True)
@click.option("--pages", default=10, show_default=True)
@click.option("--glyphs", default=40, show_default=True, help="Glyphs per page.")
@click.option("--seed", default=0, show_default=True)
@click.pass_context
def synth(ctx, out_dir, classes, pages, glyphs, seed):
    """Generate a synthetic score corpus with ground truth."""
    cfg = _cfg(ctx)
    corpus = synth_mod.generate_synthetic_corpus(
        out_dir, n_classes=classes, n_pages=pages, glyphs_per_page=glyphs, seed=seed
    )
    write_effective_config(cfg, Path(out_dir) / "synth.config.yaml")
    _summary({
        "command": "synth", "out_dir": str(out_dir), "pages": len(corpus.page_paths),
        "glyphs": len(corpus.glyphs), "classes": len(corpus.taxonomy), "seed": seed,
    })


@cli.command()
@click.argument("pages_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--store", "store_path", default=None, help="Store directory (default from config).")
@click.option("--truth", "truth_dir", type=click.Path(exists=True, file_okay=False), default=None,
              help="Ground-truth directory; when given, detected blobs are auto-labeled.")
@click.option("--jobs", default=4, show_default=True, help="Parallel page workers.")
@click.pass_context
def ingest(ctx, pages_dir, store_path, truth_dir, jobs):
    """Run staff removal + blob extraction over a directory of page images."""
    cfg = _cfg(ctx, store=store_path)
    pages = sorted(p for p in Path(pages_dir).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not pages:
        raise DataError(f"no input pages in {pages_dir}")

    store_root = Path(cfg.store)
    taxonomy = None
    if truth_dir is not None:
        corpus = synth_mod.load_corpus(Path(truth_dir).parent if Path(truth_dir).name == "truth" else truth_dir)
        taxonomy = corpus.taxonomy
    st = DatasetStore.create(store_root, taxonomy=taxonomy)

    # Image work runs in parallel inside one process (the single writer);
    # records land on disjoint paths, the manifest is finalized afterwards.
    records = []
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        def one(path):
            return store_mod.ingest_page(st, path, cfg.dog, cfg.staff_line_thickness)
        for rec in pool.map(one, pages):
            records.append(rec)
    # Rewrite the manifest page list in input order (thread completion order
    # may differ).
    st._manifest["pages"] = [store_mod._page_id_for(p) for p in pages]
    st._write_manifest()

    summary = {
        "command": "ingest", "store": str(store_root), "pages": len(records),
        "blobs": sum(len(r.blob_refs) for r in records),
    }

    if truth_dir is not None:
        blob_records = [st.blob(b) for b in st.blob_ids()]
        by_page = {}
        for g in corpus.glyphs:
            by_page.setdefault(g.page, []).append(g)
        labeled = 0
        hits = 0
        total = 0
        for path in pages:
            pid = store_mod._page_id_for(path)
            rec = st.page(pid)
            truth = by_page.get(path.stem, [])
            page_blobs = [st.blob(b) for b in rec.blob_refs]
            matches = synth_mod.match_blobs_to_truth(page_blobs, truth)
            for blob_id, class_id in matches.items():
                store_mod.record_annotation(st, "truth", blob_id, class_id, is_control=False)
                labeled += 1
            total += len(truth)
            hits += sum(
                1 for g in truth
                if any(br.bbox.intersection_area(g.bbox) > 0 for br in page_blobs)
            )
        summary["labeled"] = labeled
        summary["truth_glyphs"] = total
        summary["recall"] = round(hits / total, 4) if total else 1.0

    problems = st.verify()
    summary["integrity"] = "ok" if not problems else f"{len(problems)} problems"
    if problems:
        for p in problems[:10]:
            click.echo(f"integrity: {p}", err=True)
    write_effective_config(cfg, store_root / "ingest.config.yaml")
    _summary(summary)


@cli.command()
@click.option("--store", "store_path", default=None)
@click.option("--seed", default=None, type=int)
@click.option("--stratify/--no-stratify", default=None)
@click.pass_context
def splits(ctx, store_path, seed, stratify):
    """Assign blobs to train/validation/test."""
    cfg = _cfg(ctx, store=store_path, **{"splits.seed": seed, "splits.stratify": stratify})
    st = _open_store(cfg.store)
    blob_ids = st.blob_ids()
    if not blob_ids:
        raise DataError("store has no blobs; run ingest first")
    labels = st.consensus_labels() if cfg.splits.stratify else None
    if cfg.splits.stratify:
        blob_ids = [b for b in blob_ids if b in labels]
    assignment = store_mod.assign_splits(
        blob_ids, cfg.splits.fractions, cfg.splits.seed,
        stratify_by_label=cfg.splits.stratify, labels=labels,
    )
    st.write_splits(assignment)
    write_effective_config(cfg, Path(cfg.store) / "splits.config.yaml")
    sizes = {name: len(assignment.ids(name)) for name in (TRAIN, VALIDATION, TEST)}
    _summary({"command": "splits", "store": cfg.store, "sizes": sizes, "seed": cfg.splits.seed,
              "stratified": cfg.splits.stratify})


@cli.command()
@click.option("--store", "store_path", default=None)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8077, show_default=True)
@click.option("--control-count", default=0, show_default=True,
              help="Sample this many control blobs (persisted in controls.json).")
@click.option("--seed", default=0, show_default=True)
@click.pass_context
def serve(ctx, store_path, host, port, control_count, seed):
    """Start the annotation HTTP service."""
    import uvicorn

    from .service import AnnotationService, create_app

    cfg = _cfg(ctx, store=store_path)
    st = _open_store(cfg.store)
    controls_path = Path(cfg.store) / "controls.json"
    if controls_path.exists():
        control_ids = json.loads(controls_path.read_text())
    elif control_count > 0:
        rng = np.random.default_rng(seed)
        pool = st.blob_ids()
        take = min(control_count, len(pool))
        control_ids = [pool[i] for i in sorted(rng.choice(len(pool), size=take, replace=False))]
        controls_path.write_text(json.dumps(control_ids, indent=2) + "\n")
    else:
        control_ids = []
    service = AnnotationService(st, control_ids=control_ids, seed=seed)
    app = create_app(service)
    write_effective_config(cfg, Path(cfg.store) / "serve.config.yaml")
    uvicorn.run(app, host=host, port=port, log_level="warning")
    _summary({"command": "serve", "store": cfg.store, "controls": len(control_ids)})


@cli.command()
@click.option("--store", "store_path", default=None)
@click.option("--out", "out_dir", default=None, help="Report directory (default <store>/reports).")
@click.pass_context
def agreement(ctx, store_path, out_dir):
    """Compute inter/intra agreement and the confusable-class merge report."""
    cfg = _cfg(ctx, store=store_path)
    st = _open_store(cfg.store)
    events = st.annotations()
    control_ids = {ev.blob_id for ev in events if ev.is_control}
    if not control_ids:
        raise DataError("no control annotations in the log; nothing to analyze")
    report, merged_tax = agreement_mod.build_agreement_report(
        events, control_ids, st.taxonomy, cfg.merge_threshold
    )
    out = Path(out_dir) if out_dir else Path(cfg.store) / "reports"
    out.mkdir(parents=True, exist_ok=True)
    (out / "agreement.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    (out / "agreement.txt").write_text(_agreement_text(report))
    write_effective_config(cfg, out / "agreement.config.yaml")
    _summary({
        "command": "agreement", "inter_alpha": report["inter_alpha"],
        "classes_before": report["classes_before"], "classes_after": report["classes_after"],
        "merge_passes": report["merge_passes"], "out": str(out / "agreement.json"),
    })


def _agreement_text(report: dict) -> str:
    lines = ["Annotation agreement report", "=" * 29, ""]
    inter = report["inter_alpha"]
    lines.append(f"Control items: {report['n_control_items']}, annotators: {report['n_annotators']}")
    lines.append(f"Inter-annotator alpha: {inter:.3f}" if inter is not None else "Inter-annotator alpha: n/a")
    intra = {k: v for k, v in report["intra_alpha"].items() if v is not None}
    if intra:
        lo, hi = min(intra.values()), max(intra.values())
        lines.append(f"Intra-annotator alpha: {lo:.3f} .. {hi:.3f} over {len(intra)} annotators")
        for name in sorted(intra):
            lines.append(f"  {name}: {intra[name]:.3f}")
    else:
        lines.append("Intra-annotator alpha: n/a (no repeated control ratings)")
    lines.append("")
    lines.append(f"Class merging: {report['classes_before']} -> {report['classes_after']} classes "
                 f"in {report['merge_passes']} passes")
    for ev in report["merge_log"]:
        lines.append(f"  merged {ev['sources']} into {ev['target']}: {ev['reason']}")
    lines.append("")
    lines.append("Final classes:")
    for c in report["final_classes"]:
        lines.append(f"  [{c['id']:3d}] {c['name']} ({c['relevance']})")
    return "\n".join(lines) + "\n"


@cli.command("merge-classes")
@click.option("--store", "store_path", default=None)
@click.pass_context
def merge_classes(ctx, store_path):
    """Apply confusable-class and rare-class merges to the store taxonomy."""
    cfg = _cfg(ctx, store=store_path)
    st = _open_store(cfg.store)
    events = st.annotations()
    control_ids = {ev.blob_id for ev in events if ev.is_control}
    tax = st.taxonomy
    before = len(tax)

    if control_ids:
        _, tax = agreement_mod.build_agreement_report(events, control_ids, tax, cfg.merge_threshold)
    after_confusable = len(tax)

    labels = st.consensus_labels(events)
    resolved = [tax.resolve(l) for l in labels.values()]
    counts = {c: resolved.count(c) for c in {tax.resolve(i) for i in tax.ids()}}
    if counts:
        tax, _ = agreement_mod.merge_rare_classes(counts, tax, cfg.rare_factor)
    st.set_taxonomy(tax)
    write_effective_config(cfg, Path(cfg.store) / "merge-classes.config.yaml")
    _summary({
        "command": "merge-classes", "classes_before": before,
        "classes_after_confusable": after_confusable, "classes_after": len(tax),
    })


def _task_labels(st: DatasetStore, task: str) -> dict:
    labels = st.consensus_labels()
    if task == "binary":
        tax = st.taxonomy
        return {b: BINARY_CLASS_IDS[tax.binary_label(l)] for b, l in labels.items()}
    return labels


def _task_names(st: DatasetStore, task: str) -> dict:
    if task == "binary":
        return {v: k for k, v in BINARY_CLASS_IDS.items()}
    return {c.class_id: c.name for c in st.taxonomy.classes()}


@cli.command()
@click.option("--store", "store_path", default=None)
@click.option("--task", type=click.Choice(["multiclass", "binary"]), default="multiclass", show_default=True)
@click.option("--epochs", default=None, type=int, help="Override train.epochs_max.")
@click.option("--seed", default=None, type=int, help="Override train.seed.")
@click.option("--model-out", default=None, help="Checkpoint path (default <store>/models/<task>.json).")
@click.pass_context
def train(ctx, store_path, task, epochs, seed, model_out):
    """Fit the classifier on the balanced subsample of the train split."""
    cfg = _cfg(ctx, store=store_path, **{"train.epochs_max": epochs, "train.seed": seed})
    st = _open_store(cfg.store)
    splits = st.read_splits()
    labels = _task_labels(st, task)
    names = _task_names(st, task)

    train_ids = [b for b in splits.ids(TRAIN) if b in labels]
    val_ids = [b for b in splits.ids(VALIDATION) if b in labels]
    if not train_ids:
        raise DataError("no labeled blobs in the train split")
    # Balanced training and validation sets; the test split stays imbalanced.
    train_ids = store_mod.balanced_subsample({b: labels[b] for b in train_ids}, cfg.splits.seed)
    if val_ids:
        val_ids = store_mod.balanced_subsample({b: labels[b] for b in val_ids}, cfg.splits.seed)

    train_items = [(imaging.load_image(st.crop_path(b)), labels[b]) for b in train_ids]
    val_items = [(imaging.load_image(st.crop_path(b)), labels[b]) for b in val_ids]

    model, curve = classifier_mod.train(
        train_items, val_items, cfg.train, cfg.augment, cfg.features, class_names=names
    )
    out_path = Path(model_out) if model_out else Path(cfg.store) / "models" / f"{task}.json"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    model.save(out_path)
    (out_path.with_suffix(".curve.json")).write_text(
        json.dumps(curve.to_dict(), sort_keys=True, indent=2) + "\n"
    )
    write_effective_config(cfg, out_path.parent / f"train-{task}.config.yaml")
    _summary({
        "command": "train", "task": task, "model": str(out_path),
        "train_size": len(train_items), "val_size": len(val_items),
        "classes": model.n_classes, "epochs_run": model.metadata["epochs_run"],
        "best_val_loss": model.metadata["best_val_loss"],
    })


@cli.command()
@click.option("--store", "store_path", default=None)
@click.option("--task", type=click.Choice(["multiclass", "binary"]), default="multiclass", show_default=True)
@click.option("--model", "model_path", default=None)
@click.option("--out", "out_dir", default=None, help="Report directory (default <store>/reports/<task>).")
@click.pass_context
def evaluate(ctx, store_path, task, model_path, out_dir):
    """Confidence-swept evaluation on the (imbalanced) test split."""
    cfg = _cfg(ctx, store=store_path)
    st = _open_store(cfg.store)
    splits = st.read_splits()
    labels = _task_labels(st, task)
    names = _task_names(st, task)
    model_path = Path(model_path) if model_path else Path(cfg.store) / "models" / f"{task}.json"
    if not model_path.exists():
        raise DataError(f"missing model checkpoint {model_path}; run train first")
    model = classifier_mod.SoftmaxModel.load(model_path)

    test_ids = [b for b in splits.ids(TEST) if b in labels]
    if not test_ids:
        raise DataError("no labeled blobs in the test split")
    click.echo("note: the test split is evaluated unbalanced", err=False)

    y_true, y_pred, confs = [], [], []
    for blob_id in test_ids:
        pred = classifier_mod.predict(model, imaging.load_image(st.crop_path(blob_id)))
        y_true.append(labels[blob_id])
        y_pred.append(pred.label_id)
        confs.append(pred.confidence)

    sweep = evaluation.confidence_sweep(y_true, y_pred, confs, model.class_ids, cfg.confidence_levels,
                                        class_names={c: names.get(c, str(c)) for c in model.class_ids})
    out = Path(out_dir) if out_dir else Path(cfg.store) / "reports" / task
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.json").write_text(sweep.to_json())

    train_labels = [labels[b] for b in splits.ids(TRAIN) if b in labels]
    baselines = evaluation.baseline_reports(y_true, model.class_ids, seed=cfg.splits.seed,
                                            train_labels=train_labels)
    (out / "baselines.json").write_text(json.dumps({
        "constant": baselines["constant"].to_dict(),
        "random": baselines["random"].to_dict(),
        "constant_class": baselines["constant_class"],
    }, sort_keys=True, indent=2) + "\n")
    write_effective_config(cfg, out / "evaluate.config.yaml")

    level0 = sweep.levels[0]
    _summary({
        "command": "evaluate", "task": task, "test_size": len(test_ids),
        "test_balance": "unbalanced",
        "balanced_accuracy": level0.report.balanced_accuracy,
        "retained_fraction": level0.retained_fraction,
        "sweep": str(out / "sweep.json"),
        "class_names": {str(c): names.get(c, str(c)) for c in model.class_ids},
    })


@cli.command()
@click.argument("sweep_json", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", default=None, help="Output directory (default next to the input).")
@click.option("--formats", default="json,csv,markdown", show_default=True)
@click.pass_context
def report(ctx, sweep_json, out_dir, formats):
    """Render a sweep report as CSV / markdown / plot data."""
    cfg = _cfg(ctx)
    sweep = evaluation.ConfidenceSweepReport.from_json(Path(sweep_json).read_text())
    out = Path(out_dir) if out_dir else Path(sweep_json).parent
    written = evaluation.emit_tables(sweep, out, formats=tuple(formats.split(",")))
    write_effective_config(cfg, out / "report.config.yaml")
    _summary({"command": "report", "written": [str(p) for p in written]})


def main(argv=None) -> int:
    """Entry point with the documented exit-code contract."""
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.UsageError as e:
        click.echo(f"usage error: {e.format_message()}", err=True)
        return 1
    except click.ClickException as e:
        e.show()
        return 1
    except click.exceptions.Abort:
        return 1
    except DataError as e:
        click.echo(f"data error: {e}", err=True)
        return 2
    except Exception:
        traceback.print_exc()
        return 3


if __name__ == "__main__":
    sys.exit(main())
