"""Shared fixtures: a small synthetic corpus ingested once per session."""

import numpy as np
import pytest

from scoreblobs import store as store_mod
from scoreblobs import synth as synth_mod
from scoreblobs.imaging import DogConfig


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return synth_mod.generate_synthetic_corpus(
        root, n_classes=5, n_pages=4, glyphs_per_page=30, seed=11
    )


@pytest.fixture(scope="session")
def ingested(tmp_path_factory, small_corpus):
    """Store built from the small corpus, with truth labels in the log."""
    root = tmp_path_factory.mktemp("store")
    st = store_mod.DatasetStore.create(root, taxonomy=small_corpus.taxonomy)
    truth_by_page = small_corpus.truth_by_page()
    for path in small_corpus.page_paths:
        rec = store_mod.ingest_page(st, path, DogConfig())
        page_blobs = [st.blob(b) for b in rec.blob_refs]
        matches = synth_mod.match_blobs_to_truth(page_blobs, truth_by_page.get(path.stem, []))
        for blob_id, class_id in matches.items():
            store_mod.record_annotation(st, "truth", blob_id, class_id)
    return st, small_corpus


def gaussian_spot_page(size=400, cx=100, cy=100, sigma=20.0, amplitude=255.0):
    """Dark isotropic Gaussian spot on a white field."""
    ys, xs = np.mgrid[0:size, 0:size]
    field = 255.0 - amplitude * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma**2))
    return np.clip(field, 0, 255).astype(np.uint8)
