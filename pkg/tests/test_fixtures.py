from __future__ import annotations

import json

import numpy as np
import pytest

from mmfnd.core import Label
from mmfnd.fixtures import SpecInvalid, SyntheticCorpusSpec, generate_synthetic, write_miniature_sources
from mmfnd.ingestion import read_manifest
from mmfnd.models import TrainingConfig, predict_split, preset_config, train

from conftest import encode_posts
from oracles import binomial_band


def _tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_same_spec_gives_identical_files(tmp_path):
    spec = SyntheticCorpusSpec(n_train=400, n_val=100, n_test=100, fake_fraction=0.5, signal_strength=0.9, seed=7)
    generate_synthetic(spec, tmp_path / "a")
    b = generate_synthetic(spec, tmp_path / "b")
    assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")
    assert b.test.counts == {Label.FAKE: 50, Label.REAL: 50}


def test_different_seed_changes_corpus(tmp_path):
    a = generate_synthetic(SyntheticCorpusSpec(n_train=10, n_val=4, n_test=4, seed=1), tmp_path / "a")
    b = generate_synthetic(SyntheticCorpusSpec(n_train=10, n_val=4, n_test=4, seed=2), tmp_path / "b")
    assert [p.text for p in a.train] != [p.text for p in b.train]


def test_split_sizes_and_balance(small_corpus):
    assert (len(small_corpus.train), len(small_corpus.validation), len(small_corpus.test)) == (60, 20, 40)
    for split in (small_corpus.train, small_corpus.validation, small_corpus.test):
        assert split.counts[Label.FAKE] == split.counts[Label.REAL] == len(split) // 2


def test_written_manifests_match_returned_splits(small_corpus):
    for name in ("train", "validation", "test"):
        assert list(read_manifest(small_corpus.root / f"{name}.tsv")) == list(small_corpus.splits[name])
    assert json.loads((small_corpus.root / "spec.json").read_text())["seed"] == 3


def test_planted_structure(small_corpus):
    keys = {p.id: small_corpus.store.read(p.image_ref) for p in small_corpus.test}
    from mmfnd.encoding import image_pairing_key

    for p in small_corpus.test:
        matched = image_pairing_key(keys[p.id]) == p.event_id
        assert matched == (p.label is Label.REAL)
        assert small_corpus.aliases.detect(p.text)[0] == p.event_id


def test_side_tables_cover_real_test_posts(small_corpus):
    real = [p for p in small_corpus.test if p.label is Label.REAL]
    assert set(small_corpus.curated_map) == {p.id for p in real}
    assert {pid for pid, _ in small_corpus.annotations} == {f"{p.id}~evtrem" for p in real}
    assert all(small_corpus.store.exists(c.image_ref) for c in small_corpus.curated_map.values())


@pytest.mark.parametrize(
    "kw",
    [dict(fake_fraction=0.0), dict(fake_fraction=1.0), dict(signal_strength=1.5), dict(n_events=1), dict(n_train=1),
     dict(n_val=3, fake_fraction=0.1)],
)
def test_invalid_specs(tmp_path, kw):
    with pytest.raises(SpecInvalid):
        generate_synthetic(SyntheticCorpusSpec(**kw), tmp_path)


def test_spec_from_yaml(tmp_path):
    (tmp_path / "s.yaml").write_text("n_train: 12\nseed: 4\n")
    spec = SyntheticCorpusSpec.load(tmp_path / "s.yaml")
    assert spec.n_train == 12 and spec.seed == 4 and spec.n_test == 100


def test_zero_signal_is_not_learnable(tmp_path):
    c = generate_synthetic(SyntheticCorpusSpec(n_train=200, n_val=60, n_test=200, signal_strength=0.0, seed=9), tmp_path)
    feats = {k: encode_posts(getattr(c, k), c.store, c.aliases, 0.0) for k in ("train", "validation", "test")}
    ckpt, _ = train(preset_config("MLP_CLIP"), feats["train"], feats["validation"], TrainingConfig(epochs=10))
    preds = predict_split(ckpt, feats["test"])
    acc = float(np.mean([int(p.label) == t for p, t in zip(preds, feats["test"].labels)]))
    lo, hi = binomial_band(200, 0.5, 0.95)
    assert lo <= acc <= hi


def test_miniature_sources_layout(tmp_path):
    paths = write_miniature_sources(tmp_path)
    assert (paths["mediaeval"] / "train.txt").exists() and (paths["mediaeval"] / "test.txt").exists()
    assert len(json.loads((paths["visualnews"] / "train.json").read_text())) == 4
