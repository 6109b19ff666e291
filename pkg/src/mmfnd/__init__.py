"""Multimodal fake-news detection: ingestion, manipulation, encoding, fusion
heads, evaluation and a reproducible pipeline runner."""

from __future__ import annotations

from ._version import __version__
from .core import DatasetSplit, Label, MmfndError, Origin, Post, Split, derive_seed, merge_splits, register_split
from .encoding import EmbeddingCache, EmbeddingPair, MockEncoder, PlantedKeys, encode_batch, mock_spec, preset
from .evaluation import (
    Averaging,
    EnsembleSpec,
    EvalReport,
    GridTable,
    compute_metrics,
    constant_predictor,
    ensemble_predictor,
    evaluate_manipulation_grid,
    majority_vote,
    render_report,
)
from .fixtures import SyntheticCorpusSpec, generate_synthetic, write_miniature_sources
from .ingestion import ImageStore, ingest_captions, ingest_tweets, read_manifest, write_manifest
from .manipulation import (
    EventAliasTable,
    ManipulationRecord,
    Technique,
    entity_replace,
    event_remove,
    event_replace,
    fake_image_replace,
    real_image_replace,
)
from .models import Architecture, Checkpoint, FusionModel, FusionModelConfig, Prediction, TrainingConfig, preset_config, train
from .pipeline import RunConfig, run
from .stages import build_test_grid, make_vnme

__all__ = [
    "__version__",
    "Architecture",
    "Averaging",
    "Checkpoint",
    "DatasetSplit",
    "EmbeddingCache",
    "EmbeddingPair",
    "EnsembleSpec",
    "EvalReport",
    "EventAliasTable",
    "FusionModel",
    "FusionModelConfig",
    "GridTable",
    "ImageStore",
    "Label",
    "ManipulationRecord",
    "MmfndError",
    "MockEncoder",
    "Origin",
    "PlantedKeys",
    "Post",
    "Prediction",
    "RunConfig",
    "Split",
    "SyntheticCorpusSpec",
    "Technique",
    "TrainingConfig",
    "build_test_grid",
    "compute_metrics",
    "constant_predictor",
    "derive_seed",
    "encode_batch",
    "ensemble_predictor",
    "entity_replace",
    "evaluate_manipulation_grid",
    "event_remove",
    "event_replace",
    "fake_image_replace",
    "generate_synthetic",
    "ingest_captions",
    "ingest_tweets",
    "majority_vote",
    "make_vnme",
    "merge_splits",
    "mock_spec",
    "preset",
    "preset_config",
    "read_manifest",
    "real_image_replace",
    "register_split",
    "render_report",
    "run",
    "train",
    "write_manifest",
    "write_miniature_sources",
]
