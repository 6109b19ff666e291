"""File-level stage implementations shared by the CLI and the pipeline runner.

Every function reads its inputs from paths and writes its outputs to paths;
nothing here keeps state between calls.
"""

from __future__ import annotations

import logging
import os
from collections.abc import Mapping, Sequence
from dataclasses import fields, replace
from pathlib import Path
from typing import Optional

from .core import DatasetSplit, Label, MmfndError, Origin, Post, Split, register_split
from .encoding import (
    EmbeddingCache,
    MockEncoder,
    Modality,
    PlantedKeys,
    PretrainedEncoder,
    load_embeddings,
    mock_spec,
    preset,
)
from .evaluation import (
    MissingCache,
    Predictor,
    compute_metrics,
    ensemble_predictor,
    evaluate_manipulation_grid,
    majority_vote,
    read_predictions,
    render_report,
    write_predictions,
)
from .fixtures import SyntheticCorpusSpec, generate_synthetic
from .ingestion import (
    CaptionColumns,
    DirectoryImageLocator,
    ImageStore,
    TweetColumns,
    VeracityMap,
    ingest_captions,
    ingest_tweets,
    read_manifest,
    read_mediaeval,
    read_posts,
    read_visualnews,
    write_manifest,
    write_posts,
)
from .manipulation import (
    AnnotationQueue,
    EventAliasTable,
    RuleTagger,
    SpacyTagger,
    Technique,
    entity_replace_pass,
    event_remove_pass,
    event_replace_pass,
    fake_image_pass,
    image_pool,
    read_annotations,
    read_curated_map,
    real_image_pass,
    write_annotation_sheet,
    write_provenance,
)
from .models import (
    Architecture,
    Checkpoint,
    Features,
    HashingTokenizer,
    TrainingConfig,
    build_features,
    predict_split,
    preset_config,
    train,
    write_training_log,
)

log = logging.getLogger(__name__)

SPLIT_FILES = {"train": Split.TRAIN, "validation": Split.VALIDATION, "val": Split.VALIDATION, "test": Split.TEST}


class MissingDerivedSplit(MmfndError):
    pass


# ---------------------------------------------------------------------------
# data references


def data_paths(ref: str | os.PathLike) -> tuple[Path, Path]:
    """``manifest+cache`` or a bare manifest / base path with a sibling ``.emb``."""
    ref = str(ref)
    if "+" in ref and not Path(ref).exists():
        manifest, cache = ref.split("+", 1)
        return Path(manifest), Path(cache)
    p = Path(ref)
    if p.suffix == ".tsv":
        return p, p.with_suffix(".emb")
    return p.with_name(p.name + ".tsv"), p.with_name(p.name + ".emb")


def load_data(ref: str | os.PathLike, tokenizer: Optional[HashingTokenizer] = None) -> tuple[DatasetSplit, Features, tuple[str, str]]:
    manifest, cache = data_paths(ref)
    split = read_manifest(manifest)
    if not cache.exists():
        raise MissingCache(f"no embedding cache for {manifest} (looked for {cache})")
    pairs = load_embeddings(cache)
    names = pairs[0].encoder_names if pairs else ("", "")
    return split, build_features(list(split), pairs, tokenizer), names


def _tokenizer_for(ckpt: Checkpoint) -> Optional[HashingTokenizer]:
    if ckpt.config.architecture is Architecture.CLIP_MMBT:
        return HashingTokenizer(ckpt.config.vocab_size)
    return None


# ---------------------------------------------------------------------------
# fixtures / ingestion


def run_fixtures(out: str | os.PathLike, **spec) -> Path:
    known = {f.name for f in fields(SyntheticCorpusSpec)}
    unknown = set(spec) - known
    if unknown:
        raise MmfndError(f"unknown fixture spec fields: {sorted(unknown)}")
    generate_synthetic(SyntheticCorpusSpec(**spec), out)
    return Path(out)


def run_ingest(
    source: str | os.PathLike,
    out: str | os.PathLike,
    format: str,
    permissive: bool = False,
    columns: Optional[Mapping] = None,
    origin: Optional[str] = None,
    humor_as: str = "FAKE",
) -> dict[str, int]:
    """Ingest every ``{train,validation,test}`` source file under ``source``.

    Writes one manifest per split plus the image store ``images/`` into ``out``.
    Returns post counts per split.
    """
    source, out = Path(source), Path(out)
    out.mkdir(parents=True, exist_ok=True)
    store = ImageStore(out / "images")
    counts = {}
    if format == "mediaeval":
        cols = TweetColumns.from_mapping(columns) if columns else TweetColumns()
        images_dir = source / "images" if (source / "images").is_dir() else source
        locator = DirectoryImageLocator(images_dir, store)
        veracity = VeracityMap.with_humor_as(Label.parse(humor_as))
        for stem, split in SPLIT_FILES.items():
            path = source / f"{stem}.txt"
            if not path.exists():
                continue
            records = read_mediaeval(path, cols, locator.media_type)
            s = ingest_tweets(
                records, locator, origin=origin or Origin.ME2015, split=split, name=split.value.lower(),
                permissive=permissive, veracity=veracity,
            )
            write_manifest(s, out / f"{split.value.lower()}.tsv")
            counts[split.value.lower()] = len(s)
    elif format == "visualnews":
        cols = CaptionColumns.from_mapping(columns) if columns else CaptionColumns()
        locator = DirectoryImageLocator(source, store)
        for stem, split in SPLIT_FILES.items():
            for ext in (".json", ".jsonl"):
                path = source / f"{stem}{ext}"
                if not path.exists():
                    continue
                s = ingest_captions(read_visualnews(path, cols), locator, split=split, name=split.value.lower(),
                                    permissive=permissive)
                write_manifest(s, out / f"{split.value.lower()}.tsv")
                counts[split.value.lower()] = len(s)
    else:
        raise MmfndError(f"unknown source format {format!r}")
    if not counts:
        raise MmfndError(f"{source}: no train/validation/test source files found")
    return counts


# ---------------------------------------------------------------------------
# manipulation


def _tagger(entities: Optional[str | os.PathLike], spacy_model: Optional[str]):
    if entities:
        return RuleTagger.load(entities)
    if spacy_model:
        return SpacyTagger(spacy_model)
    raise MmfndError("entity replacement needs --entities (rule table) or --spacy-model")


def run_manipulate(
    in_manifest: str | os.PathLike,
    out_manifest: str | os.PathLike,
    technique: str,
    seed: int = 0,
    alias_table: Optional[str | os.PathLike] = None,
    curated_map: Optional[str | os.PathLike] = None,
    annotations: Optional[str | os.PathLike] = None,
    entities: Optional[str | os.PathLike] = None,
    spacy_model: Optional[str] = None,
    pool_manifest: Optional[str | os.PathLike] = None,
    only_real: bool = True,
) -> int:
    """Apply one technique to a manifest; provenance goes to
    ``<out>.provenance.jsonl``. Returns the number of output posts.

    Event removal without ``annotations`` writes ``<out>.pending.tsv`` (a
    sheet for annotators) instead of a manifest and returns 0.
    """
    technique = _technique(technique)
    posts = read_posts(in_manifest)
    pool_posts = read_posts(pool_manifest) if pool_manifest else posts
    out_manifest = Path(out_manifest)
    out_manifest.parent.mkdir(parents=True, exist_ok=True)

    def need(value, flag):
        if value is None:
            raise MmfndError(f"technique {technique.suffix} needs {flag}")
        return value

    if technique is Technique.EVT_REP:
        aliases = EventAliasTable.load(need(alias_table, "--alias-table"))
        pool = {p.event_id for p in pool_posts if p.event_id}
        result = event_replace_pass(posts, aliases, seed, pool=pool, only_real=only_real)
    elif technique is Technique.EVT_REM:
        aliases = EventAliasTable.load(need(alias_table, "--alias-table"))
        result = event_remove_pass(posts, aliases, only_real=only_real)
        queue = AnnotationQueue(result.posts)
        if annotations is None:
            sheet = out_manifest.with_name(out_manifest.name + ".pending.tsv")
            write_annotation_sheet(queue.posts(), sheet)
            log.warning("event removal needs annotations; wrote %d pending posts to %s", len(queue.pending), sheet)
            return 0
        queue.import_annotations(read_annotations(annotations))
        if queue.pending:
            log.warning("dropping %d event-removed posts without an annotation", len(queue.pending))
        labelled = {p.id: p for p in queue.posts() if p.label is not None}
        result.records = [
            replace(r, resulting_label=labelled[r.output_id].label)
            for r in result.records
            if r.output_id in labelled
        ]
        result.posts = [labelled[r.output_id] for r in result.records]
    elif technique is Technique.FAKE_IM:
        result = fake_image_pass(posts, seed, pool=image_pool(pool_posts), only_real=only_real)
    elif technique is Technique.REAL_IM:
        result = real_image_pass(posts, read_curated_map(need(curated_map, "--curated-map")), only_real=only_real)
    else:
        result = entity_replace_pass(posts, _tagger(entities, spacy_model), seed, only_real=only_real)
    write_posts(result.posts, out_manifest)
    write_provenance(result.records, out_manifest.with_name(out_manifest.name + ".provenance.jsonl"))
    return len(result.posts)


_TECHNIQUES = {t.suffix: t for t in Technique}


def _technique(name: str) -> Technique:
    try:
        return _TECHNIQUES[name.lower()] if name.lower() in _TECHNIQUES else Technique(name.upper())
    except ValueError:
        raise MmfndError(f"unknown technique {name!r}; one of {sorted(_TECHNIQUES)}") from None


def make_vnme(
    originals: Sequence[DatasetSplit],
    evtrep: Sequence[DatasetSplit],
    fakeim: Sequence[DatasetSplit],
    name: str = "vnme",
) -> dict[str, DatasetSplit]:
    """Compose the three augmented training sets: originals plus fake-image
    rows (Img), plus event/entity-replacement rows (Evt), or plus both (All)."""
    if not evtrep:
        raise MissingDerivedSplit("no event/entity-replacement split given")
    if not fakeim:
        raise MissingDerivedSplit("no fake-image split given")
    base = [p for s in originals for p in s]
    evt = [p for s in evtrep for p in s]
    img = [p for s in fakeim for p in s]
    return {
        "img": register_split(f"{name}-img", base + img),
        "evt": register_split(f"{name}-evt", base + evt),
        "all": register_split(f"{name}-all", base + evt + img),
    }


def run_make_vnme(
    originals: Sequence[str | os.PathLike],
    evtrep: Sequence[str | os.PathLike],
    fakeim: Sequence[str | os.PathLike],
    out_dir: str | os.PathLike,
    prefix: str = "",
) -> dict[str, int]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sets = make_vnme([read_manifest(p) for p in originals], [read_manifest(p) for p in evtrep],
                     [read_manifest(p) for p in fakeim])
    for key, s in sets.items():
        write_manifest(s, out_dir / f"{prefix}{key}.tsv")
    return {k: len(s) for k, s in sets.items()}


def build_test_grid(
    posts: Sequence[Post],
    aliases: EventAliasTable,
    curated,
    annotations: Sequence[tuple[str, Label]],
    seed: int,
    n: Optional[int] = 100,
) -> dict[str, DatasetSplit]:
    """The five robustness sets built from the first ``n`` real posts that
    every technique can handle."""
    real = [p for p in posts if p.label == Label.REAL]
    usable = [p for p in real if p.id in curated and p.event_id and aliases.find(p.text, p.event_id)]
    base = usable[:n] if n else usable
    ann = dict(annotations)
    rem = event_remove_pass(base, aliases)
    queue = AnnotationQueue(rem.posts)
    queue.import_annotations([(pid, ann[pid]) for pid in queue.pending if pid in ann])
    return {
        "Original": register_split("Original", base),
        "FakeIm": register_split("FakeIm", fake_image_pass(base, seed, pool=image_pool(posts)).posts),
        "RealIm": register_split("RealIm", real_image_pass(base, curated).posts),
        "EvtRep": register_split("EvtRep", event_replace_pass(base, aliases, seed, pool=aliases.events()).posts),
        "EvtRem": register_split("EvtRem", [p for p in queue.posts() if p.label is not None]),
    }


def run_testgrid(
    test_manifest: str | os.PathLike,
    out_dir: str | os.PathLike,
    alias_table: str | os.PathLike,
    curated_map: str | os.PathLike,
    annotations: str | os.PathLike,
    seed: int = 0,
    n: Optional[int] = 100,
) -> dict[str, int]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sets = build_test_grid(
        read_posts(test_manifest), EventAliasTable.load(alias_table), read_curated_map(curated_map),
        read_annotations(annotations), seed, n,
    )
    for name, s in sets.items():
        write_manifest(s, out_dir / f"{name}.tsv")
    return {k: len(s) for k, s in sets.items()}


# ---------------------------------------------------------------------------
# encoding


def make_encoders(
    text_encoder: str = "bert",
    image_encoder: str = "resnet50",
    mock: bool = False,
    dim: int = 64,
    seed: int = 0,
    signal_strength: float = 0.9,
):
    """Encoder pair for the given presets; ``mock`` keeps each preset's
    modality but swaps in hash encoders of width ``dim``."""
    specs = []
    for name, fallback in ((text_encoder, Modality.TEXT), (image_encoder, Modality.IMAGE)):
        if mock:
            modality = preset(name).modality if name in _preset_names() else fallback
            specs.append(mock_spec(modality, dim))
        else:
            specs.append(preset(name))
    if mock:
        t = MockEncoder(specs[0], seed=seed, signal_strength=signal_strength)
        i = t if specs[1] == specs[0] else MockEncoder(specs[1], seed=seed, signal_strength=signal_strength)
        return t, i
    t = PretrainedEncoder(specs[0])
    i = t if specs[1] == specs[0] else PretrainedEncoder(specs[1])
    return t, i


def _preset_names():
    from .encoding import PRESETS

    return PRESETS


def run_encode(
    manifest: str | os.PathLike,
    images: str | os.PathLike,
    cache: str | os.PathLike,
    text_encoder: str = "bert",
    image_encoder: str = "resnet50",
    mock: bool = False,
    dim: int = 64,
    seed: int = 0,
    planted_aliases: Optional[str | os.PathLike] = None,
    signal_strength: Optional[float] = None,
) -> int:
    """Encode a manifest into an embedding cache (reusing valid entries).

    Without an explicit ``signal_strength``, planted mode takes it from the
    ``spec.json`` that sits next to a synthetic corpus's alias table, and
    falls back to 0.9.
    """
    if signal_strength is None:
        signal_strength = _corpus_signal(planted_aliases)
    posts = read_posts(manifest)
    t, i = make_encoders(text_encoder, image_encoder, mock, dim, seed, signal_strength)
    planted = PlantedKeys.from_aliases(EventAliasTable.load(planted_aliases)) if planted_aliases else None
    pairs = EmbeddingCache(cache).get_or_encode(posts, t, i, ImageStore(images), planted)
    return len(pairs)


def _corpus_signal(planted_aliases) -> float:
    if planted_aliases:
        spec_path = Path(planted_aliases).with_name("spec.json")
        if spec_path.exists():
            import json

            return float(json.loads(spec_path.read_text(encoding="utf-8"))["signal_strength"])
    return 0.9


# ---------------------------------------------------------------------------
# training and inference


def run_train(
    arch: str,
    train_ref: str | os.PathLike,
    val_ref: str | os.PathLike,
    out: str | os.PathLike,
    log_path: Optional[str | os.PathLike] = None,
    **training,
) -> Checkpoint:
    config = preset_config(arch.upper())
    tokenizer = HashingTokenizer(config.vocab_size) if config.architecture is Architecture.CLIP_MMBT else None
    _, train_feats, names = load_data(train_ref, tokenizer)
    _, val_feats, val_names = load_data(val_ref, tokenizer)
    if names != val_names:
        raise MmfndError(f"train and validation caches use different encoders: {names} vs {val_names}")
    ckpt, history = train(config, train_feats, val_feats, TrainingConfig(**training), encoder_names=names)
    ckpt.save(out)
    if log_path:
        write_training_log(history, log_path)
    return ckpt


def checkpoint_predictor(ckpt: Checkpoint, data: Mapping[str, str | os.PathLike]) -> Predictor:
    """Predictor over named sets whose caches are listed in ``data``."""
    tokenizer = _tokenizer_for(ckpt)

    def predict(set_name, split):
        if set_name not in data:
            raise MissingCache(f"no embedding cache for set {set_name!r}")
        _, feats, names = load_data(data[set_name], tokenizer)
        if ckpt.encoder_names != ("", "") and tuple(names) != tuple(ckpt.encoder_names):
            raise MmfndError(f"set {set_name!r} was encoded with {names}, model expects {ckpt.encoder_names}")
        preds = predict_split(ckpt, feats)
        if len(preds) != len(split):
            raise MissingCache(f"set {set_name!r}: {len(split) - len(preds)} posts have no embeddings")
        return preds

    return predict


def run_predict(ckpt_path: str | os.PathLike, data_ref: str | os.PathLike, out: str | os.PathLike) -> int:
    ckpt = Checkpoint.load(ckpt_path)
    _, feats, _ = load_data(data_ref, _tokenizer_for(ckpt))
    preds = predict_split(ckpt, feats)
    write_predictions(preds, out)
    return len(preds)


def run_ensemble(members: Sequence[str | os.PathLike], data_ref: str | os.PathLike, out: str | os.PathLike) -> int:
    member_preds = []
    for m in members:
        ckpt = Checkpoint.load(m)
        _, feats, _ = load_data(data_ref, _tokenizer_for(ckpt))
        member_preds.append(predict_split(ckpt, feats))
    preds = majority_vote(member_preds)
    write_predictions(preds, out)
    return len(preds)


def run_evaluate(
    preds_path: str | os.PathLike,
    manifest: str | os.PathLike,
    out_prefix: Optional[str | os.PathLike] = None,
    averaging: str = "macro",
) -> str:
    split = read_manifest(manifest)
    preds = read_predictions(preds_path)
    report = compute_metrics(preds, {p.id: p.label for p in split}, averaging.upper(), split.name)
    text = render_report([report], "text")
    if out_prefix:
        Path(f"{out_prefix}.csv").write_text(render_report([report], "csv"), encoding="utf-8")
        Path(f"{out_prefix}.txt").write_text(text, encoding="utf-8")
    return text


def run_grid(
    models: Mapping[str, str | os.PathLike | Sequence[str | os.PathLike]],
    sets: Mapping[str, str | os.PathLike],
    out_dir: str | os.PathLike,
    averaging: str = "macro",
) -> str:
    """Robustness grid; a model given as a list of checkpoints is a majority-vote ensemble."""
    test_sets = {name: read_manifest(data_paths(ref)[0], name) for name, ref in sets.items()}
    predictors: dict[str, Predictor] = {}
    for name, m in models.items():
        if isinstance(m, (list, tuple)):
            predictors[name] = ensemble_predictor([checkpoint_predictor(Checkpoint.load(c), sets) for c in m])
        else:
            predictors[name] = checkpoint_predictor(Checkpoint.load(m), sets)
    table = evaluate_manipulation_grid(predictors, test_sets, averaging.upper())
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "grid.csv").write_text(render_report(table, "csv"), encoding="utf-8")
    text = render_report(table, "text")
    (out_dir / "grid.txt").write_text(text, encoding="utf-8")
    return text


def load_ensemble_spec(path: str | os.PathLike) -> list[str]:
    """YAML/JSON document with ``member_checkpoints`` (paths relative to the file)."""
    import yaml

    from .evaluation import EnsembleSpec

    path = Path(path)
    doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    spec = EnsembleSpec(tuple(doc["member_checkpoints"]), doc.get("rule", "MAJORITY"))
    return [str((path.parent / m) if not os.path.isabs(m) else m) for m in spec.member_checkpoints]
