"""``mmfnd`` command line interface."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import stages as st
from ._version import __version__
from .core import MmfndError


def _named_pairs(values: Sequence[str], what: str) -> dict[str, str]:
    out = {}
    for v in values:
        name, sep, ref = v.partition("=")
        if not sep:
            name, ref = Path(v).stem, v
        if name in out:
            raise MmfndError(f"duplicate {what} name {name!r}")
        out[name] = ref
    return out


def cmd_fixtures(a):
    from .fixtures import SyntheticCorpusSpec

    spec = SyntheticCorpusSpec.load(a.spec).__dict__ if a.spec else {}
    for key in ("n_train", "n_val", "n_test", "seed", "fake_fraction", "signal_strength"):
        value = getattr(a, key)
        if value is not None:
            spec[key] = value
    if a.miniature:
        from .fixtures import write_miniature_sources

        write_miniature_sources(a.out, spec.get("seed", 7))
        print(f"wrote miniature raw sources to {a.out}")
        return
    st.run_fixtures(a.out, **spec)
    print(f"wrote synthetic corpus to {a.out}")


def cmd_ingest(a):
    counts = st.run_ingest(a.input, a.out, a.format, permissive=a.permissive, origin=a.origin, humor_as=a.humor_as)
    for split, n in counts.items():
        print(f"{split}\t{n}")


def cmd_manipulate(a):
    n = st.run_manipulate(
        a.input, a.out, a.technique, a.seed, alias_table=a.alias_table, curated_map=a.curated_map,
        annotations=a.annotations, entities=a.entities, spacy_model=a.spacy_model, pool_manifest=a.pool,
        only_real=not a.all_labels,
    )
    print(f"{n} posts written to {a.out}")


def cmd_vnme(a):
    counts = st.run_make_vnme(a.originals, a.evtrep, a.fakeim, a.out, prefix=a.prefix)
    for name, n in counts.items():
        print(f"{a.prefix}{name}\t{n}")


def cmd_testgrid(a):
    counts = st.run_testgrid(a.input, a.out, a.alias_table, a.curated_map, a.annotations, seed=a.seed, n=a.n)
    for name, n in counts.items():
        print(f"{name}\t{n}")


def cmd_encode(a):
    n = st.run_encode(
        a.input, a.images, a.out, a.text_encoder, a.image_encoder, mock=a.mock, dim=a.dim, seed=a.seed,
        planted_aliases=a.planted_aliases, signal_strength=a.signal_strength,
    )
    print(f"{n} embedding pairs in {a.out}")


def cmd_train(a):
    training = {
        k: v
        for k, v in {
            "epochs": a.epochs,
            "batch_size": a.batch_size,
            "learning_rate": a.lr,
            "transformer_learning_rate": a.transformer_lr,
            "seed": a.seed,
        }.items()
        if v is not None
    }
    ckpt = st.run_train(a.arch, a.train, a.val, a.out, a.log, **training)
    print(f"saved {ckpt.config.architecture.value} checkpoint (epoch {ckpt.epoch}) to {a.out}")


def cmd_predict(a):
    n = st.run_predict(a.model, a.input, a.out)
    print(f"{n} predictions written to {a.out}")


def cmd_evaluate(a):
    sys.stdout.write(st.run_evaluate(a.pred, a.labels, a.out, averaging=a.averaging))


def cmd_grid(a):
    models: dict = {}
    for name, ref in _named_pairs(a.models, "model").items():
        if ref.endswith((".yaml", ".yml", ".json")):
            models[name] = st.load_ensemble_spec(ref)
        elif "," in ref:
            models[name] = ref.split(",")
        else:
            models[name] = ref
    sys.stdout.write(st.run_grid(models, _named_pairs(a.sets, "set"), a.out, averaging=a.averaging))


def cmd_ensemble(a):
    members = st.load_ensemble_spec(a.spec) if a.spec else a.members
    if not members:
        raise MmfndError("give --members or --spec")
    n = st.run_ensemble(members, a.input, a.out)
    print(f"{n} ensemble predictions written to {a.out}")


def cmd_run(a):
    from .pipeline import describe_plan, load_and_run

    result = load_and_run(a.config, dry_run=a.dry_run, workspace=a.workspace)
    sys.stdout.write(describe_plan(result))
    if not a.dry_run:
        print(f"run manifest: {result.workspace / 'run_manifest.json'}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmfnd", description="Multimodal fake-news detection toolkit.")
    p.add_argument("--version", action="version", version=f"mmfnd {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("fixtures", help="generate the synthetic corpus (or miniature raw sources)")
    s.add_argument("--out", required=True)
    s.add_argument("--spec", help="YAML corpus spec")
    s.add_argument("--seed", type=int)
    s.add_argument("--n-train", type=int)
    s.add_argument("--n-val", type=int)
    s.add_argument("--n-test", type=int)
    s.add_argument("--fake-fraction", type=float)
    s.add_argument("--signal-strength", type=float)
    s.add_argument("--miniature", action="store_true", help="write tiny tweet/caption source files instead")
    s.set_defaults(func=cmd_fixtures)

    s = sub.add_parser("ingest", help="normalize raw tweet or caption sources into manifests")
    s.add_argument("--format", required=True, choices=["mediaeval", "visualnews"])
    s.add_argument("--source", "--in", dest="input", required=True, help="source directory")
    s.add_argument("--out", required=True)
    s.add_argument("--permissive", action="store_true", help="skip malformed records instead of failing")
    s.add_argument("--origin", help="origin tag for tweets (ME2015 or ME2016)")
    s.add_argument("--humor-as", default="FAKE", choices=["FAKE", "REAL"])
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("manipulate", help="derive manipulated posts from a manifest")
    s.add_argument("--technique", required=True, help="evtrep, evtrem, fakeim, realim or entrep")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--alias-table")
    s.add_argument("--curated-map")
    s.add_argument("--annotations")
    s.add_argument("--entities", help="JSON surface->type table for the rule tagger")
    s.add_argument("--spacy-model", help="spaCy model name for entity tagging")
    s.add_argument("--pool", help="manifest supplying the event/image pool (default: --in)")
    s.add_argument("--all-labels", action="store_true", help="also manipulate posts that are not REAL")
    s.set_defaults(func=cmd_manipulate)

    s = sub.add_parser("vnme", help="compose the Img/Evt/All augmented training sets")
    s.add_argument("--originals", nargs="+", required=True)
    s.add_argument("--evtrep", nargs="+", required=True)
    s.add_argument("--fakeim", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--prefix", default="")
    s.set_defaults(func=cmd_vnme)

    s = sub.add_parser("testgrid", help="build the five robustness test sets")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--alias-table", required=True)
    s.add_argument("--curated-map", required=True)
    s.add_argument("--annotations", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-n", type=int, default=100)
    s.set_defaults(func=cmd_testgrid)

    s = sub.add_parser("encode", help="compute or reuse embeddings for a manifest")
    s.add_argument("--text-encoder", default="bert")
    s.add_argument("--image-encoder", default="resnet50")
    s.add_argument("--manifest", "--in", dest="input", required=True)
    s.add_argument("--images", required=True, help="image store directory")
    s.add_argument("--cache", "--out", dest="out", required=True, help="embedding cache file")
    s.add_argument("--mock", action="store_true", help="deterministic hash encoders instead of pretrained weights")
    s.add_argument("--dim", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--planted-aliases", help="alias table enabling planted cross-modal pairing (mock only)")
    s.add_argument("--signal-strength", type=float, help="planted pairing strength (default: from the corpus spec)")
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("train", help="train a fusion head")
    s.add_argument("--arch", required=True, choices=["BERT_RESNET", "MLP_CLIP", "CLIP_MMBT"], type=str.upper)
    s.add_argument("--train", required=True, help="manifest+cache (or base path with .tsv/.emb)")
    s.add_argument("--val", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--log", help="training log (JSON lines)")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--transformer-lr", type=float)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="score a manifest with a checkpoint")
    s.add_argument("--ckpt", "--model", dest="model", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", help="metrics for a predictions file")
    s.add_argument("--preds", "--pred", dest="pred", required=True)
    s.add_argument("--manifest", "--labels", dest="labels", required=True, help="manifest with ground truth")
    s.add_argument("--averaging", default="macro", choices=["macro", "micro", "per_class"])
    s.add_argument("--out", help="write <out>.csv and <out>.txt")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("grid", help="robustness grid over named test sets")
    s.add_argument("--models", nargs="+", required=True,
                   help="name=ckpt, name=ckpt1,ckpt2,ckpt3 (ensemble) or name=ensemble.yaml")
    s.add_argument("--sets", nargs="+", required=True, help="name=manifest[+cache]")
    s.add_argument("--out", required=True)
    s.add_argument("--averaging", default="macro", choices=["macro", "micro", "per_class"])
    s.set_defaults(func=cmd_grid)

    s = sub.add_parser("ensemble", help="majority-vote predictions from several checkpoints")
    s.add_argument("--members", nargs="+")
    s.add_argument("--spec", help="YAML ensemble spec")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ensemble)

    s = sub.add_parser("run", help="execute a pipeline config")
    s.add_argument("--config", required=True)
    s.add_argument("--dry-run", action="store_true", help="print the plan without executing")
    s.add_argument("--workspace", help="override the workspace directory")
    s.set_defaults(func=cmd_run)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (MmfndError, OSError) as exc:
        print(f"mmfnd: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
