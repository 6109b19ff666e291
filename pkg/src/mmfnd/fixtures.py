"""Deterministic desk-scale corpora.

:func:`generate_synthetic` builds a planted-signal corpus: real posts pair a
text about event *e* with an image keyed to *e*, fake posts pair it with an
image keyed to another event. Under the planted mock encoder, real pairs are
correlated and fake pairs are not. :func:`write_miniature_sources` writes tiny
MediaEval- and VisualNews-format source trees for the ingestion adapters.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .core import DatasetSplit, Label, MmfndError, Origin, Post, Split, derive_seed, register_split
from .ingestion import ImageStore, write_manifest
from .manipulation import (
    CuratedImage,
    EventAliasTable,
    RuleTagger,
    build_entity_index,
    write_curated_map,
)


class SpecInvalid(MmfndError):
    pass


EVENT_NAMES = (
    "Storm Alder",
    "Harbor Fire",
    "Ridge Quake",
    "Valley Flood",
    "Metro Blackout",
    "Canyon Wildfire",
    "Delta Cyclone",
    "Summit Avalanche",
    "Coastal Tsunami",
    "River Landslide",
    "Plains Tornado",
    "Island Eruption",
)
PERSONS = ("Mara Quill", "Tomas Reyne", "Ada Lindqvist", "Kofi Mensah", "Lena Ortiz", "Yusuf Demir", "Ines Baptiste")
LOCATIONS = ("Northport", "Eastvale", "Marrow Bay", "Kestrel Point", "Old Mill", "Juniper Flats", "Stonebridge")
ORGANIZATIONS = ("Civic Relief Agency", "Northport Herald", "Red Lantern Aid", "Coast Watch", "Metro Transit Board")
DATES = ("Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday")
FILLERS = ("now", "again", "tonight", "live", "update", "breaking", "photo", "view", "scene", "latest", "report")

TEMPLATES = (
    "{event}: {person} says crews reached {location} on {date}",
    "Photos from {location} after the {event} {tag}",
    "{organization} shares images of the {event} near {location}",
    "{tag} {person} reports damage from the {event} this {date}",
    "The {event} hit {location} hard, says {organization}",
    "Watching the {event} from {location} with {person}",
)


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    n_train: int = 400
    n_val: int = 100
    n_test: int = 100
    fake_fraction: float = 0.5
    signal_strength: float = 0.9
    seed: int = 7
    n_events: int = 8
    image_side: int = 8

    def validate(self) -> None:
        if not 0.0 < self.fake_fraction < 1.0:
            raise SpecInvalid("fake_fraction must lie in (0, 1)")
        if not 0.0 <= self.signal_strength <= 1.0:
            raise SpecInvalid("signal_strength must lie in [0, 1]")
        if not 2 <= self.n_events <= len(EVENT_NAMES):
            raise SpecInvalid(f"n_events must lie in [2, {len(EVENT_NAMES)}]")
        for name, n in (("n_train", self.n_train), ("n_val", self.n_val), ("n_test", self.n_test)):
            if n < 2:
                raise SpecInvalid(f"{name} must be at least 2")
            n_fake = round(n * self.fake_fraction)
            if not 1 <= n_fake <= n - 1:
                raise SpecInvalid(f"{name}={n} with fake_fraction={self.fake_fraction} leaves a class empty")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SyntheticCorpusSpec":
        import yaml

        with open(path, encoding="utf-8") as fh:
            return cls(**(yaml.safe_load(fh) or {}))


def event_id(name: str) -> str:
    return name.lower().replace(" ", "_")


def hashtag(name: str) -> str:
    return "#" + name.replace(" ", "")


def synthetic_aliases(n_events: int) -> EventAliasTable:
    return EventAliasTable({event_id(n): [n, hashtag(n)] for n in EVENT_NAMES[:n_events]})


def synthetic_tagger(n_events: int) -> RuleTagger:
    entries = {p: "person" for p in PERSONS}
    entries.update({loc: "location" for loc in LOCATIONS})
    entries.update({o: "organization" for o in ORGANIZATIONS})
    entries.update({d: "date" for d in DATES})
    for name in EVENT_NAMES[:n_events]:
        entries[name] = "event"
        entries[hashtag(name)] = "event"
    return RuleTagger(entries)


def ppm_bytes(pixels: np.ndarray, key: Optional[str] = None) -> bytes:
    """Binary PPM; ``key`` goes into a header comment read by the planted mock."""
    h, w, _ = pixels.shape
    comment = f"# mmfnd-key: {key}\n" if key else ""
    return f"P6\n{comment}{w} {h}\n255\n".encode() + pixels.astype(np.uint8).tobytes()


def random_bitmap(rng: np.random.Generator, side: int, key: Optional[str]) -> bytes:
    return ppm_bytes(rng.integers(0, 256, (side, side, 3)), key)


def _text(rng: np.random.Generator, event_name: str) -> str:
    template = TEMPLATES[int(rng.integers(len(TEMPLATES)))]
    text = template.format(
        event=event_name,
        tag=hashtag(event_name),
        person=PERSONS[int(rng.integers(len(PERSONS)))],
        location=LOCATIONS[int(rng.integers(len(LOCATIONS)))],
        organization=ORGANIZATIONS[int(rng.integers(len(ORGANIZATIONS)))],
        date=DATES[int(rng.integers(len(DATES)))],
    )
    extra = rng.choice(FILLERS, size=int(rng.integers(1, 4)), replace=False)
    return text + " " + " ".join(extra)


@dataclass
class SyntheticCorpus:
    spec: SyntheticCorpusSpec
    root: Path
    splits: dict[str, DatasetSplit]
    store: ImageStore
    aliases: EventAliasTable
    tagger: RuleTagger
    entity_index: dict[str, tuple[str, ...]]
    curated_map: dict[str, CuratedImage]
    annotations: list[tuple[str, Label]]

    @property
    def train(self) -> DatasetSplit:
        return self.splits["train"]

    @property
    def validation(self) -> DatasetSplit:
        return self.splits["validation"]

    @property
    def test(self) -> DatasetSplit:
        return self.splits["test"]


def generate_synthetic(spec: SyntheticCorpusSpec, out_dir: str | os.PathLike) -> SyntheticCorpus:
    """Write a planted-signal corpus under ``out_dir`` and return it.

    Layout: ``images/`` (image store), ``{train,validation,test}.tsv``
    manifests, ``aliases.json``, ``entities.json`` (rule tagger table),
    ``entity_index.json``, ``curated_map.tsv`` (same-event look-alike image
    for every real test post) and ``evtrem_annotations.tsv`` (a verdict for
    every real test post once its event is removed; about 6% fake).
    """
    spec.validate()
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    store = ImageStore(root / "images")
    names = EVENT_NAMES[: spec.n_events]
    aliases = synthetic_aliases(spec.n_events)
    tagger = synthetic_tagger(spec.n_events)

    splits: dict[str, DatasetSplit] = {}
    curated: dict[str, CuratedImage] = {}
    annotations: list[tuple[str, Label]] = []
    for split, n in ((Split.TRAIN, spec.n_train), (Split.VALIDATION, spec.n_val), (Split.TEST, spec.n_test)):
        rng = np.random.default_rng(derive_seed(spec.seed, "split", split.value))
        n_fake = round(n * spec.fake_fraction)
        labels = np.array([Label.FAKE] * n_fake + [Label.REAL] * (n - n_fake))
        rng.shuffle(labels)
        posts = []
        for k, label in enumerate(labels):
            ev = int(rng.integers(len(names)))
            text = _text(rng, names[ev])
            img_ev = ev
            if label == Label.FAKE:
                img_ev = (ev + 1 + int(rng.integers(len(names) - 1))) % len(names)
            native = f"{split.value.lower()}-{k:05d}"
            ref = store.add_bytes(random_bitmap(rng, spec.image_side, event_id(names[img_ev])), f"{native}.ppm")
            post = Post(
                id=f"{Origin.SYNTHETIC.value}/{native}",
                text=text,
                image_ref=ref,
                label=Label(label),
                split=split,
                origin=Origin.SYNTHETIC,
                event_id=event_id(names[ev]),
            )
            posts.append(post)
            if split is Split.TEST and label == Label.REAL:
                alt = store.add_bytes(random_bitmap(rng, spec.image_side, post.event_id), f"{native}-alt.ppm")
                curated[post.id] = CuratedImage(alt, post.event_id)
                verdict = Label.FAKE if rng.random() < 0.06 else Label.REAL
                annotations.append((f"{post.id}~evtrem", verdict))
        splits[split.value.lower()] = register_split(split.value.lower(), posts)

    entity_index = build_entity_index([p for s in splits.values() for p in s], tagger)

    for name, s in splits.items():
        write_manifest(s, root / f"{name}.tsv")
    aliases.dump(root / "aliases.json")
    (root / "entities.json").write_text(json.dumps(tagger.entries, indent=1, sort_keys=True), encoding="utf-8")
    (root / "entity_index.json").write_text(
        json.dumps({k: list(v) for k, v in entity_index.items()}, indent=1, sort_keys=True), encoding="utf-8"
    )
    write_curated_map(curated, root / "curated_map.tsv")
    (root / "evtrem_annotations.tsv").write_text(
        "post_id\tlabel\n" + "".join(f"{pid}\t{lab.name}\n" for pid, lab in annotations), encoding="utf-8"
    )
    (root / "spec.json").write_text(json.dumps(asdict(spec), sort_keys=True, indent=1), encoding="utf-8")
    return SyntheticCorpus(spec, root, splits, store, aliases, tagger, entity_index, curated, annotations)


# ---------------------------------------------------------------------------
# miniature raw sources

ME_HEADER = ("tweetId", "tweetText", "userId", "imageId(s)", "username", "timestamp", "label")


def write_miniature_sources(out_dir: str | os.PathLike, seed: int = 0) -> dict[str, Path]:
    """Tiny MediaEval and VisualNews source trees.

    The MediaEval test file holds 5 tweets: one video, one whose image is
    missing, and three valid ones (one of them with two images).
    """
    root = Path(out_dir)
    rng = np.random.default_rng(seed)
    me = root / "mediaeval"
    (me / "images").mkdir(parents=True, exist_ok=True)

    def img(name: str, key: str) -> None:
        (me / "images" / f"{name}.ppm").write_bytes(random_bitmap(rng, 8, key))

    rows = {
        "train": [
            ("101", "Storm Alder floods the harbor road #StormAlder", "u1", "stormalder_real_01", "a", "t", "real"),
            ("102", "Shark swimming on the highway during Storm Alder", "u2", "stormalder_fake_02", "b", "t", "fake"),
            ("103", "Harbor Fire smoke over the bay", "u3", "harborfire_real_01", "c", "t", "real"),
            ("104", "Harbor Fire seen from space, amazing", "u4", "harborfire_fake_01", "d", "t", "humor"),
        ],
        "test": [
            ("201", "Ridge Quake cracked the old bridge", "u5", "ridgequake_real_01", "e", "t", "real"),
            ("202", "Ridge Quake footage", "u6", "ridgequake_video_01", "f", "t", "fake"),
            ("203", "Ridge Quake aftermath, photo lost", "u7", "ridgequake_real_99", "g", "t", "real"),
            ("204", "Valley Flood rescue boats", "u8", "valleyflood_real_01,valleyflood_real_02", "h", "t", "real"),
            ("205", "Valley Flood reaches the stadium", "u9", "valleyflood_fake_01", "i", "t", "fake"),
        ],
    }
    for name in ("stormalder_real_01", "stormalder_fake_02", "harborfire_real_01", "harborfire_fake_01",
                 "ridgequake_real_01", "valleyflood_real_01", "valleyflood_real_02", "valleyflood_fake_01"):
        img(name, name.split("_")[0])
    (me / "images" / "ridgequake_video_01.mp4").write_bytes(b"\x00\x00\x00\x18ftypmp42")
    for split, lines in rows.items():
        body = "\t".join(ME_HEADER) + "\n" + "".join("\t".join(r) + "\n" for r in lines)
        (me / f"{split}.txt").write_text(body, encoding="utf-8")

    vn = root / "visualnews"
    (vn / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    captions = (
        "Mara Quill visits Northport after the storm",
        "Civic Relief Agency volunteers in Eastvale on Monday",
        "Tomas Reyne speaks at Stonebridge town hall",
        "A quiet morning at the harbor",
    )
    for k, caption in enumerate(captions):
        rel = f"images/vn_{k}.ppm"
        (vn / rel).write_bytes(random_bitmap(rng, 8, None))
        entries.append({"id": f"vn{k}", "caption": caption, "image_path": rel, "source": "herald", "topic": "news"})
    (vn / "train.json").write_text(json.dumps(entries, indent=1), encoding="utf-8")
    return {"mediaeval": me, "visualnews": vn}
