"""Test-set manipulations (event replacement/removal, fake/real image swaps)
and named-entity replacement for building augmented training corpora.

Every per-post function is pure in ``(post, pool, seed)``. Corpus passes
derive one seed per post from the pass seed and the post id.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import re
import warnings
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Optional, Protocol

import numpy as np

from .core import Label, MmfndError, Post, derive_seed

log = logging.getLogger(__name__)


class EventNotInText(MmfndError):
    pass


class EmptyPool(MmfndError):
    pass


class MissingCuration(MmfndError):
    pass


class EventMismatch(MmfndError):
    pass


class UnknownId(MmfndError):
    pass


class NotPending(MmfndError):
    pass


class TypeExhausted(UserWarning):
    """No alternative surface exists for an entity type; the span stays as is."""


class Technique(str, enum.Enum):
    EVT_REP = "EVT_REP"
    EVT_REM = "EVT_REM"
    FAKE_IM = "FAKE_IM"
    REAL_IM = "REAL_IM"
    ENTITY_REP = "ENTITY_REP"

    @property
    def suffix(self) -> str:
        return {
            "EVT_REP": "evtrep",
            "EVT_REM": "evtrem",
            "FAKE_IM": "fakeim",
            "REAL_IM": "realim",
            "ENTITY_REP": "entrep",
        }[self.value]


# entity types eligible for replacement; numeric and quantity types are left alone
REPLACEABLE_TYPES = frozenset({"person", "location", "organization", "event", "date", "facility", "gpe"})


@dataclass(frozen=True)
class EntitySpan:
    start: int
    end: int
    surface: str
    entity_type: str

    def check(self, text: str) -> None:
        if not (0 <= self.start < self.end <= len(text)) or text[self.start : self.end] != self.surface:
            raise ValueError(f"span {self} does not match text")


@dataclass(frozen=True)
class ManipulationRecord:
    technique: Technique
    source_id: str
    output_id: str
    replacements: tuple
    resulting_label: Optional[Label]
    seed: Optional[int] = None

    def to_json(self) -> str:
        reps = []
        for old, new in self.replacements:
            if isinstance(old, EntitySpan):
                reps.append({"span": [old.start, old.end, old.surface, old.entity_type], "new": new})
            else:
                reps.append({"old_image": old, "new_image": new})
        doc = {
            "technique": self.technique.value,
            "source_id": self.source_id,
            "output_id": self.output_id,
            "replacements": reps,
            "resulting_label": self.resulting_label.name if self.resulting_label is not None else None,
            "seed": self.seed,
        }
        return json.dumps(doc, sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "ManipulationRecord":
        doc = json.loads(line)
        reps = []
        for r in doc["replacements"]:
            if "span" in r:
                reps.append((EntitySpan(*r["span"]), r["new"]))
            else:
                reps.append((r["old_image"], r["new_image"]))
        label = doc["resulting_label"]
        return cls(
            technique=Technique(doc["technique"]),
            source_id=doc["source_id"],
            output_id=doc["output_id"],
            replacements=tuple(reps),
            resulting_label=Label[label] if label else None,
            seed=doc["seed"],
        )


def write_provenance(records: Iterable[ManipulationRecord], path: str | os.PathLike) -> None:
    lines = [r.to_json() + "\n" for r in records]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_provenance(path: str | os.PathLike) -> list[ManipulationRecord]:
    with open(path, encoding="utf-8") as fh:
        return [ManipulationRecord.from_json(line) for line in fh if line.strip()]


def _derived(post: Post, technique: Technique, **changes) -> Post:
    return replace(
        post,
        id=f"{post.id}~{technique.suffix}",
        derived_from=f"{technique.suffix}:{post.id}",
        **changes,
    )


# ---------------------------------------------------------------------------
# events


def _token_pattern(surfaces: Iterable[str]) -> re.Pattern:
    alts = sorted({s for s in surfaces if s}, key=lambda s: (-len(s), s))
    body = "|".join(re.escape(s) for s in alts)
    return re.compile(rf"(?<![\w#@])(?:{body})(?!\w)", re.IGNORECASE)


class EventAliasTable:
    """Surface forms per event id. The first alias of each event is its
    canonical surface, used when the event is written into a text."""

    def __init__(self, aliases: Mapping[str, Sequence[str]]):
        self._aliases = {ev: tuple(a) for ev, a in aliases.items() if a}
        self._patterns = {ev: _token_pattern(a) for ev, a in self._aliases.items()}
        self._any = _token_pattern(s for a in self._aliases.values() for s in a) if self._aliases else None
        self._by_surface = {s.lower(): ev for ev, a in self._aliases.items() for s in a}

    @classmethod
    def load(cls, path: str | os.PathLike) -> "EventAliasTable":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls({ev: (v["aliases"] if isinstance(v, dict) else v) for ev, v in doc.items()})

    def dump(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self._aliases, indent=1, sort_keys=True, ensure_ascii=False), encoding="utf-8")

    def __contains__(self, event_id: str) -> bool:
        return event_id in self._aliases

    def events(self) -> list[str]:
        return sorted(self._aliases)

    def canonical(self, event_id: str) -> str:
        return self._aliases[event_id][0]

    def find(self, text: str, event_id: str) -> list[tuple[int, int]]:
        pat = self._patterns.get(event_id)
        if pat is None:
            return []
        return [m.span() for m in pat.finditer(text)]

    def detect(self, text: str) -> list[str]:
        """Event ids mentioned in ``text``, in order of first mention."""
        if self._any is None:
            return []
        seen: list[str] = []
        for m in self._any.finditer(text):
            ev = self._by_surface[m.group(0).lower()]
            if ev not in seen:
                seen.append(ev)
        return seen


def event_pool(posts: Iterable[Post]) -> frozenset[str]:
    return frozenset(p.event_id for p in posts if p.event_id)


def event_replace(
    post: Post, event_pool: Iterable[str], aliases: EventAliasTable, rng_seed: int
) -> tuple[Post, ManipulationRecord]:
    """Rewrite every mention of the post's event as a different, randomly drawn event."""
    candidates = sorted(set(event_pool) - {post.event_id})
    candidates = [ev for ev in candidates if ev in aliases]
    if not candidates:
        raise EmptyPool(f"{post.id}: no event other than {post.event_id!r} to draw from")
    if not post.event_id:
        raise EventNotInText(f"{post.id}: post has no event id")
    spans = aliases.find(post.text, post.event_id)
    if not spans:
        raise EventNotInText(f"{post.id}: event {post.event_id!r} not mentioned in text")
    rng = np.random.default_rng(rng_seed)
    target = candidates[int(rng.integers(len(candidates)))]
    surface = aliases.canonical(target)
    text = post.text
    reps = []
    for start, end in reversed(spans):
        reps.append((EntitySpan(start, end, post.text[start:end], "event"), surface))
        text = text[:start] + surface + text[end:]
    reps.reverse()
    new = _derived(post, Technique.EVT_REP, text=text, label=Label.FAKE, event_id=target)
    return new, ManipulationRecord(Technique.EVT_REP, post.id, new.id, tuple(reps), Label.FAKE, rng_seed)


_DANGLING = re.compile(r"[ \t]*[,;:]+")


def remove_spans(text: str, spans: Sequence[tuple[int, int]]) -> str:
    """Delete spans and repair the whitespace and punctuation they leave behind."""
    for start, end in sorted(spans, reverse=True):
        m = _DANGLING.match(text, end)
        if m:
            end = m.end()
        left, right = text[:start], text[end:]
        if right[:1] in {".", "!", "?"}:
            left = left.rstrip(" \t")
        text = left + right
    text = re.sub(r"[ \t]{2,}", " ", text)
    return text.strip()


def event_remove(post: Post, aliases: EventAliasTable) -> Optional[tuple[Post, ManipulationRecord]]:
    """Delete every event mention; the result waits for an annotated label.

    Returns ``None`` (and logs) when nothing but the event was in the text.
    """
    if not post.event_id:
        raise EventNotInText(f"{post.id}: post has no event id")
    spans = aliases.find(post.text, post.event_id)
    if not spans:
        raise EventNotInText(f"{post.id}: event {post.event_id!r} not mentioned in text")
    text = remove_spans(post.text, spans)
    if not text:
        log.warning("dropping %s: text is empty after event removal", post.id)
        return None
    reps = tuple((EntitySpan(s, e, post.text[s:e], "event"), "") for s, e in spans)
    new = _derived(post, Technique.EVT_REM, text=text, label=None)
    return new, ManipulationRecord(Technique.EVT_REM, post.id, new.id, reps, None, None)


class AnnotationQueue:
    """Event-removed posts waiting for a human verdict."""

    def __init__(self, posts: Iterable[Post] = ()):
        self._posts: dict[str, Post] = {}
        for p in posts:
            self.add(p)

    def add(self, post: Post) -> None:
        self._posts[post.id] = post

    @property
    def pending(self) -> list[str]:
        return [pid for pid, p in self._posts.items() if p.label is None]

    def posts(self) -> list[Post]:
        return list(self._posts.values())

    def import_annotations(self, records: Iterable[tuple[str, Label]]) -> int:
        """Apply ``(post_id, label)`` rows; returns how many were applied."""
        applied = 0
        for post_id, label in records:
            post = self._posts.get(post_id)
            if post is None:
                raise UnknownId(f"annotation for unknown post {post_id!r}")
            if post.label is not None:
                raise NotPending(f"post {post_id!r} already labelled {post.label.name}")
            self._posts[post_id] = replace(post, label=Label(label))
            applied += 1
        return applied


def import_annotations(queue: AnnotationQueue, records: Iterable[tuple[str, Label]]) -> int:
    return queue.import_annotations(records)


def read_annotations(path: str | os.PathLike) -> list[tuple[str, Label]]:
    """Annotation sheet: ``post_id<TAB>label`` per line, optional header."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            post_id, label = line.split("\t")[:2]
            if post_id == "post_id":
                continue
            rows.append((post_id, Label.parse(label)))
    return rows


def write_annotation_sheet(posts: Iterable[Post], path: str | os.PathLike) -> None:
    """Blank sheet for annotators: id, empty label column, the edited text."""
    lines = ["post_id\tlabel\ttext\n"]
    for p in posts:
        text = p.text.replace("\t", " ").replace("\n", " ")
        lines.append(f"{p.id}\t{p.label.name if p.label is not None else ''}\t{text}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


# ---------------------------------------------------------------------------
# images


class ImageEntry(NamedTuple):
    image_ref: str
    event_id: Optional[str]
    post_id: str


def image_pool(posts: Iterable[Post]) -> list[ImageEntry]:
    return [ImageEntry(p.image_ref, p.event_id, p.id) for p in posts]


def _digest(ref: str) -> str:
    return ref.split("/", 1)[0]


def different_event(post: Post, entry: ImageEntry) -> bool:
    """An image qualifies as fake for ``post`` when it shows another event.

    Without event metadata on either side, any other post's image counts.
    """
    if _digest(entry.image_ref) == _digest(post.image_ref):
        return False
    if post.event_id and entry.event_id:
        return entry.event_id != post.event_id
    return entry.post_id != post.id


def _sample_qualifying(post: Post, pool: Sequence[ImageEntry], rng: np.random.Generator, tries: int = 64) -> int:
    n = len(pool)
    for _ in range(min(tries, 4 * n)):
        i = int(rng.integers(n))
        if different_event(post, pool[i]):
            return i
    qualifying = [i for i, e in enumerate(pool) if different_event(post, e)]
    if not qualifying:
        return -1
    return qualifying[int(rng.integers(len(qualifying)))]


def fake_image_replace(
    post: Post, image_pool: Sequence[ImageEntry], rng_seed: int
) -> tuple[Post, ManipulationRecord]:
    """Swap in an image of a different event, drawn uniformly; the result is fake."""
    pool = list(image_pool)
    i = _sample_qualifying(post, pool, np.random.default_rng(rng_seed)) if pool else -1
    if i < 0:
        raise EmptyPool(f"{post.id}: no image from a different event")
    return _fake_image_result(post, pool[i], rng_seed)


def _fake_image_result(post: Post, entry: ImageEntry, seed: int) -> tuple[Post, ManipulationRecord]:
    new = _derived(post, Technique.FAKE_IM, image_ref=entry.image_ref, label=Label.FAKE)
    rec = ManipulationRecord(Technique.FAKE_IM, post.id, new.id, ((post.image_ref, entry.image_ref),), Label.FAKE, seed)
    return new, rec


class CuratedImage(NamedTuple):
    image_ref: str
    event_id: Optional[str]


def read_curated_map(path: str | os.PathLike) -> dict[str, CuratedImage]:
    """``post_id<TAB>image_ref<TAB>event_id`` per line, optional header."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 2 or parts[0] == "post_id":
                continue
            out[parts[0]] = CuratedImage(parts[1], parts[2] if len(parts) > 2 and parts[2] else None)
    return out


def write_curated_map(curated: Mapping[str, CuratedImage], path: str | os.PathLike) -> None:
    lines = ["post_id\timage_ref\tevent_id\n"]
    lines += [f"{pid}\t{c.image_ref}\t{c.event_id or ''}\n" for pid, c in curated.items()]
    Path(path).write_text("".join(lines), encoding="utf-8")


def real_image_replace(post: Post, curated_map: Mapping[str, CuratedImage]) -> tuple[Post, ManipulationRecord]:
    """Swap in a curated similar image of the same event; the post stays real."""
    try:
        chosen = curated_map[post.id]
    except KeyError:
        raise MissingCuration(f"{post.id}: no curated replacement image") from None
    if chosen.event_id != post.event_id:
        raise EventMismatch(f"{post.id}: curated image shows event {chosen.event_id!r}, post is {post.event_id!r}")
    new = _derived(post, Technique.REAL_IM, image_ref=chosen.image_ref, label=Label.REAL)
    rec = ManipulationRecord(Technique.REAL_IM, post.id, new.id, ((post.image_ref, chosen.image_ref),), Label.REAL)
    return new, rec


# ---------------------------------------------------------------------------
# named entities


class EntityTagger(Protocol):
    def tag(self, text: str) -> list[EntitySpan]:
        """Non-overlapping entity spans in ``text``, sorted by offset."""


class RuleTagger:
    """Deterministic dictionary tagger: whole-token, case-sensitive, longest match wins."""

    def __init__(self, entries: Mapping[str, str]):
        self.entries = dict(entries)
        alts = sorted(self.entries, key=lambda s: (-len(s), s))
        body = "|".join(re.escape(s) for s in alts)
        self._pattern = re.compile(rf"(?<!\w)(?:{body})(?!\w)") if alts else None

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RuleTagger":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def tag(self, text: str) -> list[EntitySpan]:
        if self._pattern is None:
            return []
        return [EntitySpan(m.start(), m.end(), m.group(0), self.entries[m.group(0)]) for m in self._pattern.finditer(text)]


class SpacyTagger:
    """Adapter around a spaCy pipeline; labels are mapped onto the toolkit's types."""

    LABELS = {
        "PERSON": "person",
        "LOC": "location",
        "ORG": "organization",
        "EVENT": "event",
        "DATE": "date",
        "FAC": "facility",
        "GPE": "gpe",
    }

    def __init__(self, model: str = "en_core_web_sm"):
        try:
            import spacy
        except ImportError as exc:
            raise ImportError("SpacyTagger needs spaCy: pip install 'mmfnd[ner]'") from exc
        self._nlp = spacy.load(model, disable=["parser", "lemmatizer"])

    def tag(self, text: str) -> list[EntitySpan]:
        doc = self._nlp(text)
        return [
            EntitySpan(ent.start_char, ent.end_char, ent.text, self.LABELS[ent.label_])
            for ent in doc.ents
            if ent.label_ in self.LABELS
        ]


def build_entity_index(posts: Iterable[Post], tagger: EntityTagger) -> dict[str, tuple[str, ...]]:
    index: dict[str, set[str]] = {}
    for p in posts:
        for span in tagger.tag(p.text):
            if span.entity_type in REPLACEABLE_TYPES:
                index.setdefault(span.entity_type, set()).add(span.surface)
    return {t: tuple(sorted(s)) for t, s in sorted(index.items())}


def entity_replace(
    post: Post,
    tagger: EntityTagger,
    entity_index: Mapping[str, Sequence[str]],
    rng_seed: int,
) -> Optional[tuple[Post, ManipulationRecord]]:
    """Replace each detected entity with another surface of the same type.

    Returns ``None`` when nothing could be replaced, which excludes the post
    from the fake set.
    """
    spans = [s for s in tagger.tag(post.text) if s.entity_type in REPLACEABLE_TYPES]
    if not spans:
        return None
    rng = np.random.default_rng(rng_seed)
    chosen: dict[int, str] = {}
    for i, span in enumerate(spans):
        span.check(post.text)
        candidates = [s for s in entity_index.get(span.entity_type, ()) if s != span.surface]
        if not candidates:
            warnings.warn(TypeExhausted(f"{post.id}: no alternative {span.entity_type} for {span.surface!r}"))
            continue
        chosen[i] = candidates[int(rng.integers(len(candidates)))]
    if not chosen:
        return None
    text = post.text
    for i in sorted(chosen, key=lambda i: spans[i].start, reverse=True):
        text = text[: spans[i].start] + chosen[i] + text[spans[i].end :]
    reps = tuple((spans[i], chosen[i]) for i in sorted(chosen))
    new = _derived(post, Technique.ENTITY_REP, text=text, label=Label.FAKE)
    return new, ManipulationRecord(Technique.ENTITY_REP, post.id, new.id, reps, Label.FAKE, rng_seed)


# ---------------------------------------------------------------------------
# corpus passes


@dataclass
class PassResult:
    posts: list[Post] = field(default_factory=list)
    records: list[ManipulationRecord] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    def add(self, result) -> None:
        post, rec = result
        self.posts.append(post)
        self.records.append(rec)


def _sources(posts: Iterable[Post], only_real: bool) -> list[Post]:
    return [p for p in posts if not only_real or p.label == Label.REAL]


def event_replace_pass(
    posts: Iterable[Post],
    aliases: EventAliasTable,
    seed: int,
    pool: Iterable[str] | None = None,
    only_real: bool = True,
) -> PassResult:
    """Event replacement over a corpus. ``pool`` defaults to the events of
    the given posts, i.e. targets are drawn from the same split."""
    posts = list(posts)
    pool = frozenset(pool) if pool is not None else event_pool(posts)
    out = PassResult()
    for p in _sources(posts, only_real):
        try:
            out.add(event_replace(p, pool, aliases, derive_seed(seed, p.id)))
        except (EventNotInText, EmptyPool) as exc:
            log.info("event replacement skipped: %s", exc)
            out.skipped.append(p.id)
    return out


def event_remove_pass(posts: Iterable[Post], aliases: EventAliasTable, only_real: bool = True) -> PassResult:
    out = PassResult()
    for p in _sources(posts, only_real):
        try:
            result = event_remove(p, aliases)
        except EventNotInText as exc:
            log.info("event removal skipped: %s", exc)
            out.skipped.append(p.id)
            continue
        if result is None:
            out.skipped.append(p.id)
        else:
            out.add(result)
    return out


def fake_image_pass(
    posts: Iterable[Post],
    seed: int,
    pool: Sequence[ImageEntry] | None = None,
    only_real: bool = True,
) -> PassResult:
    """Fake-image replacement drawing without replacement from ``pool``
    (default: the images of the given posts), falling back to drawing with
    replacement once no unused qualifying image is left.

    The draw for each post depends on the images used before it, so the
    result depends on post order.
    """
    posts = list(posts)
    pool = list(pool) if pool is not None else image_pool(posts)
    available = list(range(len(pool)))
    out = PassResult()
    for p in _sources(posts, only_real):
        post_seed = derive_seed(seed, p.id)
        rng = np.random.default_rng(post_seed)
        avail_entries = [pool[i] for i in available] if len(available) <= 64 else None
        j = _sample_available(p, pool, available, rng, avail_entries)
        if j >= 0:
            entry = pool[available[j]]
            available[j] = available[-1]
            available.pop()
        else:
            k = _sample_qualifying(p, pool, rng) if pool else -1
            if k < 0:
                log.info("fake image replacement skipped: %s has no image from another event", p.id)
                out.skipped.append(p.id)
                continue
            entry = pool[k]
        out.add(_fake_image_result(p, entry, post_seed))
    return out


def _sample_available(post, pool, available, rng, avail_entries) -> int:
    if not available:
        return -1
    if avail_entries is not None:
        return _sample_qualifying(post, avail_entries, rng)
    for _ in range(64):
        j = int(rng.integers(len(available)))
        if different_event(post, pool[available[j]]):
            return j
    qualifying = [j for j, i in enumerate(available) if different_event(post, pool[i])]
    if not qualifying:
        return -1
    return qualifying[int(rng.integers(len(qualifying)))]


def real_image_pass(posts: Iterable[Post], curated_map: Mapping[str, CuratedImage], only_real: bool = True) -> PassResult:
    out = PassResult()
    for p in _sources(posts, only_real):
        try:
            out.add(real_image_replace(p, curated_map))
        except MissingCuration as exc:
            log.info("real image replacement skipped: %s", exc)
            out.skipped.append(p.id)
    return out


def entity_replace_pass(
    posts: Iterable[Post],
    tagger: EntityTagger,
    seed: int,
    entity_index: Mapping[str, Sequence[str]] | None = None,
    only_real: bool = True,
) -> PassResult:
    """Entity replacement over a corpus; entity-free posts are excluded."""
    posts = list(posts)
    if entity_index is None:
        entity_index = build_entity_index(posts, tagger)
    out = PassResult()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TypeExhausted)
        for p in _sources(posts, only_real):
            result = entity_replace(p, tagger, entity_index, derive_seed(seed, p.id))
            if result is None:
                out.skipped.append(p.id)
            else:
                out.add(result)
    return out
