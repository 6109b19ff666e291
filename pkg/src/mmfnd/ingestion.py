"""Corpus adapters (MediaEval tweets, VisualNews captions), the
content-addressed image store and the canonical TSV manifest."""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
import logging
import os
import re
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol

from .core import (
    DatasetSplit,
    Label,
    MmfndError,
    Origin,
    Post,
    Split,
    namespaced_id,
    register_split,
)

log = logging.getLogger(__name__)

MANIFEST_COLUMNS = ("id", "text", "image_ref", "event_id", "label", "split", "origin", "derived_from")

VIDEO_EXTENSIONS = frozenset({".mp4", ".avi", ".mov", ".mkv", ".webm", ".flv", ".gif"})


class MalformedRecord(MmfndError):
    pass


class UnknownVeracityTag(MmfndError):
    pass


class SchemaMismatch(MmfndError):
    pass


class EncodingError(MmfndError):
    pass


class MediaType(str, enum.Enum):
    IMAGE = "IMAGE"
    VIDEO = "VIDEO"


# ---------------------------------------------------------------------------
# image store


class ImageStore:
    """Content-addressed image bytes under ``root/objects``.

    A ref is ``"<sha256 hex>/<original filename>"``: two posts showing the same
    bytes share one object while keeping their own filename.
    """

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        (self.root / "objects").mkdir(parents=True, exist_ok=True)

    @staticmethod
    def digest_of(ref: str) -> str:
        return ref.split("/", 1)[0]

    def _object_path(self, digest: str) -> Path:
        return self.root / "objects" / digest[:2] / digest

    def path(self, ref: str) -> Path:
        return self._object_path(self.digest_of(ref))

    def add_bytes(self, data: bytes, filename: str) -> str:
        digest = hashlib.sha256(data).hexdigest()
        target = self._object_path(digest)
        if not target.exists():
            target.parent.mkdir(parents=True, exist_ok=True)
            tmp = target.with_suffix(".tmp")
            tmp.write_bytes(data)
            os.replace(tmp, target)
        return f"{digest}/{os.path.basename(filename)}"

    def add_file(self, path: str | os.PathLike) -> str:
        path = Path(path)
        return self.add_bytes(path.read_bytes(), path.name)

    def exists(self, ref: str) -> bool:
        return bool(ref) and self.path(ref).is_file()

    def read(self, ref: str) -> bytes:
        return self.path(ref).read_bytes()


class ImageLocator(Protocol):
    def resolve(self, key: str) -> Optional[str]:
        """Return an image ref for ``key`` or ``None`` when it is unavailable."""


class DirectoryImageLocator:
    """Resolves media ids (file stems) or relative paths inside ``source_dir``,
    importing every hit into ``store``."""

    def __init__(self, source_dir: str | os.PathLike, store: ImageStore):
        self.source_dir = Path(source_dir)
        self.store = store
        self._by_stem: dict[str, Path] = {}
        if self.source_dir.is_dir():
            for p in sorted(self.source_dir.rglob("*")):
                if p.is_file():
                    self._by_stem.setdefault(p.stem, p)

    def media_type(self, media_id: str) -> Optional[MediaType]:
        p = self._by_stem.get(media_id)
        if p is None:
            return None
        return MediaType.VIDEO if p.suffix.lower() in VIDEO_EXTENSIONS else MediaType.IMAGE

    def resolve(self, key: str) -> Optional[str]:
        p = self._by_stem.get(key)
        if p is None:
            candidate = (self.source_dir / key).resolve()
            if candidate.is_file() and self.source_dir.resolve() in candidate.parents:
                p = candidate
        if p is None or p.suffix.lower() in VIDEO_EXTENSIONS:
            return None
        return self.store.add_file(p)


# ---------------------------------------------------------------------------
# raw records


@dataclass(frozen=True)
class RawTweetRecord:
    tweet_id: str
    tweet_text: str
    media_ids: tuple[str, ...]
    media_type: MediaType
    event_tag: str
    veracity_tag: str


@dataclass(frozen=True)
class RawCaptionRecord:
    article_id: str
    caption: str
    image_path: str
    source: str = ""
    topic: Optional[str] = None


@dataclass
class TweetColumns:
    """Column mapping for MediaEval-style tweet files.

    MediaEval releases encode the event in the image id prefix
    (``sandyA_fake_29``), so ``event_pattern`` extracts it when no explicit
    event column exists.
    """

    tweet_id: str = "tweetId"
    text: str = "tweetText"
    media: str = "imageId(s)"
    label: str = "label"
    event: Optional[str] = None
    media_type: Optional[str] = None
    media_separator: str = ","
    event_pattern: str = r"^(?P<event>[^_]+)_"

    @classmethod
    def from_mapping(cls, m: Mapping) -> "TweetColumns":
        return cls(**dict(m))


@dataclass
class CaptionColumns:
    article_id: str = "id"
    caption: str = "caption"
    image_path: str = "image_path"
    source: str = "source"
    topic: str = "topic"

    @classmethod
    def from_mapping(cls, m: Mapping) -> "CaptionColumns":
        return cls(**dict(m))


@dataclass
class VeracityMap:
    """Deterministic veracity tag mapping; ``humor`` counts as fake by default."""

    tags: dict[str, Label] = field(
        default_factory=lambda: {"fake": Label.FAKE, "real": Label.REAL, "humor": Label.FAKE}
    )

    @classmethod
    def with_humor_as(cls, label: Label) -> "VeracityMap":
        vm = cls()
        vm.tags["humor"] = label
        return vm

    def __call__(self, tag: str) -> Label:
        try:
            return self.tags[tag.strip().lower()]
        except KeyError:
            raise UnknownVeracityTag(f"unknown veracity tag {tag!r}") from None


def read_mediaeval(
    path: str | os.PathLike,
    columns: TweetColumns | None = None,
    media_type_of: Callable[[str], Optional[MediaType]] | None = None,
) -> Iterator[RawTweetRecord]:
    """Yield raw tweet records from a tab-separated MediaEval file.

    Rows with missing required columns are yielded with empty fields so the
    ingest step decides whether to fail or skip them.
    """
    columns = columns or TweetColumns()
    event_re = re.compile(columns.event_pattern) if columns.event_pattern else None
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        for row in reader:
            media = tuple(
                m.strip() for m in (row.get(columns.media) or "").split(columns.media_separator) if m.strip()
            )
            if columns.media_type and row.get(columns.media_type):
                mtype = MediaType(row[columns.media_type].strip().upper())
            elif media_type_of is not None and any(media_type_of(m) == MediaType.VIDEO for m in media):
                mtype = MediaType.VIDEO
            else:
                mtype = MediaType.IMAGE
            if columns.event and row.get(columns.event):
                event = row[columns.event].strip()
            elif event_re is not None and media:
                m = event_re.match(media[0])
                event = m.group("event") if m else ""
            else:
                event = ""
            yield RawTweetRecord(
                tweet_id=(row.get(columns.tweet_id) or "").strip(),
                tweet_text=row.get(columns.text) or "",
                media_ids=media,
                media_type=mtype,
                event_tag=event,
                veracity_tag=(row.get(columns.label) or "").strip(),
            )


def read_visualnews(path: str | os.PathLike, columns: CaptionColumns | None = None) -> Iterator[RawCaptionRecord]:
    """Yield caption records from a VisualNews-style JSON array or JSON-lines file."""
    columns = columns or CaptionColumns()
    with open(path, encoding="utf-8") as fh:
        head = fh.read(1)
        while head and head.isspace():
            head = fh.read(1)
        fh.seek(0)
        entries = json.load(fh) if head == "[" else (json.loads(line) for line in fh if line.strip())
        for e in entries:
            yield RawCaptionRecord(
                article_id=str(e.get(columns.article_id, "")).strip(),
                caption=e.get(columns.caption) or "",
                image_path=e.get(columns.image_path) or "",
                source=e.get(columns.source) or "",
                topic=e.get(columns.topic),
            )


# ---------------------------------------------------------------------------
# ingestion


def _skip_or_raise(exc: MmfndError, permissive: bool) -> None:
    if not permissive:
        raise exc
    log.warning("skipping record: %s", exc)


def ingest_tweets(
    records: Iterable[RawTweetRecord],
    image_store: ImageLocator,
    *,
    origin: Origin | str = Origin.ME2015,
    split: Split | str = Split.TRAIN,
    name: str = "tweets",
    permissive: bool = False,
    veracity: VeracityMap | None = None,
) -> DatasetSplit:
    """Turn tweets into posts, one per (tweet, image) pair.

    Video tweets and tweets whose images cannot be resolved are dropped.
    Unknown veracity tags and malformed rows raise unless ``permissive``.
    """
    origin, split = Origin(origin), Split(split)
    veracity = veracity or VeracityMap()
    posts: list[Post] = []
    for rec in records:
        if not rec.tweet_id or not rec.tweet_text.strip() or not rec.media_ids:
            _skip_or_raise(MalformedRecord(f"tweet {rec.tweet_id or '<no id>'}: missing id, text or media"), permissive)
            continue
        if not rec.event_tag:
            _skip_or_raise(MalformedRecord(f"tweet {rec.tweet_id}: no event"), permissive)
            continue
        try:
            label = veracity(rec.veracity_tag)
        except UnknownVeracityTag as exc:
            _skip_or_raise(exc, permissive)
            continue
        if rec.media_type is MediaType.VIDEO:
            log.info("dropping video tweet %s", rec.tweet_id)
            continue
        multi = len(rec.media_ids) > 1
        for k, media_id in enumerate(rec.media_ids):
            ref = image_store.resolve(media_id)
            if ref is None:
                log.info("dropping tweet %s media %s: image unavailable", rec.tweet_id, media_id)
                continue
            native = f"{rec.tweet_id}#{k}" if multi else rec.tweet_id
            posts.append(
                Post(
                    id=namespaced_id(origin, native),
                    text=rec.tweet_text,
                    image_ref=ref,
                    label=label,
                    split=split,
                    origin=origin,
                    event_id=rec.event_tag,
                )
            )
    return register_split(name, posts)


def ingest_captions(
    records: Iterable[RawCaptionRecord],
    image_store: ImageLocator,
    *,
    split: Split | str = Split.TRAIN,
    name: str = "captions",
    permissive: bool = False,
) -> DatasetSplit:
    """Turn caption records into REAL posts without event ids."""
    split = Split(split)
    posts: list[Post] = []
    for rec in records:
        if not rec.article_id or not rec.caption.strip() or not rec.image_path:
            _skip_or_raise(
                MalformedRecord(f"caption {rec.article_id or '<no id>'}: empty id, caption or image path"), permissive
            )
            continue
        ref = image_store.resolve(rec.image_path)
        if ref is None:
            log.info("dropping caption %s: image unavailable", rec.article_id)
            continue
        posts.append(
            Post(
                id=namespaced_id(Origin.VN, rec.article_id),
                text=rec.caption,
                image_ref=ref,
                label=Label.REAL,
                split=split,
                origin=Origin.VN,
            )
        )
    return register_split(name, posts)


# ---------------------------------------------------------------------------
# manifest

_ESCAPES = {"\\": "\\\\", "\t": "\\t", "\n": "\\n", "\r": "\\r"}
_UNESCAPES = {"\\": "\\", "t": "\t", "n": "\n", "r": "\r"}
_ESCAPE_RE = re.compile(r"[\\\t\n\r]")
_UNESCAPE_RE = re.compile(r"\\(.)", re.DOTALL)


def _escape(value: str) -> str:
    return _ESCAPE_RE.sub(lambda m: _ESCAPES[m.group(0)], value)


def _unescape(value: str) -> str:
    def repl(m):
        try:
            return _UNESCAPES[m.group(1)]
        except KeyError:
            raise SchemaMismatch(f"bad escape sequence \\{m.group(1)}") from None

    return _UNESCAPE_RE.sub(repl, value)


def manifest_bytes(posts: Iterable[Post]) -> bytes:
    out = io.StringIO()
    out.write("\t".join(MANIFEST_COLUMNS) + "\n")
    for p in posts:
        fields = (
            p.id,
            p.text,
            p.image_ref,
            p.event_id or "",
            p.label.name if p.label is not None else "",
            p.split.value,
            p.origin.value,
            p.derived_from or "",
        )
        out.write("\t".join(_escape(f) for f in fields) + "\n")
    return out.getvalue().encode("utf-8")


def write_posts(posts: Iterable[Post], path: str | os.PathLike) -> None:
    """Write posts (pending labels allowed) to a manifest file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(manifest_bytes(posts))
    os.replace(tmp, path)


def write_manifest(split: DatasetSplit, path: str | os.PathLike) -> None:
    write_posts(split.posts, path)


def read_posts(path: str | os.PathLike) -> list[Post]:
    """Read a manifest into posts; pending (empty) labels come back as ``None``."""
    try:
        text = Path(path).read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise EncodingError(f"{path}: not valid UTF-8 ({exc})") from exc
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or tuple(lines[0].split("\t")) != MANIFEST_COLUMNS:
        raise SchemaMismatch(f"{path}: expected header {MANIFEST_COLUMNS}")
    posts = []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if len(fields) != len(MANIFEST_COLUMNS):
            raise SchemaMismatch(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} fields, got {len(fields)}")
        pid, text_, ref, event, label, split, origin, derived = (_unescape(f) for f in fields)
        posts.append(
            Post(
                id=pid,
                text=text_,
                image_ref=ref,
                label=Label[label] if label else None,
                split=Split(split),
                origin=Origin(origin),
                event_id=event or None,
                derived_from=derived or None,
            )
        )
    return posts


def read_manifest(path: str | os.PathLike, name: str | None = None) -> DatasetSplit:
    path = Path(path)
    return register_split(name or path.name.split(".")[0], read_posts(path))
