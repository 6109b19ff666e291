"""Domain types shared by every stage: labels, posts and dataset splits."""

from __future__ import annotations

import enum
import hashlib
import logging
import warnings
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from typing import Optional

log = logging.getLogger(__name__)


class MmfndError(Exception):
    """Base class for every error raised by the toolkit."""


class DuplicateId(MmfndError):
    pass


class PendingLabel(MmfndError):
    """A post still waits for a human annotation and cannot enter a split."""


class EmptySplitWarning(UserWarning):
    pass


class Label(enum.IntEnum):
    FAKE = 0
    REAL = 1

    @classmethod
    def parse(cls, value: str) -> "Label":
        try:
            return cls[value.strip().upper()]
        except KeyError:
            raise ValueError(f"not a label: {value!r}") from None


class Split(str, enum.Enum):
    TRAIN = "TRAIN"
    VALIDATION = "VALIDATION"
    TEST = "TEST"


class Origin(str, enum.Enum):
    ME2015 = "ME2015"
    ME2016 = "ME2016"
    VN = "VN"
    SYNTHETIC = "SYNTHETIC"


def namespaced_id(origin: Origin | str, native_id: str) -> str:
    origin = Origin(origin)
    return f"{origin.value}/{native_id}"


def derive_seed(seed: int, *keys: object) -> int:
    """Stable 63-bit seed from a parent seed and any number of string keys."""
    h = hashlib.sha256(str(int(seed)).encode())
    for key in keys:
        h.update(b"\x1f")
        h.update(str(key).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "big") >> 1


@dataclass(frozen=True)
class Post:
    """One image-text sample.

    ``label`` is ``None`` only for event-removed posts that still wait for
    an annotation; such posts are rejected by :func:`register_split`.
    ``derived_from`` is ``"<technique>:<source id>"`` for manipulated posts.
    """

    id: str
    text: str
    image_ref: str
    label: Optional[Label]
    split: Split
    origin: Origin
    event_id: Optional[str] = None
    derived_from: Optional[str] = None

    def __post_init__(self):
        if not self.id:
            raise ValueError("post id must be non-empty")
        if self.label is not None and not isinstance(self.label, Label):
            object.__setattr__(self, "label", Label(self.label))
        if not isinstance(self.split, Split):
            object.__setattr__(self, "split", Split(self.split))
        if not isinstance(self.origin, Origin):
            object.__setattr__(self, "origin", Origin(self.origin))


@dataclass(frozen=True)
class DatasetSplit:
    name: str
    posts: tuple[Post, ...]
    counts: dict = field(default_factory=dict, compare=True)

    def __len__(self) -> int:
        return len(self.posts)

    def __iter__(self):
        return iter(self.posts)

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self.posts]

    def by_id(self) -> dict[str, Post]:
        return {p.id: p for p in self.posts}

    def labels(self) -> list[Label]:
        return [p.label for p in self.posts]


def _count(posts: Sequence[Post]) -> dict[Label, int]:
    counts = {Label.FAKE: 0, Label.REAL: 0}
    for p in posts:
        counts[p.label] += 1
    return counts


def register_split(name: str, posts: Iterable[Post]) -> DatasetSplit:
    """Freeze ``posts`` into a split, checking ids and recounting labels."""
    posts = tuple(posts)
    seen: set[str] = set()
    for p in posts:
        if p.id in seen:
            raise DuplicateId(f"split {name!r}: duplicate post id {p.id!r}")
        seen.add(p.id)
        if p.label is None:
            raise PendingLabel(f"split {name!r}: post {p.id!r} has no label yet")
    if not posts:
        warnings.warn(f"split {name!r} is empty", EmptySplitWarning, stacklevel=2)
    return DatasetSplit(name=name, posts=posts, counts=_count(posts))


def merge_splits(splits: Iterable[DatasetSplit], name: str) -> DatasetSplit:
    """Concatenate splits in the given order; ids must stay unique."""
    posts: list[Post] = []
    for s in splits:
        posts.extend(s.posts)
    return register_split(name, posts)
