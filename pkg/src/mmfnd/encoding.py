"""Modality encoders behind one interface, and the on-disk embedding cache.

Pretrained encoders (BERT, ResNet-50, CLIP) are thin adapters that need the
``pretrained`` extra and downloadable weights. :class:`MockEncoder` is the
deterministic stand-in used for tests and desk-scale runs.
"""

from __future__ import annotations

import enum
import hashlib
import io
import json
import logging
import os
import re
import struct
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol

import numpy as np
from PIL import Image, UnidentifiedImageError

from .core import MmfndError, Post

log = logging.getLogger(__name__)


class EncoderUnavailable(MmfndError):
    pass


class UndecodableImage(MmfndError):
    pass


class CacheKeyMismatch(MmfndError):
    pass


class Modality(str, enum.Enum):
    TEXT = "TEXT"
    IMAGE = "IMAGE"
    JOINT = "JOINT"


@dataclass(frozen=True)
class EncoderSpec:
    name: str
    modality: Modality
    output_dim: int
    max_text_tokens: int = 512
    image_side: int = 224
    mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    std: tuple[float, float, float] = (0.229, 0.224, 0.225)
    # where output_dim comes from when it is not stated alongside the model description
    dim_source: str = "paper"

    def __post_init__(self):
        if self.output_dim <= 0 or self.max_text_tokens <= 0 or self.image_side <= 0:
            raise ValueError(f"{self.name}: dimensions must be positive")


_CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
_CLIP_STD = (0.26862954, 0.26130258, 0.27577711)

PRESETS: dict[str, EncoderSpec] = {
    "bert": EncoderSpec("bert-base-uncased", Modality.TEXT, 768, max_text_tokens=512),
    "resnet50": EncoderSpec("resnet50", Modality.IMAGE, 2048, image_side=224),
    "clip-vit-b32": EncoderSpec(
        "clip-vit-b32", Modality.JOINT, 512, max_text_tokens=77, image_side=224, mean=_CLIP_MEAN, std=_CLIP_STD
    ),
    "clip-rn50x4": EncoderSpec(
        "clip-rn50x4",
        Modality.JOINT,
        640,
        max_text_tokens=77,
        image_side=288,
        mean=_CLIP_MEAN,
        std=_CLIP_STD,
        dim_source="external: released RN50x4 checkpoint",
    ),
}


def preset(name: str) -> EncoderSpec:
    try:
        return PRESETS[name]
    except KeyError:
        raise EncoderUnavailable(f"unknown encoder preset {name!r}; known: {sorted(PRESETS)}") from None


def mock_spec(modality: Modality | str, dim: int, max_text_tokens: int = 64, image_side: int = 32) -> EncoderSpec:
    modality = Modality(modality)
    return EncoderSpec(
        f"mock-{modality.value.lower()}-{dim}", modality, dim, max_text_tokens=max_text_tokens, image_side=image_side,
        dim_source="mock",
    )


@dataclass(frozen=True)
class EmbeddingPair:
    post_id: str
    text_vec: np.ndarray
    image_vec: np.ndarray
    encoder_names: tuple[str, str]

    def __post_init__(self):
        for v in (self.text_vec, self.image_vec):
            if v.ndim != 1 or not np.all(np.isfinite(v)):
                raise ValueError(f"{self.post_id}: embedding must be a finite vector")


# ---------------------------------------------------------------------------
# preprocessing

URL_RE = re.compile(r"https?://\S+|www\.\S+", re.IGNORECASE)
URL_SENTINEL = "[URL]"


def preprocess_text(text: str, max_tokens: int, replace_urls: bool = True) -> str:
    if replace_urls:
        text = URL_RE.sub(URL_SENTINEL, text)
    return " ".join(text.split()[:max_tokens])


def load_image(data: bytes) -> Image.Image:
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise UndecodableImage(str(exc)) from exc
    return img.convert("RGB")


def preprocess_image(data: bytes, side: int) -> np.ndarray:
    """Shortest-side resize to ``side`` then center crop; uint8 HxWx3."""
    img = load_image(data)
    w, h = img.size
    scale = side / min(w, h)
    nw, nh = max(side, round(w * scale)), max(side, round(h * scale))
    img = img.resize((nw, nh), Image.Resampling.BICUBIC)
    left, top = (nw - side) // 2, (nh - side) // 2
    return np.asarray(img.crop((left, top, left + side, top + side)), dtype=np.uint8)


def normalize_pixels(pixels: np.ndarray, spec: EncoderSpec) -> np.ndarray:
    x = pixels.astype(np.float32) / 255.0
    return (x - np.asarray(spec.mean, np.float32)) / np.asarray(spec.std, np.float32)


# ---------------------------------------------------------------------------
# mock encoder

_KEY_RE = re.compile(rb"#\s*mmfnd-key:\s*(\S+)")


def image_pairing_key(data: bytes) -> Optional[str]:
    """Key planted in a netpbm header comment by the synthetic fixtures."""
    m = _KEY_RE.search(data[:256])
    return m.group(1).decode("utf-8") if m else None


def _unit_gaussian(seed_material: bytes, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(seed_material).digest()[:16], "little")
    v = np.random.default_rng(seed).standard_normal(dim)
    return v / np.linalg.norm(v)


def mock_encode(
    content: str | bytes,
    dim: int,
    seed: int,
    key: Optional[str] = None,
    signal_strength: float = 0.0,
) -> np.ndarray:
    """Deterministic unit vector derived from a hash of ``content``.

    With a pairing ``key`` the vector leans towards a direction shared by
    every input carrying the same key: ``s * c_key + sqrt(1 - s^2) * noise``.
    Two inputs with the same key then have cosine similarity near ``s**2``,
    unrelated inputs near 0.
    """
    if dim <= 0:
        raise ValueError("dim must be positive")
    if isinstance(content, str):
        content = content.encode("utf-8")
    prefix = f"{seed}:{dim}:".encode()
    v = _unit_gaussian(prefix + b"content:" + content, dim)
    if key is not None and signal_strength > 0:
        s = float(signal_strength)
        c = _unit_gaussian(prefix + b"key:" + key.encode("utf-8"), dim)
        v = s * c + np.sqrt(max(0.0, 1.0 - s * s)) * v
        v /= np.linalg.norm(v)
    return v


@dataclass
class PlantedKeys:
    """Hidden pairing keys: the event a text is about, the key an image carries.

    A text is about the first event it mentions; a text that mentions none
    is still about its post's ``event_id`` (removing the name of a disaster
    from a caption does not change what the caption describes).

    In planted-pair mode a post's two vectors share the key direction only
    when both keys exist and are equal; otherwise both are plain content
    hashes, i.e. independent.
    """

    text_key: Callable[[str], Optional[str]]
    image_key: Callable[[bytes], Optional[str]] = image_pairing_key

    @classmethod
    def from_aliases(cls, aliases) -> "PlantedKeys":
        def text_key(text: str) -> Optional[str]:
            found = aliases.detect(text)
            return found[0] if found else None

        return cls(text_key=text_key)

    def pair_key(self, text: str, image: bytes, event_id: Optional[str] = None) -> Optional[str]:
        t = self.text_key(text)
        if t is None:
            t = event_id
        return t if t is not None and t == self.image_key(image) else None


class Encoder(Protocol):
    spec: EncoderSpec
    calls: int

    def encode_texts(self, texts: Sequence[str]) -> np.ndarray: ...

    def encode_images(self, images: Sequence[bytes]) -> np.ndarray: ...


@dataclass
class MockEncoder:
    """Hash-based stand-in encoder. ``keys`` (one per input, or ``None``)
    plant the pairing direction with weight ``signal_strength``."""

    spec: EncoderSpec
    seed: int = 0
    signal_strength: float = 0.0
    replace_urls: bool = True
    calls: int = field(default=0, init=False)

    def _keys(self, keys, n):
        return [None] * n if keys is None else list(keys)

    def encode_texts(self, texts: Sequence[str], keys: Optional[Sequence[Optional[str]]] = None) -> np.ndarray:
        self.calls += 1
        out = np.empty((len(texts), self.spec.output_dim), np.float32)
        for i, (t, key) in enumerate(zip(texts, self._keys(keys, len(texts)))):
            t = preprocess_text(t, self.spec.max_text_tokens, self.replace_urls)
            out[i] = mock_encode("T" + t, self.spec.output_dim, self.seed, key, self.signal_strength)
        return out

    def encode_images(self, images: Sequence[bytes], keys: Optional[Sequence[Optional[str]]] = None) -> np.ndarray:
        self.calls += 1
        out = np.empty((len(images), self.spec.output_dim), np.float32)
        for i, (data, key) in enumerate(zip(images, self._keys(keys, len(images)))):
            pixels = preprocess_image(data, self.spec.image_side)
            out[i] = mock_encode(b"I" + pixels.tobytes(), self.spec.output_dim, self.seed, key, self.signal_strength)
        return out


# ---------------------------------------------------------------------------
# pretrained adapters


def _require_torch():
    try:
        import torch  # noqa: F401
    except ImportError as exc:
        raise EncoderUnavailable("pretrained encoders need torch; install mmfnd[pretrained] or use the mock") from exc
    return torch


class PretrainedEncoder:
    """Frozen BERT / ResNet-50 / CLIP feature extractor.

    Models are loaded lazily on first use, in eval mode, without gradients.
    """

    _HF_NAMES = {
        "bert-base-uncased": "bert-base-uncased",
        "clip-vit-b32": "openai/clip-vit-base-patch32",
    }

    def __init__(self, spec: EncoderSpec, device: str = "cpu", replace_urls: bool = True):
        self.spec = spec
        self.device = device
        self.replace_urls = replace_urls
        self.calls = 0
        self._model = None
        self._processor = None

    def _load(self):
        if self._model is not None:
            return
        torch = _require_torch()
        try:
            if self.spec.name == "resnet50":
                import torchvision

                weights = torchvision.models.ResNet50_Weights.IMAGENET1K_V2
                model = torchvision.models.resnet50(weights=weights)
                model.fc = torch.nn.Identity()
            elif self.spec.name == "bert-base-uncased":
                from transformers import AutoModel, AutoTokenizer

                self._processor = AutoTokenizer.from_pretrained(self._HF_NAMES[self.spec.name])
                model = AutoModel.from_pretrained(self._HF_NAMES[self.spec.name])
            elif self.spec.name == "clip-vit-b32":
                from transformers import CLIPModel, CLIPTokenizer

                self._processor = CLIPTokenizer.from_pretrained(self._HF_NAMES[self.spec.name])
                model = CLIPModel.from_pretrained(self._HF_NAMES[self.spec.name])
            else:
                raise EncoderUnavailable(f"no pretrained adapter for {self.spec.name!r}; use the mock encoder")
        except EncoderUnavailable:
            raise
        except Exception as exc:  # missing weights, no network, ...
            raise EncoderUnavailable(
                f"could not load {self.spec.name!r} ({exc}); run with the mock encoder (--mock) instead"
            ) from exc
        self._model = model.eval().to(self.device)

    def encode_texts(self, texts: Sequence[str]) -> np.ndarray:
        self._load()
        import torch

        self.calls += 1
        texts = [preprocess_text(t, 10**6, self.replace_urls) for t in texts]
        batch = self._processor(
            texts, padding=True, truncation=True, max_length=self.spec.max_text_tokens, return_tensors="pt"
        ).to(self.device)
        with torch.no_grad():
            if self.spec.modality is Modality.JOINT:
                out = self._model.get_text_features(**batch)
            else:
                out = self._model(**batch).last_hidden_state[:, 0]
        return out.cpu().numpy().astype(np.float32)

    def encode_images(self, images: Sequence[bytes]) -> np.ndarray:
        self._load()
        import torch

        self.calls += 1
        arr = np.stack([normalize_pixels(preprocess_image(d, self.spec.image_side), self.spec) for d in images])
        pixels = torch.from_numpy(arr).permute(0, 3, 1, 2).to(self.device)
        with torch.no_grad():
            if self.spec.modality is Modality.JOINT:
                out = self._model.get_image_features(pixel_values=pixels)
            else:
                out = self._model(pixels)
        return out.cpu().numpy().astype(np.float32)


# ---------------------------------------------------------------------------
# batch encoding


def content_digest(post: Post) -> bytes:
    return hashlib.sha256(post.text.encode("utf-8") + b"\0" + post.image_ref.encode("utf-8")).digest()[:16]


def encode_batch(
    posts: Sequence[Post],
    text_encoder: Encoder,
    image_encoder: Encoder,
    image_store,
    planted: Optional[PlantedKeys] = None,
    batch_size: int = 256,
) -> list[EmbeddingPair]:
    """One embedding pair per post, in input order; undecodable images drop the post.

    ``planted`` switches mock encoders into planted-pair mode.
    """
    names = (text_encoder.spec.name, image_encoder.spec.name)
    out: list[EmbeddingPair] = []
    for lo in range(0, len(posts), batch_size):
        chunk = posts[lo : lo + batch_size]
        images, kept = [], []
        for p in chunk:
            data = image_store.read(p.image_ref)
            try:
                load_image(data)
            except UndecodableImage as exc:
                log.warning("dropping %s: undecodable image (%s)", p.id, exc)
                continue
            images.append(data)
            kept.append(p)
        if not kept:
            continue
        if planted is not None:
            keys = [planted.pair_key(p.text, data, p.event_id) for p, data in zip(kept, images)]
            tv = text_encoder.encode_texts([p.text for p in kept], keys=keys)
            iv = image_encoder.encode_images(images, keys=keys)
        else:
            tv = text_encoder.encode_texts([p.text for p in kept])
            iv = image_encoder.encode_images(images)
        out.extend(EmbeddingPair(p.id, tv[i], iv[i], names) for i, p in enumerate(kept))
    return out


# ---------------------------------------------------------------------------
# cache

_MAGIC = b"MMFNDEMB1\n"


def cache_embeddings(
    pairs: Sequence[EmbeddingPair], path: str | os.PathLike, digests: Optional[Sequence[bytes]] = None
) -> None:
    """Write pairs as a JSON header followed by fixed-width float32 records."""
    if not pairs:
        raise ValueError("nothing to cache")
    names = pairs[0].encoder_names
    d_t, d_i = len(pairs[0].text_vec), len(pairs[0].image_vec)
    ids = [p.post_id.encode("utf-8") for p in pairs]
    width = max(len(i) for i in ids)
    digests = list(digests) if digests is not None else [b"\0" * 16] * len(pairs)
    header = json.dumps(
        {"encoders": list(names), "dims": [d_t, d_i], "count": len(pairs), "id_width": width, "dtype": "<f4"},
        sort_keys=True,
    ).encode()
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    for pid, digest, p in zip(ids, digests, pairs):
        if p.encoder_names != names or len(p.text_vec) != d_t or len(p.image_vec) != d_i:
            raise CacheKeyMismatch(f"{p.post_id}: mixed encoders or dimensions in one cache")
        buf.write(pid.ljust(width, b"\0"))
        buf.write(digest)
        buf.write(np.asarray(p.text_vec, "<f4").tobytes())
        buf.write(np.asarray(p.image_vec, "<f4").tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def _read_cache(path: str | os.PathLike) -> tuple[dict, list[tuple[str, bytes, np.ndarray, np.ndarray]]]:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise CacheKeyMismatch(f"{path}: not an embedding cache")
    off = len(_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    header = json.loads(data[off : off + hlen])
    off += hlen
    d_t, d_i = header["dims"]
    width = header["id_width"]
    rec_len = width + 16 + 4 * (d_t + d_i)
    rows = []
    for k in range(header["count"]):
        base = off + k * rec_len
        pid = data[base : base + width].rstrip(b"\0").decode("utf-8")
        digest = data[base + width : base + width + 16]
        vec = np.frombuffer(data, "<f4", d_t + d_i, base + width + 16).astype(np.float32)
        rows.append((pid, digest, vec[:d_t], vec[d_t:]))
    return header, rows


def load_embeddings(path: str | os.PathLike, encoder_names: Optional[tuple[str, str]] = None) -> list[EmbeddingPair]:
    header, rows = _read_cache(path)
    names = tuple(header["encoders"])
    if encoder_names is not None and tuple(encoder_names) != names:
        raise CacheKeyMismatch(f"{path}: cache holds {names}, requested {tuple(encoder_names)}")
    return [EmbeddingPair(pid, t, i, names) for pid, _, t, i in rows]


class EmbeddingCache:
    """Embedding cache keyed by post id and encoder names.

    Entries whose post content changed since they were written are stale and
    get re-encoded.
    """

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)

    def lookup(self, posts: Sequence[Post], encoder_names: tuple[str, str]) -> dict[str, EmbeddingPair]:
        if not self.path.exists():
            return {}
        header, rows = _read_cache(self.path)
        if tuple(header["encoders"]) != tuple(encoder_names):
            raise CacheKeyMismatch(f"{self.path}: cache holds {tuple(header['encoders'])}, requested {encoder_names}")
        wanted = {p.id: content_digest(p) for p in posts}
        return {
            pid: EmbeddingPair(pid, t, i, tuple(encoder_names))
            for pid, digest, t, i in rows
            if wanted.get(pid) == digest
        }

    def get_or_encode(
        self,
        posts: Sequence[Post],
        text_encoder: Encoder,
        image_encoder: Encoder,
        image_store,
        planted: Optional[PlantedKeys] = None,
    ) -> list[EmbeddingPair]:
        names = (text_encoder.spec.name, image_encoder.spec.name)
        hits = self.lookup(posts, names)
        missing = [p for p in posts if p.id not in hits]
        if missing:
            for pair in encode_batch(missing, text_encoder, image_encoder, image_store, planted):
                hits[pair.post_id] = pair
            kept = [p for p in posts if p.id in hits]
            cache_embeddings([hits[p.id] for p in kept], self.path, [content_digest(p) for p in kept])
        return [hits[p.id] for p in posts if p.id in hits]
