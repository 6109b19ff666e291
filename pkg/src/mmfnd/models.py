"""Fusion classifiers (BERT-ResNet, MLP-CLIP, CLIP-MMBT), training with
best-validation-loss selection, checkpoints and batch prediction."""

from __future__ import annotations

import copy
import enum
import hashlib
import io
import json
import logging
import os
import re
import struct
import time
import warnings
from collections.abc import Sequence
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import nn
from .core import Label, MmfndError, Post, derive_seed

log = logging.getLogger(__name__)


class DimMismatch(MmfndError):
    pass


class NonFiniteLoss(MmfndError):
    pass


class EmptySplitError(MmfndError):
    pass


class Architecture(str, enum.Enum):
    BERT_RESNET = "BERT_RESNET"
    MLP_CLIP = "MLP_CLIP"
    CLIP_MMBT = "CLIP_MMBT"


class OutputMode(str, enum.Enum):
    TWO_UNIT_SIGMOID = "TWO_UNIT_SIGMOID"
    ONE_UNIT_SIGMOID = "ONE_UNIT_SIGMOID"


@dataclass(frozen=True)
class FusionModelConfig:
    architecture: Architecture
    proj_dims: tuple[int, ...] = ()
    proj_activations: tuple[str, ...] = ()
    fusion_dim: int = 0
    fusion_activation: str = "relu"
    output_mode: OutputMode = OutputMode.TWO_UNIT_SIGMOID
    # bitransformer path
    hidden: int = 64
    layers: int = 2
    heads: int = 4
    ffn_dim: int = 128
    image_tokens: int = 3
    max_text_tokens: int = 48
    vocab_size: int = 4096

    def to_dict(self) -> dict:
        d = asdict(self)
        d["architecture"] = self.architecture.value
        d["output_mode"] = self.output_mode.value
        d["proj_dims"] = list(self.proj_dims)
        d["proj_activations"] = list(self.proj_activations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FusionModelConfig":
        d = dict(d)
        d["architecture"] = Architecture(d["architecture"])
        d["output_mode"] = OutputMode(d["output_mode"])
        d["proj_dims"] = tuple(d["proj_dims"])
        d["proj_activations"] = tuple(d["proj_activations"])
        return cls(**d)


def preset_config(architecture: Architecture | str, **overrides) -> FusionModelConfig:
    architecture = Architecture(architecture)
    if architecture is Architecture.BERT_RESNET:
        base = dict(proj_dims=(256, 256), proj_activations=("gelu", "gelu"), fusion_dim=128, fusion_activation="relu")
    elif architecture is Architecture.MLP_CLIP:
        base = dict(proj_dims=(256, 128), proj_activations=("relu", "relu"), fusion_dim=0)
    else:
        base = dict(output_mode=OutputMode.ONE_UNIT_SIGMOID)
    base.update(overrides)
    return FusionModelConfig(architecture=architecture, **base)


@dataclass(frozen=True)
class Prediction:
    post_id: str
    score: float
    label: Label

    @classmethod
    def from_score(cls, post_id: str, score: float) -> "Prediction":
        return cls(post_id, float(score), Label.REAL if score >= 0.5 else Label.FAKE)


# ---------------------------------------------------------------------------
# features

_TOKEN_RE = re.compile(r"\[URL\]|\w+|[^\w\s]")
_URL_RE = re.compile(r"https?://\S+|www\.\S+", re.IGNORECASE)

PAD, CLS, SEP, UNK, URL = 0, 1, 2, 3, 4
N_SPECIAL = 5


class HashingTokenizer:
    """Lower-cased word tokenizer hashing words into a fixed vocabulary."""

    def __init__(self, vocab_size: int = 4096):
        if vocab_size <= N_SPECIAL:
            raise ValueError("vocabulary too small")
        self.vocab_size = vocab_size

    def __call__(self, text: str) -> np.ndarray:
        text = _URL_RE.sub("[URL]", text)
        ids = []
        for tok in _TOKEN_RE.findall(text):
            if tok == "[URL]":
                ids.append(URL)
                continue
            h = int.from_bytes(hashlib.blake2b(tok.lower().encode("utf-8"), digest_size=8).digest(), "little")
            ids.append(N_SPECIAL + h % (self.vocab_size - N_SPECIAL))
        return np.asarray(ids, dtype=np.int64)


@dataclass
class Features:
    """Aligned model inputs for a list of posts."""

    ids: list[str]
    text: Optional[np.ndarray]
    image: np.ndarray
    labels: Optional[np.ndarray] = None
    tokens: Optional[list[np.ndarray]] = None

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> "Features":
        idx = np.asarray(idx, dtype=np.int64)
        return Features(
            ids=[self.ids[i] for i in idx],
            text=None if self.text is None else self.text[idx],
            image=self.image[idx],
            labels=None if self.labels is None else self.labels[idx],
            tokens=None if self.tokens is None else [self.tokens[i] for i in idx],
        )

    def astype(self, dtype) -> "Features":
        return Features(
            self.ids,
            None if self.text is None else self.text.astype(dtype),
            self.image.astype(dtype),
            self.labels,
            self.tokens,
        )


def build_features(
    posts: Sequence[Post],
    pairs: Sequence,
    tokenizer: Optional[HashingTokenizer] = None,
    with_labels: bool = True,
) -> Features:
    """Align posts with their cached embedding pairs by post id.

    Posts without a pair (dropped at encoding time) are left out.
    """
    by_id = {p.post_id: p for p in pairs}
    kept = [p for p in posts if p.id in by_id]
    if len(kept) < len(posts):
        log.warning("%d posts have no embeddings and are skipped", len(posts) - len(kept))
    if kept:
        text = np.stack([np.asarray(by_id[p.id].text_vec, np.float64) for p in kept])
        image = np.stack([np.asarray(by_id[p.id].image_vec, np.float64) for p in kept])
    else:
        d_t = len(pairs[0].text_vec) if pairs else 0
        d_i = len(pairs[0].image_vec) if pairs else 0
        text, image = np.zeros((0, d_t)), np.zeros((0, d_i))
    labels = np.asarray([int(p.label) for p in kept], dtype=np.int64) if with_labels else None
    tokens = [tokenizer(p.text) for p in kept] if tokenizer is not None else None
    return Features([p.id for p in kept], text, image, labels, tokens)


# ---------------------------------------------------------------------------
# heads


class EmbeddingFusionHead:
    """Per-modality projection MLPs, concatenation (text first), optional fused
    layer, then a sigmoid output layer."""

    def __init__(self, config: FusionModelConfig, text_dim: int, image_dim: int):
        self.config, self.text_dim, self.image_dim = config, text_dim, image_dim
        self.text_mlp = nn.mlp("text", text_dim, config.proj_dims, config.proj_activations)
        self.image_mlp = nn.mlp("image", image_dim, config.proj_dims, config.proj_activations)
        d = 2 * config.proj_dims[-1]
        self.fusion = None
        if config.fusion_dim:
            self.fusion = nn.mlp("fusion", d, (config.fusion_dim,), (config.fusion_activation,))
            d = config.fusion_dim
        n_out = 2 if config.output_mode is OutputMode.TWO_UNIT_SIGMOID else 1
        self.out = nn.Linear("out", d, n_out)

    def _parts(self):
        return [m for m in (self.text_mlp, self.image_mlp, self.fusion, self.out) if m is not None]

    def init_params(self, rng: np.random.Generator) -> nn.Params:
        params: nn.Params = {}
        for part in self._parts():
            part.init(params, rng)
        return params

    def head_param_names(self, params) -> set[str]:
        return set(params)

    def forward(self, params, feats: Features) -> np.ndarray:
        if feats.text is None or feats.text.shape[1] != self.text_dim or feats.image.shape[1] != self.image_dim:
            got = (None if feats.text is None else feats.text.shape[1], feats.image.shape[1])
            raise DimMismatch(f"model expects dims {(self.text_dim, self.image_dim)}, got {got}")
        t = self.text_mlp.forward(params, feats.text)
        i = self.image_mlp.forward(params, feats.image)
        self._split = t.shape[1]
        h = np.concatenate([t, i], axis=1)
        if self.fusion is not None:
            h = self.fusion.forward(params, h)
        return self.out.forward(params, h)

    def backward(self, params, dlogits) -> nn.Params:
        grads: nn.Params = {}
        dh = self.out.backward(params, grads, dlogits)
        if self.fusion is not None:
            dh = self.fusion.backward(params, grads, dh)
        self.text_mlp.backward(params, grads, dh[:, : self._split])
        self.image_mlp.backward(params, grads, dh[:, self._split :])
        return grads


@dataclass(frozen=True)
class MMBTSequence:
    """Token layout ``[CLS] img_1..img_N [SEP] text... [SEP]``.

    Image slots hold ``-1`` in ``token_ids``; segment 0 covers the image block
    (with its CLS/SEP), segment 1 the text block.
    """

    token_ids: np.ndarray
    segment_ids: np.ndarray
    n_image_tokens: int
    n_text_tokens: int
    truncated: bool

    @property
    def image_slots(self) -> slice:
        return slice(1, 1 + self.n_image_tokens)

    def __len__(self) -> int:
        return len(self.token_ids)


N_MMBT_SPECIALS = 3


def build_mmbt_sequence(image_vec: Optional[np.ndarray], text_tokens: Sequence[int], config: FusionModelConfig) -> MMBTSequence:
    """Lay out image prefix tokens and text tokens; over-long text is cut,
    the image prefix never is."""
    n_img = config.image_tokens
    text = np.asarray(text_tokens, dtype=np.int64)
    truncated = len(text) > config.max_text_tokens
    if truncated:
        text = text[: config.max_text_tokens]
    ids = np.concatenate([[CLS], np.full(n_img, -1), [SEP], text, [SEP]]).astype(np.int64)
    segs = np.concatenate([np.zeros(n_img + 2), np.ones(len(text) + 1)]).astype(np.int64)
    return MMBTSequence(ids, segs, n_img, len(text), truncated)


class MMBTHead:
    """Bitransformer over projected image tokens and text tokens, classified
    from a tanh-pooled first position through one sigmoid unit."""

    def __init__(self, config: FusionModelConfig, text_dim: int, image_dim: int):
        c = config
        self.config, self.text_dim, self.image_dim = config, text_dim, image_dim
        self.max_len = c.max_text_tokens + c.image_tokens + N_MMBT_SPECIALS
        self.tok = nn.Embedding("mmbt.tok", c.vocab_size, c.hidden)
        self.pos = nn.Embedding("mmbt.pos", self.max_len, c.hidden)
        self.seg = nn.Embedding("mmbt.seg", 2, c.hidden)
        self.img = nn.Linear("mmbt.img", image_dim, c.image_tokens * c.hidden)
        self.ln = nn.LayerNorm("mmbt.ln", c.hidden)
        self.blocks = [nn.TransformerBlock(f"mmbt.block{k}", c.hidden, c.heads, c.ffn_dim) for k in range(c.layers)]
        self.pool = nn.Sequential(nn.Linear("mmbt.pool", c.hidden, c.hidden), nn.Tanh())
        n_out = 2 if config.output_mode is OutputMode.TWO_UNIT_SIGMOID else 1
        self.out = nn.Linear("out", c.hidden, n_out)

    def init_params(self, rng):
        params: nn.Params = {}
        for part in (self.tok, self.pos, self.seg, self.img, self.ln, *self.blocks, self.pool, self.out):
            part.init(params, rng)
        return params

    def head_param_names(self, params) -> set[str]:
        """Parameters outside the transformer body."""
        return {k for k in params if k.startswith(("out.", "mmbt.img.", "mmbt.pool."))}

    def forward(self, params, feats: Features) -> np.ndarray:
        if feats.image.shape[1] != self.image_dim:
            raise DimMismatch(f"model expects image dim {self.image_dim}, got {feats.image.shape[1]}")
        if feats.tokens is None:
            raise DimMismatch("the bitransformer needs text tokens")
        c = self.config
        seqs = [build_mmbt_sequence(None, t, c) for t in feats.tokens]
        b, length = len(seqs), max(len(s) for s in seqs)
        ids = np.zeros((b, length), np.int64)
        segs = np.zeros((b, length), np.int64)
        mask = np.zeros((b, length), bool)
        for r, s in enumerate(seqs):
            ids[r, : len(s)] = np.maximum(s.token_ids, PAD)
            segs[r, : len(s)] = s.segment_ids
            mask[r, : len(s)] = True
        self._tok_keep = np.ones((b, length, 1))
        self._tok_keep[:, 1 : 1 + c.image_tokens] = 0.0
        x = self.tok.forward(params, ids) * self._tok_keep
        img = self.img.forward(params, feats.image).reshape(b, c.image_tokens, c.hidden)
        x[:, 1 : 1 + c.image_tokens] += img
        x = x + self.pos.forward(params, np.broadcast_to(np.arange(length), (b, length)))
        x = x + self.seg.forward(params, segs)
        h = self.ln.forward(params, x)
        for block in self.blocks:
            h = block.forward(params, h, mask)
        self._shape = h.shape
        pooled = self.pool.forward(params, h[:, 0])
        return self.out.forward(params, pooled)

    def backward(self, params, dlogits):
        c = self.config
        grads: nn.Params = {}
        dpooled = self.out.backward(params, grads, dlogits)
        dh = np.zeros(self._shape)
        dh[:, 0] = self.pool.backward(params, grads, dpooled)
        for block in reversed(self.blocks):
            dh = block.backward(params, grads, dh)
        dx = self.ln.backward(params, grads, dh)
        self.seg.backward(params, grads, dx)
        self.pos.backward(params, grads, dx)
        b = dx.shape[0]
        self.img.backward(params, grads, dx[:, 1 : 1 + c.image_tokens].reshape(b, -1))
        self.tok.backward(params, grads, dx * self._tok_keep)
        return grads


class FusionModel:
    """A head plus its output rule and loss.

    Two-unit heads are trained with per-unit binary cross-entropy against a
    one-hot target (unit 0 = FAKE, unit 1 = REAL); the decision score is the
    sigmoid of the REAL unit.
    """

    def __init__(self, config: FusionModelConfig, text_dim: int, image_dim: int):
        self.config = config
        self.text_dim, self.image_dim = text_dim, image_dim
        head_cls = MMBTHead if config.architecture is Architecture.CLIP_MMBT else EmbeddingFusionHead
        self.head = head_cls(config, text_dim, image_dim)
        self.two_unit = config.output_mode is OutputMode.TWO_UNIT_SIGMOID

    def init_params(self, seed: int) -> nn.Params:
        return self.head.init_params(np.random.default_rng(derive_seed(seed, "init")))

    def logits(self, params, feats: Features) -> np.ndarray:
        return self.head.forward(params, feats)

    def scores(self, params, feats: Features) -> np.ndarray:
        if len(feats) == 0:
            return np.zeros(0)
        z = self.logits(params, feats)
        return nn.sigmoid(z[:, 1] if self.two_unit else z[:, 0])

    def _targets(self, labels: np.ndarray) -> np.ndarray:
        if self.two_unit:
            return np.eye(2)[labels]
        return labels.astype(np.float64)[:, None]

    def loss(self, params, feats: Features, weights: Optional[np.ndarray] = None) -> float:
        z = self.logits(params, feats)
        per, _ = nn.bce_with_logits(z, self._targets(feats.labels))
        per = per.sum(axis=1)
        if weights is not None:
            per = per * weights
        return float(per.mean())

    def loss_and_grads(self, params, feats: Features, weights: Optional[np.ndarray] = None) -> tuple[float, nn.Params]:
        z = self.logits(params, feats)
        per, dz = nn.bce_with_logits(z, self._targets(feats.labels))
        per = per.sum(axis=1)
        w = np.ones(len(feats)) if weights is None else weights
        dz = dz * (w / len(feats))[:, None]
        return float((per * w).mean()), self.head.backward(params, dz)


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = b"MMFNDCKPT1\n"


@dataclass
class Checkpoint:
    config: FusionModelConfig
    params: nn.Params
    text_dim: int
    image_dim: int
    encoder_names: tuple[str, str] = ("", "")
    seed: int = 0
    epoch: int = 0
    val_loss: float = float("nan")

    def model(self) -> FusionModel:
        return FusionModel(self.config, self.text_dim, self.image_dim)

    def to_bytes(self) -> bytes:
        names = sorted(self.params)
        header = {
            "architecture": self.config.architecture.value,
            "config": self.config.to_dict(),
            "dims": [self.text_dim, self.image_dim],
            "encoder_names": list(self.encoder_names),
            "seed": self.seed,
            "epoch": self.epoch,
            "val_loss": self.val_loss,
            "tensors": [[n, list(self.params[n].shape)] for n in names],
            "dtype": "<f8",
        }
        h = json.dumps(header, sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(_CKPT_MAGIC)
        buf.write(struct.pack("<I", len(h)))
        buf.write(h)
        for n in names:
            buf.write(np.ascontiguousarray(self.params[n], dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if not data.startswith(_CKPT_MAGIC):
            raise MmfndError("not a checkpoint file")
        off = len(_CKPT_MAGIC)
        (hlen,) = struct.unpack_from("<I", data, off)
        off += 4
        header = json.loads(data[off : off + hlen])
        off += hlen
        params = {}
        for name, shape in header["tensors"]:
            n = int(np.prod(shape)) if shape else 1
            params[name] = np.frombuffer(data, "<f8", n, off).reshape(shape).copy()
            off += 8 * n
        return cls(
            config=FusionModelConfig.from_dict(header["config"]),
            params=params,
            text_dim=header["dims"][0],
            image_dim=header["dims"][1],
            encoder_names=tuple(header["encoder_names"]),
            seed=header["seed"],
            epoch=header["epoch"],
            val_loss=header["val_loss"],
        )

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# training


class Selection(str, enum.Enum):
    BEST_VAL_LOSS = "BEST_VAL_LOSS"


@dataclass
class TrainingConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    # bitransformer body only; None means ``learning_rate``
    transformer_learning_rate: Optional[float] = 2e-5
    seed: int = 0
    selection: Selection = Selection.BEST_VAL_LOSS
    class_weighted: bool = False


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    wall_time: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _class_weights(labels: np.ndarray) -> np.ndarray:
    counts = np.bincount(labels, minlength=2).astype(np.float64)
    counts[counts == 0] = 1.0
    return (len(labels) / (2.0 * counts))[labels]


def train(
    config: FusionModelConfig,
    train_feats: Features,
    val_feats: Features,
    tcfg: TrainingConfig | None = None,
    encoder_names: tuple[str, str] = ("", ""),
) -> tuple[Checkpoint, list[EpochLog]]:
    """Train for ``tcfg.epochs`` epochs and return the parameters of the epoch
    with the lowest validation loss (epoch 0 is the initialisation).

    Ties keep the earliest epoch. The whole run is a function of the seed.
    """
    tcfg = tcfg or TrainingConfig()
    if len(train_feats) == 0:
        raise EmptySplitError("training split is empty")
    if len(val_feats) == 0:
        raise EmptySplitError("validation split is empty; it is needed for model selection")
    overlap = set(train_feats.ids) & set(val_feats.ids)
    if overlap:
        raise MmfndError(f"train and validation share {len(overlap)} post ids, e.g. {sorted(overlap)[0]!r}")
    if len(np.unique(train_feats.labels)) < 2:
        warnings.warn("training split contains a single class", UserWarning, stacklevel=2)

    text_dim = train_feats.text.shape[1] if train_feats.text is not None else 0
    model = FusionModel(config, text_dim, train_feats.image.shape[1])
    params = model.init_params(tcfg.seed)
    lr = {k: tcfg.learning_rate for k in params}
    if config.architecture is Architecture.CLIP_MMBT and tcfg.transformer_learning_rate is not None:
        head = model.head.head_param_names(params)
        lr = {k: (tcfg.learning_rate if k in head else tcfg.transformer_learning_rate) for k in params}
    opt = nn.Adam(params, lr)
    train_w = _class_weights(train_feats.labels) if tcfg.class_weighted else None
    shuffle_rng = np.random.default_rng(derive_seed(tcfg.seed, "shuffle"))

    t0 = time.perf_counter()
    history = [EpochLog(0, model.loss(params, train_feats, train_w), model.loss(params, val_feats), 0.0)]
    best_params, best = copy.deepcopy(params), history[0]
    n = len(train_feats)
    for epoch in range(1, tcfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for lo in range(0, n, tcfg.batch_size):
            idx = order[lo : lo + tcfg.batch_size]
            w = None if train_w is None else train_w[idx]
            loss, grads = model.loss_and_grads(params, train_feats.subset(idx), w)
            if not np.isfinite(loss):
                norms = {k: float(np.linalg.norm(v)) for k, v in params.items()}
                worst = max(norms, key=norms.get)
                raise NonFiniteLoss(
                    f"epoch {epoch}, batch starting at {lo}: loss {loss}; largest parameter {worst} norm {norms[worst]:.3g}"
                )
            opt.step(params, grads)
            total += loss * len(idx)
        val_loss = model.loss(params, val_feats)
        entry = EpochLog(epoch, total / n, val_loss, time.perf_counter() - t0)
        history.append(entry)
        log.debug("epoch %d train %.4f val %.4f", epoch, entry.train_loss, val_loss)
        if val_loss < best.val_loss:
            best, best_params = entry, copy.deepcopy(params)
    ckpt = Checkpoint(
        config=config,
        params=best_params,
        text_dim=text_dim,
        image_dim=train_feats.image.shape[1],
        encoder_names=tuple(encoder_names),
        seed=tcfg.seed,
        epoch=best.epoch,
        val_loss=best.val_loss,
    )
    return ckpt, history


def write_training_log(history: Sequence[EpochLog], path: str | os.PathLike) -> None:
    Path(path).write_text("".join(e.to_json() + "\n" for e in history), encoding="utf-8")


def predict_split(checkpoint: Checkpoint, feats: Features, batch_size: int = 256) -> list[Prediction]:
    """One prediction per input, in order."""
    if len(feats) == 0:
        return []
    if feats.text is not None and checkpoint.config.architecture is not Architecture.CLIP_MMBT:
        if feats.text.shape[1] != checkpoint.text_dim:
            raise DimMismatch(f"checkpoint expects text dim {checkpoint.text_dim}, got {feats.text.shape[1]}")
    if feats.image.shape[1] != checkpoint.image_dim:
        raise DimMismatch(f"checkpoint expects image dim {checkpoint.image_dim}, got {feats.image.shape[1]}")
    model = checkpoint.model()
    scores = []
    for lo in range(0, len(feats), batch_size):
        scores.append(model.scores(checkpoint.params, feats.subset(np.arange(lo, min(lo + batch_size, len(feats))))))
    s = np.concatenate(scores)
    return [Prediction.from_score(pid, sc) for pid, sc in zip(feats.ids, s)]
