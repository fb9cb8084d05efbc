"""Cross-modal fragment attention and image-sentence similarity.

Relevance between a query fragment and a key fragment is their cosine,
turned into weights by a softmax with inverse temperature. The attended
vector of a query fragment is the weighted sum of key features, and the
pair similarity aggregates the cosine between each query fragment and its
attended vector.

Two routes exist: per-pair functions over :class:`FragmentSet` (``attend``,
``pair_similarity``) and a padded batch route (``batch_attention``,
``batch_scores``) that computes every image/caption combination at once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from . import numkit as nk
from .numkit import Tensor

Agg = Literal["mean", "logsumexp"]
Direction = Literal["t2i", "i2t", "both"]

TEXT_TO_IMAGE = "t2i"
IMAGE_TO_TEXT = "i2t"


@dataclass
class FragmentSet:
    """Encoded fragments of one image or one caption.

    ``features`` holds one row per fragment. ``boxes`` are ``(x, y, w, h)``
    pixel boxes for image fragments; ``tokens`` are vocabulary ids for text.
    """

    features: Tensor
    kind: Literal["image", "text"]
    boxes: np.ndarray | None = None
    tokens: list[int] | None = None

    def __post_init__(self):
        if not isinstance(self.features, Tensor):
            self.features = nk.tensor(self.features)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"FragmentSet needs a non-empty n x d feature matrix, got {self.features.shape}")
        if self.kind not in ("image", "text"):
            raise ValueError(f"unknown fragment kind {self.kind!r}")
        if self.boxes is not None:
            self.boxes = np.asarray(self.boxes, dtype=np.float64)
            if self.boxes.shape != (len(self), 4):
                raise ValueError("boxes must be an n x 4 array")
            if np.any(self.boxes[:, 2:] <= 0):
                raise ValueError("boxes need positive width and height")
        if self.tokens is not None and len(self.tokens) != len(self):
            raise ValueError("one token per text fragment expected")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class AttentionMap:
    weights: Tensor  # |Q| x |K|
    scores: Tensor  # |Q| x |K|, relevance before softmax
    direction: str = TEXT_TO_IMAGE


@dataclass
class AttendedInfo:
    vectors: Tensor  # |Q| x d


@dataclass
class AttentionConfig:
    temperature_inv: float = 9.0
    agg: Agg = "mean"
    lse_temperature: float = 6.0
    direction: Direction = TEXT_TO_IMAGE
    clip_negative: bool = False

    def __post_init__(self):
        if self.agg not in ("mean", "logsumexp"):
            raise ValueError(f"unknown aggregation {self.agg!r}")
        if self.direction not in ("t2i", "i2t", "both"):
            raise ValueError(f"unknown attention direction {self.direction!r}")


def relevance(query: Tensor, key: Tensor, clip_negative: bool = False) -> Tensor:
    """Pairwise cosine between rows of ``query`` (|Q| x d) and ``key`` (|K| x d)."""
    e = nk.einsum("qd,kd->qk", nk.normalize(query), nk.normalize(key))
    return nk.hinge(e) if clip_negative else e


def attend(
    query: FragmentSet, key: FragmentSet, temperature_inv: float = 9.0, clip_negative: bool = False
) -> tuple[AttentionMap, AttendedInfo]:
    if query.dim != key.dim:
        raise ValueError(f"embedding dims differ: query {query.dim}, key {key.dim}")
    e = relevance(query.features, key.features, clip_negative)
    w = nk.softmax(e, axis=-1, temperature_inv=temperature_inv)
    a = nk.matmul(w, key.features)
    direction = TEXT_TO_IMAGE if query.kind == "text" else IMAGE_TO_TEXT
    return AttentionMap(weights=w, scores=e, direction=direction), AttendedInfo(vectors=a)


def aggregate(sims: Tensor, agg: Agg = "mean", mask: np.ndarray | None = None, lse_temperature: float = 6.0) -> Tensor:
    """Aggregate per-fragment similarities along the last axis."""
    if mask is None:
        mask = np.ones(sims.shape, dtype=bool)
    if agg == "mean":
        return nk.masked_mean(sims, mask, axis=-1)
    if agg == "logsumexp":
        return nk.logsumexp(sims, axis=-1, mask=mask, temperature=lse_temperature)
    raise ValueError(f"unknown aggregation {agg!r}")


def pair_similarity(query: FragmentSet, attended: AttendedInfo, agg: Agg = "mean", lse_temperature: float = 6.0) -> Tensor:
    if attended.vectors.shape[0] != len(query):
        raise ValueError("attended info must have one row per query fragment")
    sims = nk.cosine(query.features, attended.vectors, axis=-1)
    return aggregate(sims, agg, lse_temperature=lse_temperature)


def directed_similarity(query: FragmentSet, key: FragmentSet, config: AttentionConfig) -> Tensor:
    _, info = attend(query, key, config.temperature_inv, config.clip_negative)
    return pair_similarity(query, info, config.agg, config.lse_temperature)


def similarity(image: FragmentSet, text: FragmentSet, config: AttentionConfig) -> Tensor:
    """S(I, T) for one pair under the configured direction(s)."""
    if config.direction == "t2i":
        return directed_similarity(text, image, config)
    if config.direction == "i2t":
        return directed_similarity(image, text, config)
    return 0.5 * (directed_similarity(text, image, config) + directed_similarity(image, text, config))


# -- padded batch route --------------------------------------------------


@dataclass
class Padded:
    """A batch of fragment sets padded to a common length."""

    features: Tensor  # B x L x d
    mask: np.ndarray  # B x L, True for real fragments

    @property
    def size(self) -> int:
        return self.features.shape[0]


def pad(sets: Sequence[FragmentSet]) -> Padded:
    if not sets:
        raise ValueError("cannot pad an empty batch")
    longest = max(len(s) for s in sets)
    dim = sets[0].dim
    rows = []
    mask = np.zeros((len(sets), longest), dtype=bool)
    for b, s in enumerate(sets):
        if s.dim != dim:
            raise ValueError("all fragment sets in a batch must share an embedding dim")
        mask[b, : len(s)] = True
        rows.append(_pad_rows(s.features, longest))
    return Padded(nk.stack(rows, axis=0), mask)


def _pad_rows(x: Tensor, n: int) -> Tensor:
    if x.shape[0] == n:
        return x
    # Selection matrix keeps the graph intact for padded rows.
    sel = np.zeros((n, x.shape[0]))
    sel[np.arange(x.shape[0]), np.arange(x.shape[0])] = 1.0
    return nk.matmul(nk.tensor(sel), x)


@dataclass
class BatchAttention:
    """Attention of every query set over every key set.

    Leading axes are (key set, query set), so for text queries over images
    ``weights[a, b]`` is caption ``b`` attending over image ``a``.
    """

    scores: Tensor  # Bk x Bq x L x R
    weights: Tensor  # Bk x Bq x L x R
    attended: Tensor  # Bk x Bq x L x d
    query_mask: np.ndarray  # Bq x L
    key_mask: np.ndarray  # Bk x R


def batch_attention(
    query: Padded, key: Padded, temperature_inv: float = 9.0, clip_negative: bool = False, pairs: str = "all"
) -> BatchAttention:
    """Attention for all (key set, query set) combinations, or for matched
    pairs only when ``pairs="diagonal"`` (then the leading axis is the pair)."""
    qn = nk.normalize(query.features, count=False)
    kn = nk.normalize(key.features, count=False)
    if pairs == "all":
        e = nk.einsum("bld,ard->ablr", qn, kn)
        kmask = np.broadcast_to(key.mask[:, None, None, :], e.shape)
        if clip_negative:
            e = nk.hinge(e)
        w = nk.softmax(e, axis=-1, temperature_inv=temperature_inv, mask=kmask)
        a = nk.einsum("ablr,ard->abld", w, key.features)
    elif pairs == "diagonal":
        if query.size != key.size:
            raise ValueError("diagonal attention needs equal batch sizes")
        e = nk.einsum("bld,brd->blr", qn, kn)
        kmask = np.broadcast_to(key.mask[:, None, :], e.shape)
        if clip_negative:
            e = nk.hinge(e)
        w = nk.softmax(e, axis=-1, temperature_inv=temperature_inv, mask=kmask)
        a = nk.einsum("blr,brd->bld", w, key.features)
    else:
        raise ValueError(f"unknown pairs mode {pairs!r}")
    return BatchAttention(e, w, a, query.mask, key.mask)


def _directed_batch_scores(query: Padded, key: Padded, config: AttentionConfig) -> Tensor:
    att = batch_attention(query, key, config.temperature_inv, config.clip_negative)
    q = query.features  # Bq x L x d
    # Padding rows are zero vectors; they are masked below, so not counted.
    sims = nk.cosine(nk.reshape(q, (1, *q.shape)), att.attended, axis=-1, count=False)  # Bk x Bq x L
    qmask = np.broadcast_to(query.mask[None, :, :], sims.shape)
    return aggregate(sims, config.agg, qmask, config.lse_temperature)  # Bk x Bq


def batch_scores(images: Padded, texts: Padded, config: AttentionConfig) -> Tensor:
    """Image x text similarity matrix; entry (a, b) is S(image a, text b)."""
    if config.direction == "t2i":
        return _directed_batch_scores(texts, images, config)
    if config.direction == "i2t":
        return nk.transpose(_directed_batch_scores(images, texts, config))
    t2i = _directed_batch_scores(texts, images, config)
    i2t = nk.transpose(_directed_batch_scores(images, texts, config))
    return 0.5 * (t2i + i2t)


def score_matrix(
    images: Sequence[FragmentSet], texts: Sequence[FragmentSet], config: AttentionConfig | None = None, training: bool = False
) -> Tensor:
    config = config or AttentionConfig()
    if training and (len(images) < 2 or len(images) != len(texts)):
        raise ValueError("training needs equal image/text batch sizes of at least 2")
    return batch_scores(pad(images), pad(texts), config)
