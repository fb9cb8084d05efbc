"""Training objectives: hardest-negative triplet ranking plus the two
attention constraints.

Content re-sourcing (CCR) splits each query fragment's keys into an attended
and an ignored group by attention weight, re-softmaxes the relevance scores
inside each group, and asks the attended group's feature to be more similar
to the query than the ignored group's feature by a margin.

Content swapping (CCS) replaces one caption word by a word absent from the
caption and asks the original word's attended vector to prefer the original
word over the replacement by a margin.

Per-pair functions mirror the definitions one fragment at a time; the
``*_batch`` variants are the vectorized forms the trainer uses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Literal, Sequence

import numpy as np

from . import numkit as nk
from .attention import AttendedInfo, AttentionMap, BatchAttention, FragmentSet, Padded, aggregate
from .numkit import Tensor


@dataclass
class LossConfig:
    gamma1: float = 0.2
    gamma2: float = 0.2
    gamma3: float = 0.2
    lambda_ccr: float = 1.0
    lambda_ccs: float = 1.0
    # "uniform" means 1/|K|; a float is used as a fixed threshold.
    h_threshold: str | float = "uniform"
    agg: Literal["mean", "logsumexp"] = "mean"

    def __post_init__(self):
        for name in ("gamma1", "gamma2", "gamma3", "lambda_ccr", "lambda_ccs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if isinstance(self.h_threshold, str) and self.h_threshold != "uniform":
            self.h_threshold = float(self.h_threshold)

    def threshold(self, num_keys: int) -> float:
        return 1.0 / num_keys if self.h_threshold == "uniform" else float(self.h_threshold)


@dataclass
class Partition:
    attended: list[int]
    ignored: list[int]


@dataclass
class SwapSample:
    index: int  # query fragment that is swapped
    token: int  # replacement token
    embedding: Tensor | None = None


@dataclass
class LossBundle:
    rank: Tensor
    ccr: Tensor
    ccs: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("rank", "ccr", "ccs", "total")}


def ranking_loss(scores: Tensor, gamma1: float, negative_mask: np.ndarray | None = None) -> Tensor:
    """Mean over anchors of the two hardest-negative hinges.

    ``scores[a, b]`` is S(image a, text b); the diagonal holds positives.
    ``negative_mask`` (B x B, True = usable negative) lets duplicates of the
    anchor be excluded; an anchor with no usable negative contributes 0.
    """
    n = scores.shape[0]
    if scores.ndim != 2 or scores.shape[1] != n:
        raise ValueError(f"ranking loss needs a square score matrix, got {scores.shape}")
    if n < 2:
        raise ValueError("ranking loss needs a batch of at least 2 pairs")
    off = ~np.eye(n, dtype=bool)
    if negative_mask is not None:
        off &= np.asarray(negative_mask, dtype=bool)
    pos = nk.take(scores, (np.arange(n), np.arange(n)))
    hard_text, has_text = nk.masked_max(scores, off, axis=1)  # per image, hardest caption
    hard_image, has_image = nk.masked_max(scores, off, axis=0)  # per caption, hardest image
    cost_text = nk.hinge(hard_text - pos + gamma1) * has_text
    cost_image = nk.hinge(hard_image - pos + gamma1) * has_image
    return nk.mean(cost_text + cost_image)


def partition_keys(amap: AttentionMap, config: LossConfig | None = None) -> list[Partition]:
    """Split keys per query fragment into weight > threshold and the rest."""
    config = config or LossConfig()
    w = amap.weights.data
    thr = config.threshold(w.shape[1])
    parts = []
    for row in w:
        att = [j for j, v in enumerate(row) if v > thr]
        ign = [j for j, v in enumerate(row) if not v > thr]
        parts.append(Partition(att, ign))
    return parts


def group_feature(scores: Tensor, keys: FragmentSet, group: Sequence[int], temperature_inv: float = 9.0) -> Tensor:
    """Feature of a key group: relevance re-softmaxed over the group only,
    then the weighted sum of the group's key rows."""
    if len(group) == 0:
        raise ValueError("group_feature called with an empty group")
    idx = np.asarray(group, dtype=int)
    w_hat = nk.softmax(nk.take(scores, idx), axis=-1, temperature_inv=temperature_inv)
    return nk.einsum("g,gd->d", w_hat, nk.take(keys.features, idx))


def ccr_loss(
    query: FragmentSet,
    amap: AttentionMap,
    keys: FragmentSet,
    gamma2: float = 0.2,
    agg: str = "mean",
    config: LossConfig | None = None,
    temperature_inv: float = 9.0,
    lse_temperature: float = 6.0,
) -> Tensor:
    """Content re-sourcing hinge for one pair.

    Query fragments whose attended or ignored group is empty are left out of
    both aggregates; with none left the loss is 0.
    """
    parts = partition_keys(amap, config)
    sim_att, sim_ign = [], []
    for i, part in enumerate(parts):
        if not part.attended or not part.ignored:
            continue
        q = nk.take(query.features, i)
        row = nk.take(amap.scores, i)
        l_i = group_feature(row, keys, part.attended, temperature_inv)
        s_i = group_feature(row, keys, part.ignored, temperature_inv)
        sim_att.append(nk.cosine(q, l_i))
        sim_ign.append(nk.cosine(q, s_i))
    if not sim_att:
        return nk.tensor(0.0)
    agg_att = aggregate(nk.stack(sim_att), agg, lse_temperature=lse_temperature)
    agg_ign = aggregate(nk.stack(sim_ign), agg, lse_temperature=lse_temperature)
    return nk.hinge(agg_ign - agg_att + gamma2)


def ccs_loss(query: FragmentSet, attended: AttendedInfo, swap: SwapSample | None, gamma3: float = 0.2) -> Tensor:
    """Sampled content swapping hinge; a skipped swap (``None``) costs 0."""
    if swap is None:
        return nk.tensor(0.0)
    if swap.embedding is None:
        raise ValueError("swap sample carries no embedding")
    q = nk.take(query.features, swap.index)
    a = nk.take(attended.vectors, swap.index)
    return nk.hinge(nk.cosine(swap.embedding, a) - nk.cosine(q, a) + gamma3)


def ccs_loss_full(query: FragmentSet, attended: AttendedInfo, swaps: Sequence[Sequence[Tensor]], gamma3: float = 0.2) -> Tensor:
    """Unsampled form: sum over every query fragment and each of its swapped
    embeddings ``swaps[i]``. Used as a reference in tests."""
    terms = []
    for i, candidates in enumerate(swaps):
        q = nk.take(query.features, i)
        a = nk.take(attended.vectors, i)
        pos = nk.cosine(q, a)
        for qbar in candidates:
            terms.append(nk.hinge(nk.cosine(qbar, a) - pos + gamma3))
    return nk.tsum(nk.stack(terms)) if terms else nk.tensor(0.0)


def combined_loss(rank: Tensor, ccr: Tensor, ccs: Tensor, config: LossConfig) -> LossBundle:
    total = rank + config.lambda_ccr * ccr + config.lambda_ccs * ccs
    return LossBundle(rank=rank, ccr=ccr, ccs=ccs, total=total)


def sample_swap(
    query: FragmentSet,
    vocab: Iterable[int],
    rng: np.random.Generator,
    embed: Callable[[int], Tensor] | None = None,
    exclude: Iterable[int] = (),
) -> SwapSample | None:
    """Pick one caption word uniformly and a replacement token uniformly from
    the vocabulary minus the caption's tokens (and ``exclude``).

    Returns ``None`` when no replacement token exists.
    """
    if query.kind != "text" or query.tokens is None:
        raise ValueError("swapping needs a text fragment set with tokens")
    index = int(rng.integers(len(query.tokens)))
    banned = set(query.tokens) | set(exclude)
    candidates = sorted(set(int(t) for t in vocab) - banned)
    if not candidates:
        return None
    token = candidates[int(rng.integers(len(candidates)))]
    return SwapSample(index=index, token=token, embedding=embed(token) if embed is not None else None)


# -- batched forms -------------------------------------------------------


def ccr_loss_batch(att: BatchAttention, query: Padded, key: Padded, config: LossConfig, temperature_inv: float = 9.0, lse_temperature: float = 6.0) -> Tensor:
    """Mean CCR hinge over matched pairs; ``att`` must be diagonal attention
    (B x L x R) of ``query`` over ``key``."""
    w = att.weights.data
    kmask = key.mask[:, None, :]
    if config.h_threshold == "uniform":
        thr = (1.0 / key.mask.sum(axis=1))[:, None, None]
    else:
        thr = float(config.h_threshold)
    in_att = (w > thr) & kmask
    in_ign = ~(w > thr) & kmask
    valid = query.mask & in_att.any(axis=-1) & in_ign.any(axis=-1)  # B x L
    pair_valid = valid.any(axis=-1).astype(np.float64)

    l_feat = _group_features(att.scores, key.features, in_att, temperature_inv)
    s_feat = _group_features(att.scores, key.features, in_ign, temperature_inv)
    sim_att = nk.cosine(query.features, l_feat, axis=-1, count=False)
    sim_ign = nk.cosine(query.features, s_feat, axis=-1, count=False)
    agg_att = aggregate(sim_att, config.agg, valid, lse_temperature)
    agg_ign = aggregate(sim_ign, config.agg, valid, lse_temperature)
    per_pair = nk.hinge(agg_ign - agg_att + config.gamma2) * pair_valid
    return nk.mean(per_pair)


def _group_features(scores: Tensor, keys: Tensor, group: np.ndarray, temperature_inv: float) -> Tensor:
    w_hat = nk.softmax(scores, axis=-1, temperature_inv=temperature_inv, mask=group)
    return nk.einsum("blr,brd->bld", w_hat, keys)


def ccs_loss_batch(
    query: Padded, attended: Tensor, index: np.ndarray, swapped: Tensor, valid: np.ndarray, gamma3: float
) -> Tensor:
    """Mean sampled CCS hinge over matched pairs.

    ``attended`` is B x L x d, ``index[b]`` the swapped word of pair ``b``,
    ``swapped`` (B x d) the replacement embeddings, ``valid[b]`` False for
    skipped swaps.
    """
    b = np.arange(query.size)
    q = nk.take(query.features, (b, index))
    a = nk.take(attended, (b, index))
    cost = nk.hinge(nk.cosine(swapped, a, axis=-1) - nk.cosine(q, a, axis=-1) + gamma3)
    return nk.mean(cost * np.asarray(valid, dtype=np.float64))
