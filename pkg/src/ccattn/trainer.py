"""Model parameters, training loop, evaluation and checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numkit as nk
from .attention import AttentionConfig, FragmentSet, Padded, attend, batch_attention, batch_scores
from .losses import LossBundle, LossConfig, ccr_loss_batch, ccs_loss_batch, combined_loss, ranking_loss
from .metrics import AttentionInstance, AttentionReport, MetricThresholds, RetrievalReport, corpus_attention_report, recall_at_k
from .numkit import Tensor
from .synthworld import Dataset, PairSample

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    batch_size: int = 16
    epochs: int = 10
    lr: float = 0.01
    seed: int = 0
    eval_every: int = 1
    direction: str = "t2i"
    temperature_inv: float = 9.0
    clip_negative: bool = False
    embed_dim: int | None = None  # None: same as region feature dim
    train_projection: bool = True
    checkpoint: str | None = None

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 so every anchor has negatives")
        if self.epochs < 0 or self.lr <= 0 or self.eval_every < 1:
            raise ValueError("epochs must be >= 0, lr > 0 and eval_every >= 1")
        self.attention  # validates direction

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(
            temperature_inv=self.temperature_inv,
            agg=self.loss.agg,
            direction=self.direction,
            clip_negative=self.clip_negative,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        if "loss" in d:
            d["loss"] = LossConfig(**d["loss"])
        return cls(**d)


class Model:
    """Token embedding table plus a linear map on region features.

    Both modalities are L2-normalized after encoding.
    """

    def __init__(self, token_embeddings: np.ndarray, region_projection: np.ndarray):
        self.token_embeddings = nk.tensor(token_embeddings, requires_grad=True)
        self.region_projection = nk.tensor(region_projection, requires_grad=True)
        if self.token_embeddings.shape[1] != self.region_projection.shape[1]:
            raise ValueError("token and region embedding sizes differ")

    @classmethod
    def init(cls, vocab_size: int, feat_dim: int, embed_dim: int | None = None, rng: np.random.Generator | None = None) -> Model:
        rng = rng or np.random.default_rng(0)
        d = embed_dim or feat_dim
        emb = rng.standard_normal((vocab_size, d)) / np.sqrt(d)
        if d == feat_dim:
            proj = np.eye(d)
        else:
            proj = rng.standard_normal((feat_dim, d)) / np.sqrt(feat_dim)
        return cls(emb, proj)

    @property
    def params(self) -> list[Tensor]:
        return [self.token_embeddings, self.region_projection]

    @property
    def embed_dim(self) -> int:
        return self.token_embeddings.shape[1]

    def copy(self) -> Model:
        return Model(self.token_embeddings.data.copy(), self.region_projection.data.copy())

    def _weights(self, grad: bool) -> tuple[Tensor, Tensor]:
        if grad:
            return self.token_embeddings, self.region_projection
        return self.token_embeddings.detach(), self.region_projection.detach()

    def encode_texts(self, token_lists: Sequence[Sequence[int]], grad: bool = False) -> Padded:
        emb, _ = self._weights(grad)
        longest = max(len(t) for t in token_lists)
        idx = np.zeros((len(token_lists), longest), dtype=int)
        mask = np.zeros(idx.shape, dtype=bool)
        for b, toks in enumerate(token_lists):
            idx[b, : len(toks)] = toks
            mask[b, : len(toks)] = True
        return Padded(nk.normalize(nk.take(emb, idx), count=False), mask)

    def encode_images(self, feat_list: Sequence[np.ndarray], grad: bool = False) -> Padded:
        _, proj = self._weights(grad)
        longest = max(len(f) for f in feat_list)
        x = np.zeros((len(feat_list), longest, feat_list[0].shape[1]))
        mask = np.zeros((len(feat_list), longest), dtype=bool)
        for b, f in enumerate(feat_list):
            x[b, : len(f)] = f
            mask[b, : len(f)] = True
        return Padded(nk.normalize(nk.einsum("brf,fd->brd", x, proj), count=False), mask)

    def embed_tokens(self, tokens: Sequence[int] | np.ndarray, grad: bool = False) -> Tensor:
        emb, _ = self._weights(grad)
        return nk.normalize(nk.take(emb, np.asarray(tokens, dtype=int)))

    def text_fragments(self, pair: PairSample, grad: bool = False) -> FragmentSet:
        return FragmentSet(self.embed_tokens(pair.tokens, grad), "text", tokens=list(pair.tokens))

    def image_fragments(self, pair: PairSample, grad: bool = False) -> FragmentSet:
        _, proj = self._weights(grad)
        feats = nk.normalize(nk.matmul(nk.tensor(pair.feats), proj))
        return FragmentSet(feats, "image", boxes=pair.boxes)


@dataclass
class StepResult:
    bundle: LossBundle
    grads: list[np.ndarray]


def compute_losses(
    model: Model,
    batch: Sequence[PairSample],
    config: TrainConfig,
    swap_rng: np.random.Generator,
    include_constraints: bool = True,
) -> LossBundle:
    """Loss bundle of one batch on a fresh graph.

    The constraint terms are computed on matched pairs only, using caption
    words attending over their own image. With ``include_constraints=False``
    they are not built at all (the plain ranking baseline).
    """
    texts = model.encode_texts([p.tokens for p in batch], grad=True)
    images = model.encode_images([p.feats for p in batch], grad=True)
    scores = batch_scores(images, texts, config.attention)
    ids = np.array([p.id for p in batch])
    rank = ranking_loss(scores, config.loss.gamma1, negative_mask=ids[:, None] != ids[None, :])
    zero = nk.tensor(0.0)
    if not include_constraints:
        return combined_loss(rank, zero, zero, dataclasses.replace(config.loss, lambda_ccr=0.0, lambda_ccs=0.0))
    att = batch_attention(texts, images, config.temperature_inv, config.clip_negative, pairs="diagonal")
    ccr = ccr_loss_batch(att, texts, images, config.loss, config.temperature_inv)
    index, swapped, valid = _draw_swaps(batch, model.token_embeddings.shape[0], swap_rng)
    qbar = model.embed_tokens(swapped, grad=True)
    ccs = ccs_loss_batch(texts, att.attended, index, qbar, valid, config.loss.gamma3)
    return combined_loss(rank, ccr, ccs, config.loss)


def _draw_swaps(batch: Sequence[PairSample], vocab_size: int, rng: np.random.Generator):
    # Same draw rule as losses.sample_swap, vectorized over the batch.
    index = np.zeros(len(batch), dtype=int)
    token = np.zeros(len(batch), dtype=int)
    valid = np.zeros(len(batch), dtype=bool)
    for b, pair in enumerate(batch):
        index[b] = rng.integers(len(pair.tokens))
        candidates = sorted(set(range(vocab_size)) - set(pair.tokens))
        if candidates:
            token[b] = candidates[int(rng.integers(len(candidates)))]
            valid[b] = True
    return index, token, valid


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    out = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    # A 1-pair tail has no negatives; fold it into the previous batch.
    if len(out) > 1 and len(out[-1]) < 2:
        tail = out.pop()
        out[-1] = np.concatenate([out[-1], tail])
    return out


@dataclass
class TrainResult:
    model: Model  # best by validation rsum (final model when there is no val split)
    final_model: Model
    history: list[dict]
    best_epoch: int


def train(
    dataset: Dataset,
    config: TrainConfig,
    include_constraints: bool = True,
    thresholds: MetricThresholds | None = None,
    split: str = "train",
) -> TrainResult:
    pairs = dataset[split]
    if len(pairs) < 2:
        raise ValueError("training needs at least two pairs")
    init_seq, shuffle_seq, swap_seq = np.random.SeedSequence(config.seed).spawn(3)
    model = Model.init(dataset.vocab_size, dataset.feat_dim, config.embed_dim, np.random.default_rng(init_seq))
    shuffle_rng = np.random.default_rng(shuffle_seq)
    swap_rng = np.random.default_rng(swap_seq)
    params = model.params if config.train_projection else [model.token_embeddings]
    opt = nk.Adam(params, lr=config.lr)
    val = dataset.splits.get("val") or []
    history: list[dict] = []
    best = (-np.inf, model.copy(), 0)
    step = 0
    for epoch in range(1, config.epochs + 1):
        for idx in batches(len(pairs), config.batch_size, shuffle_rng):
            batch = [pairs[i] for i in idx]
            opt.zero_grad()
            model.region_projection.grad = None
            try:
                bundle = compute_losses(model, batch, config, swap_rng, include_constraints)
            except nk.NonFiniteError as exc:
                dump = {"epoch": epoch, "step": step, "pair_ids": [p.id for p in batch], "error": str(exc)}
                _write_dump(config, dump)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}", dump) from exc
            nk.backward(bundle.total)
            opt.step()
            step += 1
            history.append({"kind": "step", "epoch": epoch, "step": step, **bundle.values()})
        if val and (epoch % config.eval_every == 0 or epoch == config.epochs):
            retrieval, attention = evaluate(model, val, thresholds, config)
            history.append(
                {
                    "kind": "eval",
                    "epoch": epoch,
                    "rsum": retrieval.rsum,
                    "precision": attention.precision,
                    "recall": attention.recall,
                    "f1_standard": attention.f1_standard,
                }
            )
            if retrieval.rsum > best[0]:
                best = (retrieval.rsum, model.copy(), epoch)
    if not val:
        best = (np.nan, model.copy(), config.epochs)
    if config.checkpoint:
        save_checkpoint(best[1], config.checkpoint, config)
    return TrainResult(model=best[1], final_model=model, history=history, best_epoch=best[2])


def _write_dump(config: TrainConfig, dump: dict) -> None:
    log.error("training diverged: %s", dump)
    if config.checkpoint:
        Path(str(config.checkpoint) + ".diverged.json").write_text(json.dumps(dump, indent=2))


# -- evaluation ----------------------------------------------------------


def score_pairs(model: Model, pairs: Sequence[PairSample], config: TrainConfig | None = None, chunk: int = 64) -> np.ndarray:
    """Images x texts similarity matrix, computed in image chunks."""
    attn = (config or TrainConfig()).attention
    texts = model.encode_texts([p.tokens for p in pairs])
    out = np.empty((len(pairs), len(pairs)))
    for start in range(0, len(pairs), chunk):
        images = model.encode_images([p.feats for p in pairs[start : start + chunk]])
        out[start : start + chunk] = batch_scores(images, texts, attn).data
    return out


def attention_instances(model: Model, pairs: Sequence[PairSample], config: TrainConfig | None = None) -> list[AttentionInstance]:
    config = config or TrainConfig()
    texts = model.encode_texts([p.tokens for p in pairs])
    images = model.encode_images([p.feats for p in pairs])
    att = batch_attention(texts, images, config.temperature_inv, config.clip_negative, pairs="diagonal")
    return [
        AttentionInstance(p.id, att.weights.data[b, : len(p.tokens), : len(p.feats)], p.boxes, p.annotation)
        for b, p in enumerate(pairs)
    ]


def evaluate(
    model: Model,
    pairs: Sequence[PairSample] | Dataset,
    thresholds: MetricThresholds | None = None,
    config: TrainConfig | None = None,
    f1: str = "paper",
) -> tuple[RetrievalReport, AttentionReport]:
    if isinstance(pairs, Dataset):
        pairs = pairs["test"]
    retrieval = recall_at_k(score_pairs(model, pairs, config))
    attention = corpus_attention_report(attention_instances(model, pairs, config), thresholds or MetricThresholds(), f1)
    return retrieval, attention


def dump_attention(model: Model, pairs: Sequence[PairSample], outdir: str | Path, config: TrainConfig | None = None) -> list[Path]:
    """One CSV per pair: a row per caption word, a column per region.

    Region column headers carry the box as ``r<j>[x y w h]``.
    """
    config = config or TrainConfig()
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for pair in pairs:
        amap, _ = attend(model.text_fragments(pair), model.image_fragments(pair), config.temperature_inv, config.clip_negative)
        path = out / f"{pair.id}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            boxes = [f"r{j}[{' '.join(repr(float(v)) for v in box)}]" for j, box in enumerate(pair.boxes)]
            writer.writerow(["word", "token", *boxes])
            for i, row in enumerate(amap.weights.data):
                writer.writerow([i, pair.tokens[i], *(repr(float(v)) for v in row)])
        written.append(path)
    return written


# -- checkpoints ---------------------------------------------------------


def save_checkpoint(model: Model, path: str | Path, config: TrainConfig | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(
            fh,
            token_embeddings=model.token_embeddings.data,
            region_projection=model.region_projection.data,
            config=np.array(json.dumps(config.to_dict() if config else {})),
        )


def load_checkpoint(path: str | Path) -> tuple[Model, TrainConfig | None]:
    with np.load(path) as z:
        model = Model(z["token_embeddings"].copy(), z["region_projection"].copy())
        cfg = json.loads(str(z["config"]))
    return model, (TrainConfig.from_dict(cfg) if cfg else None)
