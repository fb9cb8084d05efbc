"""Attention correctness (precision / recall / F1) and retrieval Recall@K.

A region is *relevant* to a word when its box overlaps a ground-truth box
linked to the word's phrase with IoU above ``t_iou``; it is *attended* when
its attention weight is above ``t_att``. Word-level scores are maxed within
a phrase and phrase scores are averaged over the corpus.

Conventions for undefined cases:

* words with an empty relevant set are dropped from every aggregate;
* an empty attended set gives precision 0;
* 0/0 in the F1 combination gives 0.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np

F1Mode = Literal["paper", "standard"]


@dataclass(frozen=True)
class Phrase:
    span: tuple[int, int]  # word indices [start, end)
    regions: tuple[int, ...]


@dataclass
class AlignmentAnnotation:
    phrases: list[Phrase]

    def validate(self, num_words: int, num_regions: int) -> None:
        seen: set[int] = set()
        for p in self.phrases:
            start, end = p.span
            if not 0 <= start < end <= num_words:
                raise ValueError(f"phrase span {p.span} outside caption of length {num_words}")
            words = set(range(start, end))
            if words & seen:
                raise ValueError("a word belongs to more than one phrase")
            seen |= words
            if any(not 0 <= r < num_regions for r in p.regions):
                raise ValueError(f"phrase region index out of range in {p.regions}")

    def phrase_of(self, word: int) -> Phrase | None:
        for p in self.phrases:
            if p.span[0] <= word < p.span[1]:
                return p
        return None


@dataclass
class MetricThresholds:
    t_iou: float = 0.5
    t_att: float | str = "uniform"

    def __post_init__(self):
        if not 0 < self.t_iou <= 1:
            raise ValueError("t_iou must lie in (0, 1]")
        if isinstance(self.t_att, str):
            if self.t_att != "uniform":
                self.t_att = float(self.t_att)
        if not isinstance(self.t_att, str) and self.t_att < 0:
            raise ValueError("t_att must be nonnegative")

    def attention_threshold(self, num_keys: int) -> float:
        return 1.0 / num_keys if self.t_att == "uniform" else float(self.t_att)


@dataclass
class PhraseMetrics:
    phrase_id: str
    ap: float
    ar: float
    af_paper: float
    af_standard: float


@dataclass
class AttentionReport:
    precision: float
    recall: float
    f1_paper: float
    f1_standard: float
    phrases: list[PhraseMetrics] = field(default_factory=list)
    f1_mode: F1Mode = "paper"

    @property
    def f1(self) -> float:
        return self.f1_paper if self.f1_mode == "paper" else self.f1_standard


@dataclass
class RetrievalReport:
    """Recall@K in percent. ``sentence`` is image->text retrieval, ``image``
    is text->image retrieval."""

    sentence: dict[int, float]
    image: dict[int, float]

    @property
    def rsum(self) -> float:
        return rsum([*self.sentence.values(), *self.image.values()])


def iou(box_a: Sequence[float], box_b: Sequence[float]) -> float:
    """IoU of two ``(x, y, w, h)`` boxes."""
    ax, ay, aw, ah = map(float, box_a)
    bx, by, bw, bh = map(float, box_b)
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        raise ValueError("boxes must have positive area")
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    # Edge differences can round a full overlap slightly above the box area.
    inter = min(iw * ih, aw * ah, bw * bh)
    return inter / (aw * ah + bw * bh - inter)


def relevant_set(boxes: np.ndarray, annotation: AlignmentAnnotation, word_index: int, t_iou: float = 0.5) -> set[int]:
    phrase = annotation.phrase_of(word_index)
    if phrase is None or not phrase.regions:
        return set()
    gts = [boxes[r] for r in phrase.regions]
    return {i for i, box in enumerate(boxes) if max(iou(box, gt) for gt in gts) > t_iou}


def attended_set(weights: np.ndarray, word_index: int, t_att: float | str = "uniform") -> set[int]:
    row = np.asarray(getattr(weights, "data", weights))[word_index]
    thr = 1.0 / len(row) if t_att == "uniform" else float(t_att)
    return {i for i, v in enumerate(row) if v > thr}


def f1_combine(ap: float, ar: float, mode: F1Mode = "paper") -> float:
    if ap + ar == 0:
        return 0.0
    # "paper" is AP*AR/(AP+AR), half of the usual harmonic mean.
    scale = 1.0 if mode == "paper" else 2.0
    return scale * ap * ar / (ap + ar)


def word_metrics(attended: set[int], relevant: set[int], f1: F1Mode = "paper") -> tuple[float, float, float]:
    if not relevant:
        raise ValueError("word_metrics needs a non-empty relevant set")
    hit = len(attended & relevant)
    ap = hit / len(attended) if attended else 0.0
    ar = hit / len(relevant)
    return ap, ar, f1_combine(ap, ar, f1)


@dataclass
class AttentionInstance:
    """One image-caption pair ready for attention scoring."""

    pair_id: str
    weights: np.ndarray  # words x regions
    boxes: np.ndarray  # regions x 4
    annotation: AlignmentAnnotation


def phrase_metrics(inst: AttentionInstance, thresholds: MetricThresholds) -> list[PhraseMetrics]:
    t_att = thresholds.attention_threshold(inst.weights.shape[1])
    out = []
    for k, phrase in enumerate(inst.annotation.phrases):
        rows = []
        for j in range(*phrase.span):
            rel = relevant_set(inst.boxes, inst.annotation, j, thresholds.t_iou)
            if not rel:
                continue
            att = attended_set(inst.weights, j, t_att)
            ap, ar, _ = word_metrics(att, rel)
            rows.append((ap, ar, f1_combine(ap, ar, "paper"), f1_combine(ap, ar, "standard")))
        if rows:
            best = np.max(np.asarray(rows), axis=0)
            out.append(PhraseMetrics(f"{inst.pair_id}:{k}", *map(float, best)))
    return out


def corpus_attention_report(
    instances: Iterable[AttentionInstance], thresholds: MetricThresholds | None = None, f1: F1Mode = "paper"
) -> AttentionReport:
    thresholds = thresholds or MetricThresholds()
    phrases = [p for inst in instances for p in phrase_metrics(inst, thresholds)]
    if not phrases:
        raise ValueError("no annotated phrase with a relevant region to score")
    cols = np.array([[p.ap, p.ar, p.af_paper, p.af_standard] for p in phrases])
    # fsum keeps the mean independent of phrase order.
    means = [math.fsum(cols[:, c]) / len(phrases) for c in range(4)]
    return AttentionReport(*means, phrases=phrases, f1_mode=f1)


def _recall(scores: np.ndarray, truth: Sequence[set[int]], ks: Sequence[int]) -> dict[int, float]:
    order = np.argsort(-scores, axis=1, kind="stable")
    first_hit = np.empty(len(scores), dtype=int)
    for q, row in enumerate(order):
        if not truth[q]:
            raise ValueError(f"query {q} has no ground-truth match")
        first_hit[q] = min(int(np.flatnonzero(row == t)[0]) for t in truth[q])
    return {k: 100.0 * int(np.count_nonzero(first_hit < k)) / len(scores) for k in ks}


def recall_at_k(
    scores: np.ndarray, ground_truth: Sequence[Iterable[int]] | None = None, ks: Sequence[int] = (1, 5, 10)
) -> RetrievalReport:
    """Recall@K in both directions for an images x texts score matrix.

    ``ground_truth[a]`` lists the texts matching image ``a``; by default text
    ``a`` matches image ``a``. Ties keep the lower index first.
    """
    scores = np.asarray(getattr(scores, "data", scores), dtype=np.float64)
    n_img, n_txt = scores.shape
    if ground_truth is None:
        if n_img != n_txt:
            raise ValueError("default ground truth needs a square score matrix")
        ground_truth = [{a} for a in range(n_img)]
    img_truth = [set(int(t) for t in g) for g in ground_truth]
    txt_truth: list[set[int]] = [set() for _ in range(n_txt)]
    for a, texts in enumerate(img_truth):
        for t in texts:
            txt_truth[t].add(a)
    return RetrievalReport(sentence=_recall(scores, img_truth, ks), image=_recall(scores.T, txt_truth, ks))


def rsum(values: Iterable[float]) -> float:
    """Sum of Recall@K values; exactly rounded so printed tables add up."""
    return math.fsum(values)


def write_phrase_csv(report: AttentionReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["phrase_id", "ap", "ar", "af"])
        for p in report.phrases:
            af = p.af_paper if report.f1_mode == "paper" else p.af_standard
            writer.writerow([p.phrase_id, repr(p.ap), repr(p.ar), repr(af)])


def summary_dict(attention: AttentionReport | None = None, retrieval: RetrievalReport | None = None) -> dict:
    out: dict = {}
    if attention is not None:
        out.update(
            precision=attention.precision,
            recall=attention.recall,
            f1_paper=attention.f1_paper,
            f1_standard=attention.f1_standard,
        )
    if retrieval is not None:
        out["recall_at"] = {
            **{f"sentence_r{k}": v for k, v in retrieval.sentence.items()},
            **{f"image_r{k}": v for k, v in retrieval.image.items()},
        }
        out["rsum"] = retrieval.rsum
    return out


def write_summary_json(path: str | Path, attention: AttentionReport | None = None, retrieval: RetrievalReport | None = None) -> None:
    Path(path).write_text(json.dumps(summary_dict(attention, retrieval), indent=2, sort_keys=True) + "\n")
