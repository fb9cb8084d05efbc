"""Synthetic image-caption world with known word-region alignments.

Each category has a random prototype vector and a scene (one of
``num_backgrounds`` background vectors, shared by several categories). An
image is a grid of non-overlapping regions: object regions carry their
category's prototype plus noise, and the remaining context regions mix the
prototypes of the categories present with the scene of one of them. Context
regions therefore leak category signal and scene signal without being
relevant to any word.

Categories come in fixed partner pairs ``(0, 1), (2, 3), ...``; with
probability ``cooccurrence_bias`` an image containing a category also
contains its partner, which is what lets a model lean on co-occurrence.

On disk a dataset is a directory holding ``meta.json`` and one JSON-lines
file per split, one pair per line::

    {"id": "train-0", "regions": [{"box": [x, y, w, h], "feat": [...]}, ...],
     "tokens": [3, 7], "phrases": [{"span": [0, 1], "regions": [2, 5]}, ...]}

``span`` is a half-open word range and ``regions`` index into ``regions``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .metrics import AlignmentAnnotation, Phrase

SPLITS = ("train", "val", "test")


class DatasetFormatError(ValueError):
    """Malformed dataset file; carries the location of the problem."""

    def __init__(self, path, line: int, offset: int, field_name: str | None, message: str):
        self.path = str(path)
        self.line = line
        self.offset = offset
        self.field = field_name
        where = f"{self.path}:{line} (byte offset {offset})"
        if field_name:
            where += f" field {field_name!r}"
        super().__init__(f"{where}: {message}")


@dataclass
class WorldConfig:
    num_pairs: int = 600
    num_val: int = 100
    num_test: int = 200
    regions_per_image: int = 8
    objects_per_image: tuple[int, int] = (2, 3)
    vocab_size: int = 16
    embed_dim: int = 32
    # Scales the noise norm on every region, not only context regions.
    context_noise_sigma: float = 0.3
    cooccurrence_bias: float = 0.7
    multi_region_prob: float = 0.3
    # Prototype weight range for the extra region of a two-region object
    # (a partly occluded view); the rest of that region is a random background.
    partial_visibility: tuple[float, float] = (0.4, 0.8)
    context_leak: float = 0.6
    num_backgrounds: int = 4
    cell_size: float = 100.0
    seed: int = 0

    def __post_init__(self):
        self.objects_per_image = tuple(int(v) for v in self.objects_per_image)
        self.partial_visibility = tuple(float(v) for v in self.partial_visibility)
        lo, hi = self.objects_per_image
        if not 1 <= lo <= hi:
            raise ValueError("objects_per_image must be an increasing pair of positive ints")
        if self.regions_per_image < hi:
            raise ValueError("regions_per_image must be at least the maximum object count")
        if self.vocab_size < 2 * hi:
            raise ValueError("vocab_size must be at least twice the maximum object count")
        if not 0 <= self.cooccurrence_bias <= 1:
            raise ValueError("cooccurrence_bias must lie in [0, 1]")
        if self.context_noise_sigma < 0 or not 0 <= self.context_leak <= 1:
            raise ValueError("noise must be nonnegative and context_leak in [0, 1]")
        if min(self.num_pairs, self.num_val, self.num_test) < 0 or self.embed_dim < 1:
            raise ValueError("split sizes must be nonnegative and embed_dim positive")

    @classmethod
    def from_dict(cls, d: dict) -> WorldConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown world config keys: {sorted(unknown)}")
        return cls(**d)


def scene_of(category: int, num_backgrounds: int) -> int:
    return category % num_backgrounds


def partner(category: int, vocab_size: int) -> int | None:
    other = category ^ 1
    return other if other < vocab_size else None


@dataclass
class PairSample:
    id: str
    boxes: np.ndarray  # R x 4
    feats: np.ndarray  # R x d_in
    tokens: list[int]
    annotation: AlignmentAnnotation

    def __eq__(self, other) -> bool:
        if not isinstance(other, PairSample):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.boxes, other.boxes)
            and np.array_equal(self.feats, other.feats)
            and self.tokens == other.tokens
            and self.annotation == other.annotation
        )


@dataclass
class Dataset:
    splits: dict[str, list[PairSample]]
    meta: dict = field(default_factory=dict)

    def __getitem__(self, split: str) -> list[PairSample]:
        return self.splits[split]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.splits == other.splits and self.meta == other.meta

    @property
    def prototypes(self) -> np.ndarray:
        return np.asarray(self.meta["prototypes"], dtype=np.float64)

    @property
    def vocab_size(self) -> int:
        return int(self.meta["vocab_size"])

    @property
    def feat_dim(self) -> int:
        return int(self.meta["feat_dim"])


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def grid_boxes(n: int, cell: float = 100.0) -> np.ndarray:
    cols = math.ceil(math.sqrt(n))
    return np.array([[(i % cols) * cell, (i // cols) * cell, cell, cell] for i in range(n)], dtype=np.float64)


def draw_categories(rng: np.random.Generator, config: WorldConfig) -> tuple[list[int], bool]:
    """Object categories of one image and whether the biased pair was drawn.

    Fill-in categories never complete a partner pair, so an image holds a
    partner pair exactly when the biased draw succeeded.
    """
    lo, hi = config.objects_per_image
    k = int(rng.integers(lo, hi + 1))
    first = int(rng.integers(config.vocab_size))
    chosen = [first]
    mate = partner(first, config.vocab_size)
    biased = bool(rng.random() < config.cooccurrence_bias) and k >= 2 and mate is not None
    if biased:
        chosen.append(mate)
    while len(chosen) < k:
        blocked = set(chosen) | {partner(c, config.vocab_size) for c in chosen}
        candidates = [c for c in range(config.vocab_size) if c not in blocked]
        chosen.append(int(candidates[int(rng.integers(len(candidates)))]))
    order = rng.permutation(len(chosen))
    return [chosen[i] for i in order], biased


def _noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    z = rng.standard_normal(shape)
    return z * (sigma / math.sqrt(shape[-1])) if sigma > 0 else np.zeros(shape)


def make_pair(
    rng: np.random.Generator, config: WorldConfig, prototypes: np.ndarray, backgrounds: np.ndarray, pair_id: str
) -> PairSample:
    cats, _ = draw_categories(rng, config)
    n_reg = config.regions_per_image
    spans = [1] * len(cats)
    spare = n_reg - len(cats)
    for k in range(len(cats)):
        if spare > 0 and rng.random() < config.multi_region_prob:
            spans[k] += 1
            spare -= 1
    cells = rng.permutation(n_reg)
    d = config.embed_dim
    feats = np.empty((n_reg, d))
    phrases = []
    cursor = 0
    for word, (cat, span) in enumerate(zip(cats, spans)):
        regions = sorted(int(c) for c in cells[cursor : cursor + span])
        cursor += span
        for n, r in enumerate(regions):
            feats[r] = prototypes[cat] + _noise(rng, (d,), config.context_noise_sigma)
            if n > 0:
                vis = rng.uniform(*config.partial_visibility)
                bg = backgrounds[int(rng.integers(len(backgrounds)))]
                feats[r] = vis * feats[r] + (1.0 - vis) * bg
        phrases.append(Phrase(span=(word, word + 1), regions=tuple(regions)))
    present = prototypes[cats]
    for r in sorted(int(c) for c in cells[cursor:]):
        mix = rng.dirichlet(np.ones(len(cats))) @ present
        bg = backgrounds[scene_of(cats[int(rng.integers(len(cats)))], len(backgrounds))]
        feats[r] = config.context_leak * mix + (1.0 - config.context_leak) * bg
        feats[r] += _noise(rng, (d,), config.context_noise_sigma)
    return PairSample(
        id=pair_id,
        boxes=grid_boxes(n_reg, config.cell_size),
        feats=feats,
        tokens=list(cats),
        annotation=AlignmentAnnotation(phrases),
    )


def generate(config: WorldConfig) -> Dataset:
    rng = np.random.default_rng(config.seed)
    prototypes = _unit_rows(rng, config.vocab_size, config.embed_dim)
    backgrounds = _unit_rows(rng, config.num_backgrounds, config.embed_dim)
    sizes = {"train": config.num_pairs, "val": config.num_val, "test": config.num_test}
    splits = {
        name: [make_pair(rng, config, prototypes, backgrounds, f"{name}-{i}") for i in range(n)]
        for name, n in sizes.items()
    }
    meta = {
        "config": _config_json(config),
        "vocab_size": config.vocab_size,
        "feat_dim": config.embed_dim,
        "prototypes": prototypes.tolist(),
    }
    return Dataset(splits, meta)


def _config_json(config: WorldConfig) -> dict:
    d = asdict(config)
    d["objects_per_image"] = list(d["objects_per_image"])
    d["partial_visibility"] = list(d["partial_visibility"])
    return d


# -- serialization -------------------------------------------------------


def pair_to_json(pair: PairSample) -> dict:
    return {
        "id": pair.id,
        "regions": [{"box": box.tolist(), "feat": feat.tolist()} for box, feat in zip(pair.boxes, pair.feats)],
        "tokens": list(pair.tokens),
        "phrases": [{"span": list(p.span), "regions": list(p.regions)} for p in pair.annotation.phrases],
    }


def dumps_pair(pair: PairSample) -> str:
    # repr-based float output is the shortest string that round-trips exactly.
    return json.dumps(pair_to_json(pair), separators=(",", ":"))


def save(dataset: Dataset, path: str | Path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    (root / "meta.json").write_text(json.dumps(dataset.meta, sort_keys=True) + "\n")
    for name, pairs in dataset.splits.items():
        with open(root / f"{name}.jsonl", "w") as fh:
            for pair in pairs:
                fh.write(dumps_pair(pair) + "\n")


def _field(obj: dict, key: str, kind, where: tuple, path_prefix: str = ""):
    name = f"{path_prefix}{key}"
    if not isinstance(obj, dict) or key not in obj:
        raise DatasetFormatError(*where, name, "missing field")
    value = obj[key]
    if not isinstance(value, kind):
        raise DatasetFormatError(*where, name, f"expected {getattr(kind, '__name__', kind)}")
    return value


def pair_from_json(obj: dict, where: tuple = ("<memory>", 0, 0)) -> PairSample:
    pair_id = _field(obj, "id", str, where)
    regions = _field(obj, "regions", list, where)
    if not regions:
        raise DatasetFormatError(*where, "regions", "an image needs at least one region")
    boxes, feats = [], []
    for r, reg in enumerate(regions):
        box = _field(reg, "box", list, where, f"regions[{r}].")
        feat = _field(reg, "feat", list, where, f"regions[{r}].")
        if len(box) != 4 or not all(isinstance(v, (int, float)) for v in box):
            raise DatasetFormatError(*where, f"regions[{r}].box", "expected 4 numbers")
        if box[2] <= 0 or box[3] <= 0:
            raise DatasetFormatError(*where, f"regions[{r}].box", "width and height must be positive")
        if not feat or not all(isinstance(v, (int, float)) for v in feat):
            raise DatasetFormatError(*where, f"regions[{r}].feat", "expected a non-empty list of numbers")
        boxes.append(box)
        feats.append(feat)
    if len({len(f) for f in feats}) != 1:
        raise DatasetFormatError(*where, "regions", "feature vectors differ in length")
    tokens = _field(obj, "tokens", list, where)
    if not tokens or not all(isinstance(t, int) and t >= 0 for t in tokens):
        raise DatasetFormatError(*where, "tokens", "expected a non-empty list of nonnegative ints")
    phrases = []
    for p, ph in enumerate(_field(obj, "phrases", list, where)):
        span = _field(ph, "span", list, where, f"phrases[{p}].")
        regs = _field(ph, "regions", list, where, f"phrases[{p}].")
        if len(span) != 2 or not all(isinstance(v, int) for v in span + regs):
            raise DatasetFormatError(*where, f"phrases[{p}]", "span and regions must be ints")
        phrases.append(Phrase(span=(span[0], span[1]), regions=tuple(regs)))
    annotation = AlignmentAnnotation(phrases)
    try:
        annotation.validate(len(tokens), len(regions))
    except ValueError as exc:
        raise DatasetFormatError(*where, "phrases", str(exc)) from None
    return PairSample(
        id=pair_id,
        boxes=np.asarray(boxes, dtype=np.float64),
        feats=np.asarray(feats, dtype=np.float64),
        tokens=list(tokens),
        annotation=annotation,
    )


def iter_pairs(path: str | Path) -> Iterator[PairSample]:
    offset = 0
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            start = offset
            offset += len(raw)
            text = raw.decode("utf-8").strip()
            if not text:
                continue
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(path, lineno, start + exc.pos, None, f"invalid JSON: {exc.msg}") from None
            yield pair_from_json(obj, (path, lineno, start))


def load_pairs(path: str | Path) -> list[PairSample]:
    return list(iter_pairs(path))


def load(path: str | Path) -> Dataset:
    root = Path(path)
    meta_path = root / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    splits = {name: load_pairs(root / f"{name}.jsonl") for name in SPLITS if (root / f"{name}.jsonl").exists()}
    if not splits:
        raise FileNotFoundError(f"no split files found in {root}")
    if "feat_dim" not in meta:
        first = next(p for pairs in splits.values() for p in pairs)
        meta["feat_dim"] = first.feats.shape[1]
    if "vocab_size" not in meta:
        meta["vocab_size"] = 1 + max(t for pairs in splits.values() for p in pairs for t in p.tokens)
    return Dataset(splits, meta)
