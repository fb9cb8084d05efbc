import hashlib
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccattn.metrics import Phrase, iou, relevant_set
from ccattn.synthworld import (
    DatasetFormatError,
    WorldConfig,
    draw_categories,
    generate,
    load,
    load_pairs,
    pair_from_json,
    partner,
    save,
)

GOLDEN = Path(__file__).parent / "data" / "one_pair.jsonl"


def small(**kw):
    base = dict(num_pairs=40, num_val=10, num_test=10, seed=3)
    base.update(kw)
    return WorldConfig(**base)


def digest(root: Path) -> str:
    h = hashlib.sha256()
    for name in sorted(p.name for p in root.iterdir()):
        h.update(name.encode())
        h.update((root / name).read_bytes())
    return h.hexdigest()


class TestGenerate:
    def test_noiseless_objects_equal_prototypes(self):
        ds = generate(small(context_noise_sigma=0.0, cooccurrence_bias=0.0, multi_region_prob=0.0))
        protos = ds.prototypes
        for pair in ds["train"]:
            for tok, phrase in zip(pair.tokens, pair.annotation.phrases):
                (r,) = phrase.regions
                np.testing.assert_array_equal(pair.feats[r], protos[tok])
                assert int(np.argmax(protos @ pair.feats[r])) == tok

    def test_same_seed_byte_identical(self, tmp_path):
        save(generate(small()), tmp_path / "a")
        save(generate(small()), tmp_path / "b")
        assert digest(tmp_path / "a") == digest(tmp_path / "b")
        save(generate(small(seed=4)), tmp_path / "c")
        assert digest(tmp_path / "a") != digest(tmp_path / "c")

    def test_bias_frequency(self):
        cfg = WorldConfig(cooccurrence_bias=0.9)
        rng = np.random.default_rng(11)
        n = 1000
        hits = 0
        for _ in range(n):
            cats, _ = draw_categories(rng, cfg)
            hits += any(partner(c, cfg.vocab_size) in cats for c in cats)
        sigma = math.sqrt(n * 0.9 * 0.1)
        assert abs(hits - 0.9 * n) <= 3 * sigma

    def test_zero_bias_never_pairs(self):
        cfg = WorldConfig(cooccurrence_bias=0.0)
        rng = np.random.default_rng(12)
        for _ in range(300):
            cats, biased = draw_categories(rng, cfg)
            assert not biased
            assert not any(partner(c, cfg.vocab_size) in cats for c in cats)

    def test_structure(self):
        cfg = small()
        ds = generate(cfg)
        ids = [p.id for split in ds.splits.values() for p in split]
        assert len(ids) == len(set(ids)) == 60
        for pair in ds["train"]:
            assert pair.feats.shape == (cfg.regions_per_image, cfg.embed_dim)
            lo, hi = cfg.objects_per_image
            assert lo <= len(pair.tokens) <= hi
            assert len(set(pair.tokens)) == len(pair.tokens)
            # every caption word is linked, and linked regions are distinct
            linked = [r for p in pair.annotation.phrases for r in p.regions]
            assert len(linked) == len(set(linked))
            assert all(len(p.regions) >= 1 for p in pair.annotation.phrases)
            assert [p.span for p in pair.annotation.phrases] == [(i, i + 1) for i in range(len(pair.tokens))]

    def test_grid_has_no_overlap_and_links_are_relevant(self):
        pair = generate(small())["train"][0]
        b = pair.boxes
        for i in range(len(b)):
            for j in range(i + 1, len(b)):
                assert iou(b[i], b[j]) == 0.0
        for word, phrase in enumerate(pair.annotation.phrases):
            assert relevant_set(b, pair.annotation, word, 0.5) == set(phrase.regions)

    def test_swap_candidates_always_exist(self):
        cfg = small()
        for pair in generate(cfg)["train"]:
            assert len(set(range(cfg.vocab_size)) - set(pair.tokens)) > 0

    @pytest.mark.parametrize(
        "kw",
        [
            dict(regions_per_image=2, objects_per_image=(2, 3)),
            dict(vocab_size=5, objects_per_image=(2, 3)),
            dict(cooccurrence_bias=1.5),
            dict(objects_per_image=(3, 2)),
            dict(context_noise_sigma=-1.0),
        ],
    )
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            WorldConfig(**kw)

    def test_from_dict_rejects_unknown(self):
        with pytest.raises(ValueError):
            WorldConfig.from_dict({"num_pairs": 3, "bogus": 1})

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0, 1))
    def test_seeded_generation_is_deterministic(self, seed, bias):
        cfg = WorldConfig(num_pairs=5, num_val=1, num_test=1, seed=seed, cooccurrence_bias=bias)
        assert generate(cfg) == generate(cfg)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        ds = generate(small(context_noise_sigma=0.7))
        save(ds, tmp_path)
        assert load(tmp_path) == ds

    def test_truncated_file(self, tmp_path):
        save(generate(small()), tmp_path)
        path = tmp_path / "train.jsonl"
        raw = path.read_bytes()
        first_len = raw.index(b"\n") + 1
        path.write_bytes(raw[: first_len + 50])
        with pytest.raises(DatasetFormatError) as info:
            load_pairs(path)
        err = info.value
        assert err.line == 2
        assert err.offset >= first_len
        assert "byte offset" in str(err)

    def test_missing_field(self, tmp_path):
        path = tmp_path / "x.jsonl"
        path.write_text('{"id": "a", "regions": [{"box": [0, 0, 1, 1]}], "tokens": [0], "phrases": []}\n')
        with pytest.raises(DatasetFormatError) as info:
            load_pairs(path)
        assert info.value.field == "regions[0].feat" and info.value.line == 1

    def test_bad_phrase(self):
        obj = {"id": "a", "regions": [{"box": [0, 0, 1, 1], "feat": [1.0]}], "tokens": [0],
               "phrases": [{"span": [0, 2], "regions": [0]}]}
        with pytest.raises(DatasetFormatError):
            pair_from_json(obj)

    def test_golden_file(self):
        (pair,) = load_pairs(GOLDEN)
        assert pair.id == "golden-0"
        np.testing.assert_array_equal(pair.boxes, [[0, 0, 10, 10], [10, 0, 10, 10], [0, 10, 10, 10]])
        np.testing.assert_array_equal(pair.feats[2], [0.5, 0.5, 0.25])
        assert pair.tokens == [4, 1]
        assert pair.annotation.phrases == [Phrase((0, 1), (0,)), Phrase((1, 2), (1, 2))]

    def test_golden_directory_fills_meta(self, tmp_path):
        (tmp_path / "test.jsonl").write_bytes(GOLDEN.read_bytes())
        ds = load(tmp_path)
        assert ds.feat_dim == 3 and ds.vocab_size == 5
        assert list(ds.splits) == ["test"]
